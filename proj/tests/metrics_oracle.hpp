#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "biaslens/dataset.hpp"
#include "biaslens/metrics.hpp"

namespace testutil {

// Two 20x20 frames, six ground truths, ten detections with integer corners:
// a duplicate, a wrong class, a poorly placed box and a higher-scored
// duplicate that steals a match.
struct Scene {
  std::vector<biaslens::AnnotationRecord> ground_truth;
  std::vector<biaslens::Detection> detections;
};

inline Scene crafted_scene() {
  using biaslens::Box;
  using biaslens::Condition;
  auto gt = [](std::string sample, std::string label, Box b) {
    biaslens::AnnotationRecord r;
    r.sample_id = std::move(sample);
    r.class_label = std::move(label);
    r.bbox = b;
    r.condition = Condition::Normal;
    r.image_size = {20, 20};
    return r;
  };
  Scene s;
  s.ground_truth = {gt("s1", "ped", {1, 1, 5, 9}),   gt("s1", "cyc", {8, 2, 14, 8}),
                    gt("s1", "moto", {12, 12, 18, 18}), gt("s2", "ped", {2, 2, 6, 10}),
                    gt("s2", "ped", {10, 1, 14, 9}),  gt("s2", "cyc", {3, 12, 9, 18})};
  s.detections = {{"s1", "ped", {1, 1, 5, 9}, 0.95},      {"s1", "ped", {1, 2, 5, 9}, 0.60},
                  {"s1", "cyc", {8, 2, 14, 7}, 0.90},     {"s1", "moto", {15, 15, 19, 19}, 0.40},
                  {"s1", "ped", {12, 12, 18, 18}, 0.30},  {"s2", "ped", {2, 2, 6, 9}, 0.85},
                  {"s2", "ped", {10, 2, 14, 9}, 0.70},    {"s2", "ped", {10, 1, 14, 9}, 0.20},
                  {"s2", "cyc", {3, 12, 9, 17}, 0.50},    {"s2", "cyc", {3, 12, 9, 18}, 0.80}};
  return s;
}

// IoU by counting unit cells; valid for integer corners only.
inline double cell_iou(const biaslens::Box& a, const biaslens::Box& b) {
  int inter = 0, uni = 0;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const bool in_a = x >= a.x1 && x + 1 <= a.x2 && y >= a.y1 && y + 1 <= a.y2;
      const bool in_b = x >= b.x1 && x + 1 <= b.x2 && y >= b.y1 && y + 1 <= b.y2;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

struct Recount {
  std::size_t tp = 0, fp = 0, fn = 0, n_gt = 0;
  std::vector<bool> flags;  // descending score
};

// Re-derives the greedy single-match assignment by scanning every
// detection/ground-truth pair.
inline std::map<std::string, Recount> brute_force_recount(const Scene& s, double threshold) {
  std::map<std::string, Recount> out;
  std::vector<std::size_t> order(s.detections.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return s.detections[a].score > s.detections[b].score; });
  std::vector<bool> used(s.ground_truth.size(), false);
  for (const auto& g : s.ground_truth) ++out[g.class_label].n_gt;
  for (auto di : order) {
    const auto& d = s.detections[di];
    double best = -1.0;
    std::size_t best_g = s.ground_truth.size();
    for (std::size_t g = 0; g < s.ground_truth.size(); ++g) {
      const auto& gt = s.ground_truth[g];
      if (used[g] || gt.sample_id != d.sample_id || gt.class_label != d.class_label) continue;
      const double v = cell_iou(d.bbox, gt.bbox);
      if (v >= threshold && v > best) {
        best = v;
        best_g = g;
      }
    }
    auto& r = out[d.class_label];
    if (best_g < s.ground_truth.size()) {
      used[best_g] = true;
      ++r.tp;
      r.flags.push_back(true);
    } else {
      ++r.fp;
      r.flags.push_back(false);
    }
  }
  for (auto& [label, r] : out) r.fn = r.n_gt - r.tp;
  return out;
}

// AP as the mean over ground truths of the best precision reached at or
// after the rank where each one is recalled (unrecalled ones count 0).
inline double brute_force_ap(const std::vector<bool>& flags, std::size_t n_gt) {
  std::vector<double> precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    tp += flags[i];
    precision.push_back(static_cast<double>(tp) / (i + 1));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (!flags[i]) continue;
    sum += *std::max_element(precision.begin() + static_cast<std::ptrdiff_t>(i), precision.end());
  }
  return n_gt ? sum / n_gt : 0.0;
}

}  // namespace testutil
