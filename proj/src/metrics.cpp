#include "biaslens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>

#include "biaslens/common.hpp"
#include "json.hpp"

namespace biaslens {

double iou(const Box& a, const Box& b) {
  if (!(a.area() > 0.0) || !(b.area() > 0.0)) throw ValidationError("iou: degenerate zero-area box");
  const double w = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double h = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = w * h;
  return inter / (a.area() + b.area() - inter);
}

std::size_t ClassMatch::tp_count() const { return static_cast<std::size_t>(std::count(tp.begin(), tp.end(), true)); }

MatchResult match_detections(std::span<const Detection> detections, std::span<const AnnotationRecord> ground_truth,
                             double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw ValidationError("iou threshold must lie in (0, 1]");
  }
  MatchResult m;
  m.iou_threshold = iou_threshold;
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> gt_by_key;
  for (std::size_t g = 0; g < ground_truth.size(); ++g) {
    const auto& r = ground_truth[g];
    gt_by_key[{r.sample_id, r.class_label}].push_back(g);
    ++m.per_class[r.class_label].n_gt;
  }
  for (const auto& d : detections) {
    if (!std::isfinite(d.score)) throw ValidationError("detection on '" + d.sample_id + "' has a non-finite score");
  }

  std::vector<std::size_t> order(detections.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });

  std::vector<bool> used(ground_truth.size(), false);
  for (auto di : order) {
    const auto& d = detections[di];
    auto& cm = m.per_class[d.class_label];
    std::size_t best = ground_truth.size();
    double best_iou = -1.0;
    const auto it = gt_by_key.find({d.sample_id, d.class_label});
    if (it != gt_by_key.end()) {
      for (auto g : it->second) {
        if (used[g]) continue;
        const double v = iou(d.bbox, ground_truth[g].bbox);
        if (v >= iou_threshold && v > best_iou) {
          best_iou = v;
          best = g;
        }
      }
    }
    cm.scores.push_back(d.score);
    if (best < ground_truth.size()) {
      used[best] = true;
      cm.tp.push_back(true);
      cm.pairs.push_back({d.bbox, ground_truth[best].bbox});
    } else {
      cm.tp.push_back(false);
    }
  }
  for (auto& [label, cm] : m.per_class) cm.fn = cm.n_gt - cm.tp_count();
  return m;
}

double average_precision(const std::vector<bool>& tp_flags, std::size_t n_gt) {
  if (n_gt == 0) throw ValidationError("average precision is undefined without ground truth");
  const std::size_t n = tp_flags.size();
  std::vector<double> precision(n), recall(n);
  double tp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (tp_flags[i]) tp += 1.0;
    precision[i] = tp / static_cast<double>(i + 1);
    recall[i] = tp / static_cast<double>(n_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

double average_precision(const ClassMatch& match) { return average_precision(match.tp, match.n_gt); }

std::map<std::string, double> per_class_ap(const MatchResult& match, std::vector<std::string>* skipped) {
  std::map<std::string, double> out;
  for (const auto& [label, cm] : match.per_class) {
    if (cm.n_gt == 0) {
      if (skipped != nullptr) skipped->push_back(label);
      continue;
    }
    out[label] = average_precision(cm);
  }
  return out;
}

double mean_ap(const std::map<std::string, double>& per_class) {
  if (per_class.empty()) throw ValidationError("mean AP needs at least one class");
  double s = 0.0;
  for (const auto& [label, ap] : per_class) s += ap;
  return s / static_cast<double>(per_class.size());
}

TPErrorSet default_tp_errors(double translation, double scale) {
  return {{"translation", translation}, {"scale", scale}, {"orientation", 1.0}, {"velocity", 1.0}, {"attribute", 1.0}};
}

TPErrorSet tp_errors(const MatchResult& match) {
  double trans = 0.0, scale = 0.0;
  std::size_t classes = 0;
  for (const auto& [label, cm] : match.per_class) {
    if (cm.pairs.empty()) continue;
    double t = 0.0, s = 0.0;
    for (const auto& p : cm.pairs) {
      const double dx = p.detection.center_x() - p.ground_truth.center_x();
      const double dy = p.detection.center_y() - p.ground_truth.center_y();
      const double diag = std::hypot(p.ground_truth.width(), p.ground_truth.height());
      t += std::hypot(dx, dy) / diag;
      const double iw = std::min(p.detection.width(), p.ground_truth.width());
      const double ih = std::min(p.detection.height(), p.ground_truth.height());
      const double inter = iw * ih;
      s += 1.0 - inter / (p.detection.area() + p.ground_truth.area() - inter);
    }
    trans += t / static_cast<double>(cm.pairs.size());
    scale += s / static_cast<double>(cm.pairs.size());
    ++classes;
  }
  if (classes == 0) return default_tp_errors(1.0, 1.0);
  return default_tp_errors(trans / static_cast<double>(classes), scale / static_cast<double>(classes));
}

double nds(double map, const TPErrorSet& tps) {
  if (!(map >= 0.0 && map <= 1.0)) throw ValidationError("nds: mAP must lie in [0, 1]");
  double s = 5.0 * map;
  for (const auto& [name, v] : tps) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("nds: mTP '" + name + "' must be finite and >= 0");
    s += 1.0 - std::min(1.0, v);
  }
  return s / 10.0;
}

std::map<std::string, ClassErrors> per_class_errors(const MatchResult& match) {
  std::map<std::string, ClassErrors> out;
  for (const auto& [label, cm] : match.per_class) {
    ClassErrors e;
    e.tp = cm.tp_count();
    e.fp = cm.fp_count();
    e.fn = cm.fn;
    e.detections = cm.tp.size();
    e.ground_truth = cm.n_gt;
    e.fp_rate = e.detections ? static_cast<double>(e.fp) / static_cast<double>(e.detections) : 0.0;
    e.fn_rate = e.ground_truth ? static_cast<double>(e.fn) / static_cast<double>(e.ground_truth) : 0.0;
    out[label] = e;
  }
  return out;
}

std::vector<Detection> load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open detections file " + path.string());
  std::vector<Detection> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Detection d;
      d.sample_id = j.at("sample_id").get<std::string>();
      d.class_label = j.at("class_label").get<std::string>();
      const auto b = j.at("bbox").get<std::vector<double>>();
      if (b.size() != 4) throw ValidationError("bbox needs 4 numbers");
      d.bbox = {b[0], b[1], b[2], b[3]};
      d.score = j.at("score").get<double>();
      if (!(d.bbox.x1 < d.bbox.x2 && d.bbox.y1 < d.bbox.y2)) throw ValidationError("invalid bbox");
      out.push_back(std::move(d));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what(), lineno);
    } catch (const ValidationError& e) {
      throw ParseError("line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
  return out;
}

void write_detections(const std::filesystem::path& path, std::span<const Detection> detections) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  for (const auto& d : detections) {
    nlohmann::json j{{"sample_id", d.sample_id},
                     {"class_label", d.class_label},
                     {"bbox", {d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2}},
                     {"score", d.score}};
    out << j.dump() << '\n';
  }
}

}  // namespace biaslens
