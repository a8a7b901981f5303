#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "biaslens/dataset.hpp"

namespace biaslens {

struct Detection {
  std::string sample_id;
  std::string class_label;
  Box bbox;
  double score = 0.0;
};

// Throws ValidationError for a zero-area box.
double iou(const Box& a, const Box& b);

struct TruePositive {
  Box detection;
  Box ground_truth;
};

struct ClassMatch {
  std::vector<bool> tp;         // per detection, descending score
  std::vector<double> scores;   // same order
  std::size_t n_gt = 0;
  std::size_t fn = 0;
  std::vector<TruePositive> pairs;

  std::size_t tp_count() const;
  std::size_t fp_count() const { return tp.size() - tp_count(); }
};

struct MatchResult {
  double iou_threshold = 0.5;
  // Every class that has a detection or a ground truth.
  std::map<std::string, ClassMatch> per_class;
};

// Greedy: detections by descending score (ties keep input order); each takes
// the highest-IoU unmatched ground truth of its class in the same sample
// with IoU >= threshold, else it is a false positive.
MatchResult match_detections(std::span<const Detection> detections, std::span<const AnnotationRecord> ground_truth,
                             double iou_threshold = 0.5);

// All-points AP with right-max precision interpolation.
double average_precision(const std::vector<bool>& tp_flags, std::size_t n_gt);
double average_precision(const ClassMatch& match);

// Classes with n_gt = 0 are skipped and listed in *skipped.
std::map<std::string, double> per_class_ap(const MatchResult& match, std::vector<std::string>* skipped = nullptr);
// Unweighted mean; throws ValidationError on an empty map.
double mean_ap(const std::map<std::string, double>& per_class);

using TPErrorSet = std::vector<std::pair<std::string, double>>;

// translation, scale, orientation, velocity, attribute. The last three are 1.
TPErrorSet default_tp_errors(double translation, double scale);
// Class-averaged mean translation error (center distance over the ground-truth
// diagonal) and scale error (1 - IoU after aligning centers). All ones when
// there are no true positives.
TPErrorSet tp_errors(const MatchResult& match);

// (5 mAP + sum(1 - min(1, mTP))) / 10 over the five default terms. Throws on
// negative mTP or mAP outside [0, 1].
double nds(double map, const TPErrorSet& tps);

struct ClassErrors {
  std::size_t tp = 0, fp = 0, fn = 0;
  std::size_t detections = 0, ground_truth = 0;
  double fp_rate = 0.0;  // per detection
  double fn_rate = 0.0;  // per ground truth
};

std::map<std::string, ClassErrors> per_class_errors(const MatchResult& match);

// JSON lines with sample_id, class_label, bbox, score.
std::vector<Detection> load_detections(const std::filesystem::path& path);
void write_detections(const std::filesystem::path& path, std::span<const Detection> detections);

}  // namespace biaslens
