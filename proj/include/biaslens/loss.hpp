#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "biaslens/dataset.hpp"
#include "biaslens/tensor.hpp"
#include "json.hpp"

namespace biaslens {

// Per-class loss weights. `raw` is the inverse class fraction; `normalized`
// keeps the ratios of `raw` and sums to normalization_target (K by default,
// so the mean weight is 1).
struct ClassWeights {
  std::vector<std::string> classes;
  std::map<std::string, double> raw;
  std::map<std::string, double> normalized;
  double normalization_target = 0.0;

  // Normalized weights in `classes` order.
  std::vector<double> vector() const;
  nlohmann::json to_json() const;
};

inline constexpr double kLogClamp = 1e-12;

// raw(c) = 1 / (percentage(c) / 100); throws ValidationError for a class
// with zero count (oversample it first).
ClassWeights compute_class_weights(const ClassDistribution& dist, std::span<const std::string> classes);
ClassWeights class_weights_from_percentages(const std::map<std::string, double>& percentages,
                                            std::span<const std::string> classes);
ClassWeights unit_weights(std::span<const std::string> classes);

struct CrossEntropyResult {
  double loss = 0.0;
  Tensor grad_logits;      // N x K, d(mean loss)/d(logits) through the softmax
  std::size_t clamped = 0;  // rows whose true-class probability hit kLogClamp
};

// Mean over rows of -sum_x w_x y_x log(p_x). `labels` is one-hot N x K.
CrossEntropyResult weighted_cross_entropy(const Tensor& probs, const Tensor& labels,
                                          std::span<const double> weights);
CrossEntropyResult weighted_cross_entropy(const Tensor& probs, const Tensor& labels, const ClassWeights& weights);

// Plain mean cross-entropy, kept as an independent reference.
double cross_entropy(const Tensor& probs, const Tensor& labels);

struct WeightAdjustOptions {
  double target = 0.9;
  double eta = 0.5;
  double w_min = 0.05;
  double w_max = 100.0;
};

// w * (1 + eta * (target - recall)), clamped to [w_min, w_max].
double adjusted_weight(double weight, double recall, const WeightAdjustOptions& options);

// Applies adjusted_weight per class and renormalizes to the weights' target.
// `raw` is carried over unchanged. Throws ValidationError when eta < 0 or a
// recall is outside [0, 1].
ClassWeights dynamic_weight_adjust(const ClassWeights& weights, const std::map<std::string, double>& recall,
                                   const WeightAdjustOptions& options);

}  // namespace biaslens
