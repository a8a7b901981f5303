#include "biaslens/loss.hpp"

#include <algorithm>
#include <cmath>

#include "biaslens/common.hpp"

namespace biaslens {

std::vector<double> ClassWeights::vector() const {
  std::vector<double> out;
  out.reserve(classes.size());
  for (const auto& c : classes) out.push_back(normalized.at(c));
  return out;
}

nlohmann::json ClassWeights::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& c : classes) j[c] = {{"raw", raw.at(c)}, {"normalized", normalized.at(c)}};
  return j;
}

namespace {

void normalize(ClassWeights& w) {
  double sum = 0.0;
  for (const auto& c : w.classes) sum += w.normalized.at(c);
  for (const auto& c : w.classes) w.normalized[c] *= w.normalization_target / sum;
}

}  // namespace

ClassWeights class_weights_from_percentages(const std::map<std::string, double>& percentages,
                                            std::span<const std::string> classes) {
  if (classes.empty()) throw ValidationError("class weights need at least one class");
  ClassWeights w;
  w.classes.assign(classes.begin(), classes.end());
  w.normalization_target = static_cast<double>(classes.size());
  for (const auto& c : classes) {
    const auto it = percentages.find(c);
    if (it == percentages.end() || !(it->second > 0.0)) {
      throw ValidationError("class '" + c +
                            "' has zero representation; its inverse-frequency weight is infinite "
                            "(oversample the class first)");
    }
    w.raw[c] = 1.0 / (it->second / 100.0);
    w.normalized[c] = w.raw[c];
  }
  normalize(w);
  return w;
}

ClassWeights compute_class_weights(const ClassDistribution& dist, std::span<const std::string> classes) {
  std::map<std::string, double> pct;
  for (const auto& c : classes) {
    const auto it = dist.counts.find(c);
    pct[c] = (it == dist.counts.end() || it->second == 0) ? 0.0 : dist.percentages.at(c);
  }
  return class_weights_from_percentages(pct, classes);
}

ClassWeights unit_weights(std::span<const std::string> classes) {
  ClassWeights w;
  w.classes.assign(classes.begin(), classes.end());
  w.normalization_target = static_cast<double>(classes.size());
  for (const auto& c : classes) {
    w.raw[c] = 1.0;
    w.normalized[c] = 1.0;
  }
  return w;
}

CrossEntropyResult weighted_cross_entropy(const Tensor& probs, const Tensor& labels,
                                          std::span<const double> weights) {
  if (probs.shape() != labels.shape() || probs.rank() != 2) {
    throw ValidationError("weighted_cross_entropy: probs " + shape_string(probs.shape()) + " vs labels " +
                          shape_string(labels.shape()));
  }
  const std::size_t n = probs.dim(0);
  const std::size_t k = probs.dim(1);
  if (weights.size() != k) throw ValidationError("weighted_cross_entropy: weight count != class count");
  CrossEntropyResult r{0.0, Tensor({n, k}), 0};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    double li = 0.0;
    double w_true = 0.0;
    for (std::size_t x = 0; x < k; ++x) {
      const double y = labels.at(i, x);
      if (y == 0.0) continue;
      double p = probs.at(i, x);
      if (p < kLogClamp) {
        p = kLogClamp;
        ++r.clamped;
      }
      li -= weights[x] * y * std::log(p);
      w_true += weights[x] * y;
    }
    r.loss += li * inv_n;
    for (std::size_t x = 0; x < k; ++x) {
      r.grad_logits.at(i, x) = w_true * (probs.at(i, x) - labels.at(i, x)) * inv_n;
    }
  }
  return r;
}

CrossEntropyResult weighted_cross_entropy(const Tensor& probs, const Tensor& labels, const ClassWeights& weights) {
  const auto w = weights.vector();
  return weighted_cross_entropy(probs, labels, w);
}

double cross_entropy(const Tensor& probs, const Tensor& labels) {
  const std::size_t n = probs.dim(0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t x = 0; x < probs.dim(1); ++x) {
      if (labels.at(i, x) != 0.0) total -= labels.at(i, x) * std::log(std::max(probs.at(i, x), kLogClamp));
    }
  }
  return total / static_cast<double>(n);
}

double adjusted_weight(double weight, double recall, const WeightAdjustOptions& o) {
  return std::clamp(weight * (1.0 + o.eta * (o.target - recall)), o.w_min, o.w_max);
}

ClassWeights dynamic_weight_adjust(const ClassWeights& weights, const std::map<std::string, double>& recall,
                                   const WeightAdjustOptions& options) {
  if (options.eta < 0.0) throw ValidationError("weight adjustment rate eta must be non-negative");
  ClassWeights out = weights;
  for (const auto& c : weights.classes) {
    const auto it = recall.find(c);
    if (it == recall.end()) throw ValidationError("no recall reported for class '" + c + "'");
    if (!(it->second >= 0.0 && it->second <= 1.0)) {
      throw ValidationError("recall for class '" + c + "' is outside [0, 1]");
    }
    out.normalized[c] = adjusted_weight(weights.normalized.at(c), it->second, options);
  }
  normalize(out);
  return out;
}

}  // namespace biaslens
