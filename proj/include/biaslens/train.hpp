#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "biaslens/batch.hpp"
#include "biaslens/dataset.hpp"
#include "biaslens/model.hpp"
#include "biaslens/tensor.hpp"
#include "json.hpp"

namespace biaslens {

enum class ScheduleKind { Constant, StepDecay, LinearDecay };

struct LrSchedule {
  ScheduleKind kind = ScheduleKind::Constant;
  double factor = 0.9;  // StepDecay: multiplier applied every `every` epochs
  int every = 10;
  double to = 1e-5;  // LinearDecay: rate reached at the last epoch

  double rate(double base, int epoch, int epochs) const;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 50;
  double weight_decay = 1e-4;
  double dropout = 0.0;
  LrSchedule schedule;
  std::uint64_t seed = 0;
  // Weight of the box-regression term relative to the classification loss.
  double box_weight = 1.0;

  // lr 1e-3, batch 32, weight decay 1e-4, 10% step decay every 10 epochs.
  static TrainConfig cnn_defaults();
  // lr 1e-3 decaying linearly to 1e-5 over 30 epochs, weight decay 3e-2,
  // dropout 0.1.
  static TrainConfig vit_defaults();

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

// Images, integer class labels and normalized box targets (cx, cy, w, h)/side.
struct LabeledSet {
  Tensor inputs;  // N x 1 x S x S
  std::vector<int> labels;
  Tensor box_targets;  // N x 4
  std::vector<std::string> sample_ids;

  std::size_t size() const { return labels.size(); }
  LabeledSet subset(std::span<const std::size_t> indices) const;
};

std::vector<double> box_to_target(const Box& box, double side);
Box target_to_box(std::span<const double> target, double side);

// Weighted cross-entropy on the class logits plus box_weight times the mean
// half squared error of the box outputs.
struct DetectionLoss {
  std::vector<double> class_weights;
  double box_weight = 1.0;

  struct Result {
    double loss = 0.0;
    double classification = 0.0;
    double box = 0.0;
    Tensor output_grad;  // N x (K + 4)
    std::size_t clamped = 0;
  };

  Result evaluate(const ForwardBatch& fwd, std::span<const int> labels, const Tensor& box_targets) const;
};

// First-order optimizer with bias-corrected first and second moment
// estimates; weight decay enters as an L2 term on the gradient.
class Adam {
 public:
  explicit Adam(std::size_t n, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(std::span<double> params, std::span<const double> grads, double lr, double weight_decay);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  std::vector<double> recall;       // per class, on the validation set
  std::vector<double> selectivity;  // per class, filled by the epoch hook
};

struct MetricTrace {
  std::vector<std::string> classes;
  std::vector<EpochRecord> epochs;

  std::string to_csv() const;
  void write_csv(const std::filesystem::path& path) const;
};

// Called after every epoch with the current parameters.
using EpochHook = std::function<void(int epoch, const Model& model, EpochRecord& record)>;

// Trains in place. Throws RuntimeFailure naming epoch and batch on a
// non-finite loss.
MetricTrace train(Model& model, const LabeledSet& train_set, const TrainConfig& config, const DetectionLoss& loss,
                  const std::vector<std::string>& class_names, const LabeledSet* validation = nullptr,
                  const EpochHook& hook = {});

// Argmax predictions and per-class recall.
std::vector<int> predict(const Model& model, const LabeledSet& set);
std::vector<double> per_class_recall(std::span<const int> predicted, std::span<const int> labels,
                                     std::size_t num_classes);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

// Per-class seeded shuffle, then round(train_frac * n) / round(val_frac * n) /
// rest. Throws ValidationError when a class is absent from any split.
SplitIndices stratified_split(const DatasetManifest& manifest, std::uint64_t seed, double train_frac = 0.70,
                              double val_frac = 0.15);

struct GridResult {
  TrainConfig config;
  double macro_recall = 0.0;
};

// Trains a fresh copy of `prototype` per config and scores validation macro
// recall. No early stopping.
std::vector<GridResult> grid_search(const Model& prototype, std::span<const TrainConfig> configs,
                                    const LabeledSet& train_set, const LabeledSet& validation,
                                    const DetectionLoss& loss, const std::vector<std::string>& class_names);

}  // namespace biaslens
