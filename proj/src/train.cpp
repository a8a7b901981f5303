#include "biaslens/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "biaslens/common.hpp"

namespace biaslens {

double LrSchedule::rate(double base, int epoch, int epochs) const {
  switch (kind) {
    case ScheduleKind::Constant:
      return base;
    case ScheduleKind::StepDecay:
      return base * std::pow(factor, static_cast<double>(epoch / std::max(1, every)));
    case ScheduleKind::LinearDecay:
      if (epochs <= 1) return base;
      return base + (to - base) * static_cast<double>(epoch) / static_cast<double>(epochs - 1);
  }
  return base;
}

TrainConfig TrainConfig::cnn_defaults() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 32;
  c.epochs = 50;
  c.weight_decay = 1e-4;
  c.dropout = 0.0;
  c.schedule = {ScheduleKind::StepDecay, 0.9, 10, 0.0};
  return c;
}

TrainConfig TrainConfig::vit_defaults() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.batch_size = 32;
  c.epochs = 30;
  c.weight_decay = 3e-2;
  c.dropout = 0.1;
  c.schedule = {ScheduleKind::LinearDecay, 0.9, 10, 1e-5};
  return c;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ValidationError("learning_rate must be finite and non-negative");
  }
  if (batch_size < 1) throw ValidationError("batch_size must be at least 1");
  if (epochs < 1) throw ValidationError("epochs must be at least 1");
  if (weight_decay < 0.0) throw ValidationError("weight_decay must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must lie in [0, 1)");
  if (schedule.kind == ScheduleKind::StepDecay && (schedule.every < 1 || schedule.factor <= 0.0)) {
    throw ValidationError("step decay needs every >= 1 and factor > 0");
  }
}

namespace {

std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::Constant: return "constant";
    case ScheduleKind::StepDecay: return "step";
    case ScheduleKind::LinearDecay: return "linear";
  }
  return "constant";
}

ScheduleKind parse_schedule(const std::string& s) {
  if (s == "constant") return ScheduleKind::Constant;
  if (s == "step") return ScheduleKind::StepDecay;
  if (s == "linear") return ScheduleKind::LinearDecay;
  throw ValidationError("unknown lr schedule '" + s + "' (expected constant, step or linear)");
}

}  // namespace

nlohmann::json TrainConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"batch_size", batch_size},
          {"epochs", epochs},
          {"weight_decay", weight_decay},
          {"dropout", dropout},
          {"lr_schedule", schedule_name(schedule.kind)},
          {"lr_decay_factor", schedule.factor},
          {"lr_decay_every", schedule.every},
          {"lr_final", schedule.to},
          {"seed", seed},
          {"box_weight", box_weight}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.schedule.kind = parse_schedule(j.at("lr_schedule").get<std::string>());
  c.schedule.factor = j.at("lr_decay_factor").get<double>();
  c.schedule.every = j.at("lr_decay_every").get<int>();
  c.schedule.to = j.at("lr_final").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.box_weight = j.at("box_weight").get<double>();
  return c;
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
  const std::size_t row = inputs.row_size();
  std::vector<std::size_t> shape = inputs.shape();
  shape[0] = indices.size();
  LabeledSet out{Tensor(shape), {}, Tensor({indices.size(), 4}), {}};
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    std::copy_n(inputs.row(src).begin(), row, out.inputs.row(i).begin());
    std::copy_n(box_targets.row(src).begin(), 4, out.box_targets.row(i).begin());
    out.labels.push_back(labels[src]);
    out.sample_ids.push_back(sample_ids[src]);
  }
  return out;
}

std::vector<double> box_to_target(const Box& box, double side) {
  return {box.center_x() / side, box.center_y() / side, box.width() / side, box.height() / side};
}

Box target_to_box(std::span<const double> t, double side) {
  const double w = std::clamp(t[2], 1e-3, 1.0) * side;
  const double h = std::clamp(t[3], 1e-3, 1.0) * side;
  const double cx = std::clamp(t[0], 0.0, 1.0) * side;
  const double cy = std::clamp(t[1], 0.0, 1.0) * side;
  Box b{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
  // Shift back inside the frame, keeping the size.
  if (b.x1 < 0) { b.x2 -= b.x1; b.x1 = 0; }
  if (b.y1 < 0) { b.y2 -= b.y1; b.y1 = 0; }
  if (b.x2 > side) { b.x1 -= b.x2 - side; b.x2 = side; }
  if (b.y2 > side) { b.y1 -= b.y2 - side; b.y2 = side; }
  return b;
}

DetectionLoss::Result DetectionLoss::evaluate(const ForwardBatch& fwd, std::span<const int> labels,
                                              const Tensor& box_targets) const {
  const std::size_t n = labels.size();
  const std::size_t k = fwd.probabilities.dim(1);
  if (class_weights.size() != k) throw ValidationError("DetectionLoss: weight count != class count");
  Result r;
  r.output_grad = Tensor({n, k + 4});
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const double w = class_weights[y];
    double p = fwd.probabilities.at(i, y);
    if (p < 1e-12) {
      p = 1e-12;
      ++r.clamped;
    }
    r.classification -= w * std::log(p) * inv_n;
    for (std::size_t x = 0; x < k; ++x) {
      r.output_grad.at(i, x) = w * (fwd.probabilities.at(i, x) - (x == y ? 1.0 : 0.0)) * inv_n;
    }
    for (std::size_t j = 0; j < 4; ++j) {
      const double diff = fwd.boxes.at(i, j) - box_targets.at(i, j);
      r.box += 0.5 * diff * diff * inv_n;
      r.output_grad.at(i, k + j) = box_weight * diff * inv_n;
    }
  }
  r.box *= box_weight;
  r.loss = r.classification + r.box;
  return r;
}

Adam::Adam(std::size_t n, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps), m_(n, 0.0), v_(n, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grads, double lr, double weight_decay) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i] + weight_decay * params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g * g;
    const double mhat = m_[i] / c1;
    const double vhat = v_[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
  }
}

std::string MetricTrace::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(12);
  out << "epoch,loss,learning_rate";
  for (const auto& c : classes) out << ",recall_" << c;
  for (const auto& c : classes) out << ",selectivity_" << c;
  out << '\n';
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.loss << ',' << e.learning_rate;
    for (std::size_t c = 0; c < classes.size(); ++c) out << ',' << (c < e.recall.size() ? e.recall[c] : 0.0);
    for (std::size_t c = 0; c < classes.size(); ++c) {
      out << ',' << (c < e.selectivity.size() ? e.selectivity[c] : 0.0);
    }
    out << '\n';
  }
  return out.str();
}

void MetricTrace::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot open " + path.string() + " for writing");
  out << to_csv();
}

std::vector<int> predict(const Model& model, const LabeledSet& set) {
  std::vector<int> out;
  out.reserve(set.size());
  constexpr std::size_t kChunk = 256;
  for (std::size_t lo = 0; lo < set.size(); lo += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, set.size() - lo));
    std::iota(idx.begin(), idx.end(), lo);
    const auto part = set.subset(idx);
    ForwardOptions opts;
    opts.keep_caches = false;
    const auto fwd = forward(model, part.inputs, opts);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const auto row = fwd.probabilities.row(i);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  return out;
}

std::vector<double> per_class_recall(std::span<const int> predicted, std::span<const int> labels,
                                     std::size_t num_classes) {
  std::vector<double> hit(num_classes, 0.0), total(num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    total[y] += 1.0;
    if (predicted[i] == labels[i]) hit[y] += 1.0;
  }
  std::vector<double> out(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) out[c] = total[c] > 0 ? hit[c] / total[c] : 0.0;
  return out;
}

MetricTrace train(Model& model, const LabeledSet& train_set, const TrainConfig& config, const DetectionLoss& loss,
                  const std::vector<std::string>& class_names, const LabeledSet* validation,
                  const EpochHook& hook) {
  config.validate();
  if (train_set.size() == 0) throw ValidationError("training set is empty");
  check_batch_shape(model, train_set.inputs);
  MetricTrace trace;
  trace.classes = class_names;
  Adam adam(model.parameters().size());
  const std::size_t n = train_set.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.schedule.rate(config.learning_rate, epoch, config.epochs);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);

    double epoch_loss = 0.0;
    std::size_t batch_index = 0;
    for (std::size_t lo = 0; lo < n; lo += bs, ++batch_index) {
      const std::span<const std::size_t> idx(order.data() + lo, std::min(bs, n - lo));
      const auto batch = train_set.subset(idx);
      ForwardOptions opts;
      if (config.dropout > 0.0) {
        opts.dropout_rate = config.dropout;
        opts.dropout_seed = mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)), batch_index + 1);
      }
      const auto fwd = forward(model, batch.inputs, opts);
      const auto res = loss.evaluate(fwd, batch.labels, batch.box_targets);
      if (!std::isfinite(res.loss)) {
        throw RuntimeFailure("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(batch_index));
      }
      epoch_loss += res.loss * static_cast<double>(idx.size());
      const auto grads = backward(model, batch.inputs, fwd, res.output_grad, default_policy(), false);
      adam.step(model.parameters(), grads.params, lr, config.weight_decay);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = epoch_loss / static_cast<double>(n);
    rec.learning_rate = lr;
    if (validation != nullptr && validation->size() > 0) {
      rec.recall = per_class_recall(predict(model, *validation), validation->labels, model.num_classes());
    }
    if (hook) hook(epoch, model, rec);
    trace.epochs.push_back(std::move(rec));
  }
  return trace;
}

SplitIndices stratified_split(const DatasetManifest& manifest, std::uint64_t seed, double train_frac,
                              double val_frac) {
  SplitIndices s;
  for (const auto& label : manifest.observed_labels()) {
    auto idx = manifest.indices_of(label);
    Rng rng(mix_seed(seed, stable_hash(label)));
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[uniform_index(rng, i)]);
    const auto n = static_cast<double>(idx.size());
    const auto n_train = static_cast<std::size_t>(std::llround(train_frac * n));
    const auto n_val = static_cast<std::size_t>(std::llround(val_frac * n));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= idx.size()) {
      throw ValidationError("class '" + label + "' (" + std::to_string(idx.size()) +
                            " records) is absent from a split after stratification");
    }
    s.train.insert(s.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.validation.insert(s.validation.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                        idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    s.test.insert(s.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.validation.begin(), s.validation.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<GridResult> grid_search(const Model& prototype, std::span<const TrainConfig> configs,
                                    const LabeledSet& train_set, const LabeledSet& validation,
                                    const DetectionLoss& loss, const std::vector<std::string>& class_names) {
  std::vector<GridResult> out;
  for (const auto& cfg : configs) {
    auto model = prototype.clone();
    model->initialize(cfg.seed);
    train(*model, train_set, cfg, loss, class_names);
    const auto recall = per_class_recall(predict(*model, validation), validation.labels, model->num_classes());
    const double macro = std::accumulate(recall.begin(), recall.end(), 0.0) / static_cast<double>(recall.size());
    out.push_back({cfg, macro});
  }
  return out;
}

}  // namespace biaslens
