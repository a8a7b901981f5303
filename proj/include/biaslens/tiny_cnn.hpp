#pragma once

#include "biaslens/kernels.hpp"
#include "biaslens/model.hpp"

namespace biaslens {

// conv -> ReLU -> 2x2 average pool, twice, then one dense layer producing
// class logits and box outputs. Dropout (training only) acts on the
// flattened features feeding the dense layer.
class TinyCNN final : public Model {
 public:
  TinyCNN(const CnnSpec& spec, std::size_t num_classes);

  ModelKind kind() const override { return ModelKind::TinyCNN; }
  nlohmann::json architecture() const override;
  std::unique_ptr<Model> clone() const override { return std::make_unique<TinyCNN>(*this); }
  std::size_t input_side() const override { return spec_.input_side; }
  std::size_t num_classes() const override { return num_classes_; }

  void forward_sample(std::span<const double> input, ForwardCache& cache,
                      const DropoutContext* dropout) const override;
  void backward_sample(std::span<const double> input, const ForwardCache& cache,
                       std::span<const double> d_output, std::span<double> d_params,
                       std::span<double> d_input) const override;

  std::vector<ProbeLayer> probe_layers() const override;
  void probe_activations(const ForwardCache& cache, std::size_t layer, std::span<double> out) const override;
  void probe_input_gradient(std::span<const double> input, const ForwardCache& cache, std::size_t layer,
                            std::size_t neuron, std::span<double> d_input) const override;

  std::size_t feature_size() const;

 private:
  // Backward from d(relu output of conv `stage`) down to the input.
  void backward_from_stage(std::span<const double> input, const ForwardCache& cache, int stage,
                           std::vector<double> d_relu, double* d_params, std::span<double> d_input) const;

  CnnSpec spec_;
  std::size_t num_classes_;
  kernels::ConvShape conv1_;
  kernels::ConvShape conv2_;
  std::size_t pool1_side_;
  std::size_t pool2_side_;
  std::size_t w1_, b1_, w2_, b2_, wd_, bd_;
};

}  // namespace biaslens
