#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace biaslens {

enum class ModelKind { TinyCNN, TinyViT };

std::string_view to_string(ModelKind kind);
// Accepts "tiny_cnn" / "tiny_vit".
ModelKind parse_model_kind(std::string_view text);

enum class InitKind { FanInUniform, Zero, One };

// A named slice of the flat parameter vector.
struct ParamBlock {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  std::size_t fan_in = 1;
  InitKind init = InitKind::FanInUniform;
};

// A layer whose units can be probed for sensitivity/selectivity. The probed
// activation of a unit is its post-ReLU value averaged over positions.
struct ProbeLayer {
  std::string name;
  std::size_t width = 0;
};

// Per-sample activations kept for backward and analysis. Slots are owned and
// indexed by the model that filled them.
struct ForwardCache {
  std::vector<std::vector<double>> slots;
  std::vector<double> output;
  bool filled = false;
};

// Training-mode dropout; eval mode is expressed by passing no context.
struct DropoutContext {
  double rate = 0.0;
  std::uint64_t seed = 0;
};

class Model {
 public:
  virtual ~Model() = default;

  virtual ModelKind kind() const = 0;
  virtual nlohmann::json architecture() const = 0;
  virtual std::unique_ptr<Model> clone() const = 0;

  // Side length of the square single-channel input.
  virtual std::size_t input_side() const = 0;
  std::size_t input_size() const { return input_side() * input_side(); }
  virtual std::size_t num_classes() const = 0;
  // Class logits followed by four box-regression outputs.
  std::size_t output_size() const { return num_classes() + 4; }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  const ParamBlock& block(const std::string& name) const;
  std::span<double> block_values(const std::string& name);

  // Re-draws all parameters: weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
  // biases zero, normalization gains one.
  void initialize(std::uint64_t seed);

  virtual void forward_sample(std::span<const double> input, ForwardCache& cache,
                              const DropoutContext* dropout) const = 0;

  // Accumulates into d_params; overwrites d_input unless it is empty.
  virtual void backward_sample(std::span<const double> input, const ForwardCache& cache,
                               std::span<const double> d_output, std::span<double> d_params,
                               std::span<double> d_input) const = 0;

  virtual std::vector<ProbeLayer> probe_layers() const = 0;
  virtual void probe_activations(const ForwardCache& cache, std::size_t layer,
                                 std::span<double> out) const = 0;
  // d(probe activation)/d(input) for one unit; overwrites d_input.
  virtual void probe_input_gradient(std::span<const double> input, const ForwardCache& cache,
                                    std::size_t layer, std::size_t neuron,
                                    std::span<double> d_input) const = 0;

 protected:
  std::size_t add_block(std::string name, std::size_t size, std::size_t fan_in, InitKind init);
  void finalize_blocks();

  std::vector<double> params_;
  std::vector<ParamBlock> blocks_;
};

struct CnnSpec {
  std::size_t input_side = 32;
  std::size_t conv1_channels = 4;
  std::size_t conv2_channels = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
};

struct VitSpec {
  std::size_t input_side = 32;
  std::size_t patch = 8;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t layers = 4;
  std::size_t mlp_ratio = 2;
};

std::unique_ptr<Model> make_cnn(const CnnSpec& spec, std::size_t num_classes, std::uint64_t seed);
std::unique_ptr<Model> make_vit(const VitSpec& spec, std::size_t num_classes, std::uint64_t seed);
// Rebuilds an uninitialized model from architecture() output.
std::unique_ptr<Model> make_model(const nlohmann::json& architecture);

}  // namespace biaslens
