#include "biaslens/model.hpp"

#include <cmath>

#include "biaslens/common.hpp"
#include "biaslens/tiny_cnn.hpp"
#include "biaslens/tiny_vit.hpp"

namespace biaslens {

std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::TinyCNN ? "tiny_cnn" : "tiny_vit";
}

ModelKind parse_model_kind(std::string_view text) {
  if (text == "tiny_cnn") return ModelKind::TinyCNN;
  if (text == "tiny_vit") return ModelKind::TinyViT;
  throw ValidationError("unknown model kind '" + std::string(text) + "' (expected tiny_cnn or tiny_vit)");
}

const ParamBlock& Model::block(const std::string& name) const {
  for (const auto& b : blocks_) {
    if (b.name == name) return b;
  }
  throw std::out_of_range("no parameter block named " + name);
}

std::span<double> Model::block_values(const std::string& name) {
  const auto& b = block(name);
  return parameters().subspan(b.offset, b.size);
}

std::size_t Model::add_block(std::string name, std::size_t size, std::size_t fan_in, InitKind init) {
  const std::size_t offset = blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size;
  blocks_.push_back({std::move(name), offset, size, fan_in, init});
  return offset;
}

void Model::finalize_blocks() {
  params_.assign(blocks_.empty() ? 0 : blocks_.back().offset + blocks_.back().size, 0.0);
}

void Model::initialize(std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& b : blocks_) {
    auto values = parameters().subspan(b.offset, b.size);
    switch (b.init) {
      case InitKind::Zero:
        std::fill(values.begin(), values.end(), 0.0);
        break;
      case InitKind::One:
        std::fill(values.begin(), values.end(), 1.0);
        break;
      case InitKind::FanInUniform: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(b.fan_in));
        for (double& v : values) v = (2.0 * uniform_unit(rng) - 1.0) * bound;
        break;
      }
    }
  }
}

std::unique_ptr<Model> make_cnn(const CnnSpec& spec, std::size_t num_classes, std::uint64_t seed) {
  auto m = std::make_unique<TinyCNN>(spec, num_classes);
  m->initialize(seed);
  return m;
}

std::unique_ptr<Model> make_vit(const VitSpec& spec, std::size_t num_classes, std::uint64_t seed) {
  auto m = std::make_unique<TinyViT>(spec, num_classes);
  m->initialize(seed);
  return m;
}

std::unique_ptr<Model> make_model(const nlohmann::json& arch) {
  const auto kind = parse_model_kind(arch.at("kind").get<std::string>());
  const auto classes = arch.at("num_classes").get<std::size_t>();
  if (kind == ModelKind::TinyCNN) {
    CnnSpec s;
    s.input_side = arch.at("input_side").get<std::size_t>();
    s.conv1_channels = arch.at("conv1_channels").get<std::size_t>();
    s.conv2_channels = arch.at("conv2_channels").get<std::size_t>();
    s.kernel = arch.at("kernel").get<std::size_t>();
    s.stride = arch.at("stride").get<std::size_t>();
    return std::make_unique<TinyCNN>(s, classes);
  }
  VitSpec s;
  s.input_side = arch.at("input_side").get<std::size_t>();
  s.patch = arch.at("patch").get<std::size_t>();
  s.dim = arch.at("dim").get<std::size_t>();
  s.heads = arch.at("heads").get<std::size_t>();
  s.layers = arch.at("layers").get<std::size_t>();
  s.mlp_ratio = arch.at("mlp_ratio").get<std::size_t>();
  return std::make_unique<TinyViT>(s, classes);
}

}  // namespace biaslens
