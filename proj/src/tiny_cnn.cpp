#include "biaslens/tiny_cnn.hpp"

#include <algorithm>

#include "biaslens/common.hpp"

namespace biaslens {
namespace {

enum Slot : std::size_t { kPre1, kRelu1, kPool1, kPre2, kRelu2, kPool2, kMask, kFeatures, kSlotCount };

void avg_pool2(const double* in, std::size_t channels, std::size_t side, double* out) {
  const std::size_t os = side / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* src = in + c * side * side;
    double* dst = out + c * os * os;
    for (std::size_t y = 0; y < os; ++y) {
      for (std::size_t x = 0; x < os; ++x) {
        const std::size_t i = 2 * y * side + 2 * x;
        dst[y * os + x] = 0.25 * (src[i] + src[i + 1] + src[i + side] + src[i + side + 1]);
      }
    }
  }
}

void avg_pool2_backward(const double* d_out, std::size_t channels, std::size_t side, double* d_in) {
  const std::size_t os = side / 2;
  for (std::size_t c = 0; c < channels; ++c) {
    const double* g = d_out + c * os * os;
    double* dst = d_in + c * side * side;
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) dst[y * side + x] = 0.25 * g[(y / 2) * os + x / 2];
    }
  }
}

}  // namespace

TinyCNN::TinyCNN(const CnnSpec& spec, std::size_t num_classes) : spec_(spec), num_classes_(num_classes) {
  if (num_classes < 2) throw ValidationError("TinyCNN needs at least 2 classes");
  if (spec.kernel == 0 || spec.kernel % 2 == 0) throw ValidationError("TinyCNN kernel must be odd");
  if (spec.stride == 0) throw ValidationError("TinyCNN stride must be positive");
  conv1_ = {1, spec.conv1_channels, spec.input_side, spec.kernel, spec.stride};
  if (conv1_.out_side() % 2 != 0) throw ValidationError("TinyCNN conv1 output side must be even");
  pool1_side_ = conv1_.out_side() / 2;
  conv2_ = {spec.conv1_channels, spec.conv2_channels, pool1_side_, spec.kernel, spec.stride};
  if (conv2_.out_side() % 2 != 0 || conv2_.out_side() < 2) {
    throw ValidationError("TinyCNN conv2 output side must be even");
  }
  pool2_side_ = conv2_.out_side() / 2;

  const std::size_t k2 = spec.kernel * spec.kernel;
  w1_ = add_block("conv1.weight", spec.conv1_channels * k2, k2, InitKind::FanInUniform);
  b1_ = add_block("conv1.bias", spec.conv1_channels, 1, InitKind::Zero);
  w2_ = add_block("conv2.weight", spec.conv2_channels * spec.conv1_channels * k2, spec.conv1_channels * k2,
                  InitKind::FanInUniform);
  b2_ = add_block("conv2.bias", spec.conv2_channels, 1, InitKind::Zero);
  wd_ = add_block("head.weight", output_size() * feature_size(), feature_size(), InitKind::FanInUniform);
  bd_ = add_block("head.bias", output_size(), 1, InitKind::Zero);
  finalize_blocks();
}

std::size_t TinyCNN::feature_size() const { return spec_.conv2_channels * pool2_side_ * pool2_side_; }

nlohmann::json TinyCNN::architecture() const {
  return {{"kind", "tiny_cnn"},
          {"num_classes", num_classes_},
          {"input_side", spec_.input_side},
          {"conv1_channels", spec_.conv1_channels},
          {"conv2_channels", spec_.conv2_channels},
          {"kernel", spec_.kernel},
          {"stride", spec_.stride}};
}

void TinyCNN::forward_sample(std::span<const double> input, ForwardCache& cache,
                             const DropoutContext* dropout) const {
  const double* p = params_.data();
  const std::size_t s1 = conv1_.out_side();
  const std::size_t s2 = conv2_.out_side();
  auto& slots = cache.slots;
  slots.resize(kSlotCount);
  slots[kPre1].resize(conv1_.out_channels * s1 * s1);
  slots[kRelu1].resize(slots[kPre1].size());
  slots[kPool1].resize(conv1_.out_channels * pool1_side_ * pool1_side_);
  slots[kPre2].resize(conv2_.out_channels * s2 * s2);
  slots[kRelu2].resize(slots[kPre2].size());
  slots[kPool2].resize(feature_size());

  kernels::serial::conv2d_forward(conv1_, input.data(), p + w1_, p + b1_, slots[kPre1].data());
  std::transform(slots[kPre1].begin(), slots[kPre1].end(), slots[kRelu1].begin(),
                 [](double v) { return v > 0.0 ? v : 0.0; });
  avg_pool2(slots[kRelu1].data(), conv1_.out_channels, s1, slots[kPool1].data());
  kernels::serial::conv2d_forward(conv2_, slots[kPool1].data(), p + w2_, p + b2_, slots[kPre2].data());
  std::transform(slots[kPre2].begin(), slots[kPre2].end(), slots[kRelu2].begin(),
                 [](double v) { return v > 0.0 ? v : 0.0; });
  avg_pool2(slots[kRelu2].data(), conv2_.out_channels, s2, slots[kPool2].data());

  const std::size_t f = feature_size();
  slots[kFeatures] = slots[kPool2];
  if (dropout != nullptr && dropout->rate > 0.0) {
    Rng rng(dropout->seed);
    const double keep = 1.0 - dropout->rate;
    slots[kMask].resize(f);
    for (std::size_t i = 0; i < f; ++i) {
      slots[kMask][i] = uniform_unit(rng) < dropout->rate ? 0.0 : 1.0 / keep;
      slots[kFeatures][i] *= slots[kMask][i];
    }
  } else {
    slots[kMask].clear();
  }

  cache.output.assign(output_size(), 0.0);
  kernels::serial::matmul_nt(slots[kFeatures].data(), p + wd_, cache.output.data(), 1, f, output_size());
  for (std::size_t o = 0; o < output_size(); ++o) cache.output[o] += p[bd_ + o];
  cache.filled = true;
}

void TinyCNN::backward_from_stage(std::span<const double> input, const ForwardCache& cache, int stage,
                                  std::vector<double> d_relu, double* d_params,
                                  std::span<double> d_input) const {
  const double* p = params_.data();
  const auto& slots = cache.slots;
  std::vector<double> scratch_w;
  std::vector<double> scratch_b;
  // Probe gradients need no parameter gradients; route them to scratch.
  double* dw2 = d_params ? d_params + w2_ : nullptr;
  double* db2 = d_params ? d_params + b2_ : nullptr;
  double* dw1 = d_params ? d_params + w1_ : nullptr;
  double* db1 = d_params ? d_params + b1_ : nullptr;
  if (d_params == nullptr) {
    scratch_w.assign(std::max(block("conv2.weight").size, block("conv1.weight").size), 0.0);
    scratch_b.assign(std::max(conv1_.out_channels, conv2_.out_channels), 0.0);
    dw2 = dw1 = scratch_w.data();
    db2 = db1 = scratch_b.data();
  }

  if (stage == 2) {
    for (std::size_t i = 0; i < d_relu.size(); ++i) {
      if (slots[kPre2][i] <= 0.0) d_relu[i] = 0.0;
    }
    std::vector<double> d_pool1(slots[kPool1].size());
    kernels::serial::conv2d_backward(conv2_, slots[kPool1].data(), p + w2_, d_relu.data(), dw2, db2,
                                     d_pool1.data());
    d_relu.assign(slots[kRelu1].size(), 0.0);
    avg_pool2_backward(d_pool1.data(), conv1_.out_channels, conv1_.out_side(), d_relu.data());
  }
  for (std::size_t i = 0; i < d_relu.size(); ++i) {
    if (slots[kPre1][i] <= 0.0) d_relu[i] = 0.0;
  }
  kernels::serial::conv2d_backward(conv1_, input.data(), p + w1_, d_relu.data(), dw1, db1,
                                   d_input.empty() ? nullptr : d_input.data());
}

void TinyCNN::backward_sample(std::span<const double> input, const ForwardCache& cache,
                              std::span<const double> d_output, std::span<double> d_params,
                              std::span<double> d_input) const {
  if (!cache.filled) throw ValidationError("TinyCNN backward: forward cache is missing");
  const double* p = params_.data();
  const auto& slots = cache.slots;
  const std::size_t f = feature_size();
  const std::size_t o = output_size();

  double* dwd = d_params.data() + wd_;
  for (std::size_t r = 0; r < o; ++r) {
    const double g = d_output[r];
    d_params[bd_ + r] += g;
    if (g == 0.0) continue;
    double* row = dwd + r * f;
    for (std::size_t i = 0; i < f; ++i) row[i] += g * slots[kFeatures][i];
  }
  std::vector<double> d_feat(f, 0.0);
  kernels::serial::matmul(d_output.data(), p + wd_, d_feat.data(), 1, o, f);
  if (!slots[kMask].empty()) {
    for (std::size_t i = 0; i < f; ++i) d_feat[i] *= slots[kMask][i];
  }
  std::vector<double> d_relu2(slots[kRelu2].size(), 0.0);
  avg_pool2_backward(d_feat.data(), conv2_.out_channels, conv2_.out_side(), d_relu2.data());
  backward_from_stage(input, cache, 2, std::move(d_relu2), d_params.data(), d_input);
}

std::vector<ProbeLayer> TinyCNN::probe_layers() const {
  return {{"conv1", conv1_.out_channels}, {"conv2", conv2_.out_channels}};
}

void TinyCNN::probe_activations(const ForwardCache& cache, std::size_t layer, std::span<double> out) const {
  const auto& relu = cache.slots.at(layer == 0 ? kRelu1 : kRelu2);
  const std::size_t channels = layer == 0 ? conv1_.out_channels : conv2_.out_channels;
  const std::size_t area = relu.size() / channels;
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < area; ++i) s += relu[c * area + i];
    out[c] = s / static_cast<double>(area);
  }
}

void TinyCNN::probe_input_gradient(std::span<const double> input, const ForwardCache& cache, std::size_t layer,
                                   std::size_t neuron, std::span<double> d_input) const {
  if (!cache.filled) throw ValidationError("TinyCNN probe: forward cache is missing");
  if (layer > 1) throw std::out_of_range("TinyCNN has two probe layers");
  const auto& relu = cache.slots[layer == 0 ? kRelu1 : kRelu2];
  const std::size_t channels = layer == 0 ? conv1_.out_channels : conv2_.out_channels;
  const std::size_t area = relu.size() / channels;
  std::vector<double> seed(relu.size(), 0.0);
  std::fill(seed.begin() + static_cast<std::ptrdiff_t>(neuron * area),
            seed.begin() + static_cast<std::ptrdiff_t>((neuron + 1) * area), 1.0 / static_cast<double>(area));
  backward_from_stage(input, cache, layer == 0 ? 1 : 2, std::move(seed), nullptr, d_input);
}

}  // namespace biaslens
