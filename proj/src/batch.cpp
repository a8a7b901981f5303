#include "biaslens/batch.hpp"

#include <algorithm>
#include <cmath>

#include "biaslens/common.hpp"
#include "biaslens/kernels.hpp"

namespace biaslens {

ExecPolicy default_policy() {
  return kernels::num_jobs() > 1 ? ExecPolicy::Parallel : ExecPolicy::Serial;
}

void check_batch_shape(const Model& model, const Tensor& batch) {
  const std::size_t s = model.input_side();
  const auto& sh = batch.shape();
  const bool ok = (sh.size() == 4 && sh[1] == 1 && sh[2] == s && sh[3] == s) ||
                  (sh.size() == 3 && sh[1] == s && sh[2] == s);
  if (!ok) {
    throw ValidationError("input shape mismatch: expected [N, 1, " + std::to_string(s) + ", " +
                          std::to_string(s) + "], got " + shape_string(sh));
  }
}

void softmax_row(std::span<const double> logits, std::span<double> probs) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    probs[j] = std::exp(logits[j] - mx);
    sum += probs[j];
  }
  for (double& p : probs) p /= sum;
}

ForwardBatch forward(const Model& model, const Tensor& batch, const ForwardOptions& options) {
  check_batch_shape(model, batch);
  const std::size_t n = batch.dim(0);
  const std::size_t k = model.num_classes();
  ForwardBatch out{Tensor({n, k}), Tensor({n, k}), Tensor({n, 4}), {}};
  out.caches.resize(n);
  const bool parallel = options.policy == ExecPolicy::Parallel;

#pragma omp parallel for if (parallel) schedule(dynamic, 1)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    DropoutContext ctx;
    const DropoutContext* dropout = nullptr;
    if (options.dropout_rate && *options.dropout_rate > 0.0) {
      ctx = {*options.dropout_rate, mix_seed(options.dropout_seed, i)};
      dropout = &ctx;
    }
    ForwardCache& cache = out.caches[i];
    model.forward_sample(batch.row(i), cache, dropout);
    auto logits = out.logits.row(i);
    std::copy_n(cache.output.begin(), k, logits.begin());
    softmax_row(logits, out.probabilities.row(i));
    std::copy_n(cache.output.begin() + static_cast<std::ptrdiff_t>(k), 4, out.boxes.row(i).begin());
    if (!options.keep_caches) cache = ForwardCache{};
  }
  if (!options.keep_caches) out.caches.clear();
  return out;
}

Gradients backward(const Model& model, const Tensor& batch, const ForwardBatch& fwd, const Tensor& output_grad,
                   ExecPolicy policy, bool with_input) {
  check_batch_shape(model, batch);
  const std::size_t n = batch.dim(0);
  if (fwd.caches.size() != n) throw ValidationError("backward: forward caches are missing");
  if (output_grad.rank() != 2 || output_grad.dim(0) != n || output_grad.dim(1) != model.output_size()) {
    throw ValidationError("backward: output gradient shape mismatch: expected [" + std::to_string(n) + ", " +
                          std::to_string(model.output_size()) + "], got " + shape_string(output_grad.shape()));
  }
  const std::size_t np = model.parameters().size();
  std::vector<double> per_sample(n * np, 0.0);
  Gradients g{std::vector<double>(np, 0.0), with_input ? Tensor(batch.shape()) : Tensor()};
  const bool parallel = policy == ExecPolicy::Parallel;

#pragma omp parallel for if (parallel) schedule(dynamic, 1)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(n); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    std::span<double> dp(per_sample.data() + i * np, np);
    model.backward_sample(batch.row(i), fwd.caches[i], output_grad.row(i), dp,
                          with_input ? g.input.row(i) : std::span<double>());
  }

  if (parallel) {
    kernels::omp::reduce_rows(per_sample.data(), n, np, g.params.data());
  } else {
    kernels::serial::reduce_rows(per_sample.data(), n, np, g.params.data());
  }
  return g;
}

}  // namespace biaslens
