#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "biaslens/model.hpp"
#include "biaslens/tensor.hpp"

namespace biaslens {

// Serial keeps the reference loop; Parallel distributes samples over OpenMP
// threads. Both give bit-identical results: every per-sample computation is
// independent and reductions use a fixed pairwise tree.
enum class ExecPolicy { Serial, Parallel };

// Parallel when kernels::num_jobs() > 1.
ExecPolicy default_policy();

struct ForwardOptions {
  // Training-mode dropout; sample i uses seed mix_seed(dropout_seed, i).
  std::optional<double> dropout_rate;
  std::uint64_t dropout_seed = 0;
  bool keep_caches = true;
  ExecPolicy policy = default_policy();
};

struct ForwardBatch {
  Tensor logits;         // N x K
  Tensor probabilities;  // N x K, softmax(logits)
  Tensor boxes;          // N x 4, raw box-regression outputs
  std::vector<ForwardCache> caches;
};

struct Gradients {
  std::vector<double> params;
  Tensor input;  // same shape as the batch
};

// batch: N x 1 x S x S (or N x S x S).
ForwardBatch forward(const Model& model, const Tensor& batch, const ForwardOptions& options = {});

// output_grad: N x (K + 4), dL/d(logits, box outputs). Parameter gradients
// are summed over the batch. Gradients::input stays empty unless with_input.
Gradients backward(const Model& model, const Tensor& batch, const ForwardBatch& fwd, const Tensor& output_grad,
                   ExecPolicy policy = default_policy(), bool with_input = true);

// Throws ValidationError naming expected and actual shapes on mismatch.
void check_batch_shape(const Model& model, const Tensor& batch);

void softmax_row(std::span<const double> logits, std::span<double> probs);

}  // namespace biaslens
