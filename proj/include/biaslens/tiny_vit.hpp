#pragma once

#include "biaslens/model.hpp"

namespace biaslens {

// Pre-norm vision transformer with a class token:
//   tokens = [cls; patches * W_embed + b] + pos
//   per block: h = x + drop(MHA(LN(x))),  y = h + drop(MLP(LN(h)))
//   output   = LN(y_cls) * W_head + b_head
// MLP is Linear -> ReLU -> Linear with hidden width mlp_ratio * dim.
class TinyViT final : public Model {
 public:
  TinyViT(const VitSpec& spec, std::size_t num_classes);

  ModelKind kind() const override { return ModelKind::TinyViT; }
  nlohmann::json architecture() const override;
  std::unique_ptr<Model> clone() const override { return std::make_unique<TinyViT>(*this); }
  std::size_t input_side() const override { return spec_.input_side; }
  std::size_t num_classes() const override { return num_classes_; }

  const VitSpec& spec() const { return spec_; }
  std::size_t grid() const { return spec_.input_side / spec_.patch; }
  std::size_t num_patches() const { return grid() * grid(); }
  // Token 0 is the class token; token 1 + r*grid + c is patch (r, c).
  std::size_t num_tokens() const { return num_patches() + 1; }
  std::size_t head_dim() const { return spec_.dim / spec_.heads; }

  void forward_sample(std::span<const double> input, ForwardCache& cache,
                      const DropoutContext* dropout) const override;
  void backward_sample(std::span<const double> input, const ForwardCache& cache,
                       std::span<const double> d_output, std::span<double> d_params,
                       std::span<double> d_input) const override;

  std::vector<ProbeLayer> probe_layers() const override;
  void probe_activations(const ForwardCache& cache, std::size_t layer, std::span<double> out) const override;
  void probe_input_gradient(std::span<const double> input, const ForwardCache& cache, std::size_t layer,
                            std::size_t neuron, std::span<double> d_input) const override;

  // Attention weights of one block: heads x tokens x tokens, rows sum to 1.
  std::span<const double> attention(const ForwardCache& cache, std::size_t layer) const;

 private:
  struct BlockOffsets {
    std::size_t ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };

  std::size_t slot(std::size_t layer, std::size_t which) const;
  void embed_backward(std::span<const double> input, std::span<const double> d_tokens, double* d_params,
                      std::span<double> d_input) const;
  // Backprop through the attention half of `layer` given dL/dh; returns dL/dx.
  std::vector<double> attention_half_backward(const ForwardCache& cache, std::size_t layer,
                                              std::vector<double> d_h, double* d_params) const;
  std::vector<double> mlp_half_backward(const ForwardCache& cache, std::size_t layer, std::vector<double> d_y,
                                        double* d_params) const;
  // From dL/d(post-ReLU hidden) back through LN2; residual path excluded.
  std::vector<double> mlp_hidden_backward(const ForwardCache& cache, std::size_t layer,
                                          std::vector<double> d_hidden, double* d_params) const;
  std::vector<double> blocks_backward(const ForwardCache& cache, std::size_t top_layer,
                                      std::vector<double> d_x, double* d_params) const;

  VitSpec spec_;
  std::size_t num_classes_;
  std::size_t hidden_;
  std::size_t we_, be_, cls_, pos_;
  std::vector<BlockOffsets> layer_offsets_;
  std::size_t lnf_g_, lnf_b_, wh_, bh_;
};

}  // namespace biaslens
