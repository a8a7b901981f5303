#include "biaslens/tiny_vit.hpp"

#include <cmath>

#include "biaslens/common.hpp"
#include "biaslens/kernels.hpp"

namespace biaslens {
namespace {

namespace k = kernels::serial;

constexpr double kLayerNormEps = 1e-5;

// Per-block cache slots.
enum BlockSlot : std::size_t {
  kX,
  kZ1Hat,
  kRstd1,
  kZ1,
  kQ,
  kK,
  kV,
  kAttn,
  kO,
  kMask1,
  kH,
  kZ2Hat,
  kRstd2,
  kZ2,
  kU,
  kR,
  kMask2,
  kBlockSlots
};

// Slots after the last block.
enum FinalSlot : std::size_t { kFinalY, kFinalHat, kFinalRstd, kFinalZ, kFinalSlots };

void layer_norm(const double* x, std::size_t rows, std::size_t d, const double* gamma, const double* beta,
                double* xhat, double* rstd, double* y) {
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x + t * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[t] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * r;
      xhat[t * d + j] = h;
      y[t * d + j] = gamma[j] * h + beta[j];
    }
  }
}

// Accumulates gamma/beta gradients when d_gamma is non-null; writes dx.
void layer_norm_backward(const double* xhat, const double* rstd, const double* gamma, const double* dy,
                         std::size_t rows, std::size_t d, double* d_gamma, double* d_beta, double* dx) {
  std::vector<double> dh(d);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xh = xhat + t * d;
    const double* g = dy + t * d;
    double mean_dh = 0.0;
    double mean_dh_xh = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (d_gamma) {
        d_gamma[j] += g[j] * xh[j];
        d_beta[j] += g[j];
      }
      dh[j] = g[j] * gamma[j];
      mean_dh += dh[j];
      mean_dh_xh += dh[j] * xh[j];
    }
    mean_dh /= static_cast<double>(d);
    mean_dh_xh /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) dx[t * d + j] = rstd[t] * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
  }
}

void add_bias_rows(double* y, const double* b, std::size_t rows, std::size_t n) {
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t j = 0; j < n; ++j) y[t * n + j] += b[j];
  }
}

void col_sum_acc(const double* dy, std::size_t rows, std::size_t n, double* db) {
  for (std::size_t t = 0; t < rows; ++t) {
    for (std::size_t j = 0; j < n; ++j) db[j] += dy[t * n + j];
  }
}

void draw_mask(Rng& rng, double rate, std::size_t n, std::vector<double>& mask) {
  mask.resize(n);
  const double scale = 1.0 / (1.0 - rate);
  for (double& m : mask) m = uniform_unit(rng) < rate ? 0.0 : scale;
}

}  // namespace

TinyViT::TinyViT(const VitSpec& spec, std::size_t num_classes)
    : spec_(spec), num_classes_(num_classes), hidden_(spec.mlp_ratio * spec.dim) {
  if (num_classes < 2) throw ValidationError("TinyViT needs at least 2 classes");
  if (spec.patch == 0 || spec.input_side % spec.patch != 0) {
    throw ValidationError("TinyViT patch size must divide the input side");
  }
  if (spec.heads == 0 || spec.dim % spec.heads != 0) {
    throw ValidationError("TinyViT embed dim must be divisible by the head count");
  }
  if (spec.layers == 0 || spec.mlp_ratio == 0) throw ValidationError("TinyViT needs at least one block");

  const std::size_t d = spec.dim;
  const std::size_t pd = spec.patch * spec.patch;
  we_ = add_block("embed.weight", pd * d, pd, InitKind::FanInUniform);
  be_ = add_block("embed.bias", d, 1, InitKind::Zero);
  cls_ = add_block("cls_token", d, d, InitKind::FanInUniform);
  pos_ = add_block("pos_embed", num_tokens() * d, d, InitKind::FanInUniform);
  for (std::size_t l = 0; l < spec.layers; ++l) {
    const std::string p = "block" + std::to_string(l) + ".";
    BlockOffsets o{};
    o.ln1_g = add_block(p + "ln1.gamma", d, 1, InitKind::One);
    o.ln1_b = add_block(p + "ln1.beta", d, 1, InitKind::Zero);
    o.wq = add_block(p + "attn.wq", d * d, d, InitKind::FanInUniform);
    o.bq = add_block(p + "attn.bq", d, 1, InitKind::Zero);
    o.wk = add_block(p + "attn.wk", d * d, d, InitKind::FanInUniform);
    o.bk = add_block(p + "attn.bk", d, 1, InitKind::Zero);
    o.wv = add_block(p + "attn.wv", d * d, d, InitKind::FanInUniform);
    o.bv = add_block(p + "attn.bv", d, 1, InitKind::Zero);
    o.wo = add_block(p + "attn.wo", d * d, d, InitKind::FanInUniform);
    o.bo = add_block(p + "attn.bo", d, 1, InitKind::Zero);
    o.ln2_g = add_block(p + "ln2.gamma", d, 1, InitKind::One);
    o.ln2_b = add_block(p + "ln2.beta", d, 1, InitKind::Zero);
    o.w1 = add_block(p + "mlp.w1", d * hidden_, d, InitKind::FanInUniform);
    o.b1 = add_block(p + "mlp.b1", hidden_, 1, InitKind::Zero);
    o.w2 = add_block(p + "mlp.w2", hidden_ * d, hidden_, InitKind::FanInUniform);
    o.b2 = add_block(p + "mlp.b2", d, 1, InitKind::Zero);
    layer_offsets_.push_back(o);
  }
  lnf_g_ = add_block("final_ln.gamma", d, 1, InitKind::One);
  lnf_b_ = add_block("final_ln.beta", d, 1, InitKind::Zero);
  wh_ = add_block("head.weight", d * output_size(), d, InitKind::FanInUniform);
  bh_ = add_block("head.bias", output_size(), 1, InitKind::Zero);
  finalize_blocks();
}

nlohmann::json TinyViT::architecture() const {
  return {{"kind", "tiny_vit"},     {"num_classes", num_classes_}, {"input_side", spec_.input_side},
          {"patch", spec_.patch},   {"dim", spec_.dim},            {"heads", spec_.heads},
          {"layers", spec_.layers}, {"mlp_ratio", spec_.mlp_ratio}};
}

std::size_t TinyViT::slot(std::size_t layer, std::size_t which) const { return layer * kBlockSlots + which; }

std::span<const double> TinyViT::attention(const ForwardCache& cache, std::size_t layer) const {
  if (!cache.filled) throw ValidationError("TinyViT: forward cache is missing");
  if (layer >= spec_.layers) throw std::out_of_range("TinyViT attention layer out of range");
  return cache.slots[slot(layer, kAttn)];
}

void TinyViT::forward_sample(std::span<const double> input, ForwardCache& cache,
                             const DropoutContext* dropout) const {
  const double* p = params_.data();
  const std::size_t d = spec_.dim;
  const std::size_t T = num_tokens();
  const std::size_t P = spec_.patch;
  const std::size_t S = spec_.input_side;
  const std::size_t G = grid();
  const std::size_t dk = head_dim();
  const std::size_t H = spec_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const bool use_dropout = dropout != nullptr && dropout->rate > 0.0;
  Rng rng(use_dropout ? dropout->seed : 0);

  auto& slots = cache.slots;
  slots.resize(spec_.layers * kBlockSlots + kFinalSlots);

  // Embedding.
  std::vector<double>& x0 = slots[slot(0, kX)];
  x0.assign(T * d, 0.0);
  std::vector<double> patch(P * P);
  for (std::size_t r = 0; r < G; ++r) {
    for (std::size_t c = 0; c < G; ++c) {
      for (std::size_t py = 0; py < P; ++py) {
        for (std::size_t px = 0; px < P; ++px) patch[py * P + px] = input[(r * P + py) * S + c * P + px];
      }
      double* tok = x0.data() + (1 + r * G + c) * d;
      k::matmul(patch.data(), p + we_, tok, 1, P * P, d);
      for (std::size_t j = 0; j < d; ++j) tok[j] += p[be_ + j];
    }
  }
  for (std::size_t j = 0; j < d; ++j) x0[j] = p[cls_ + j];
  for (std::size_t i = 0; i < T * d; ++i) x0[i] += p[pos_ + i];

  std::vector<double> qh(T * dk), kh(T * dk), vh(T * dk), oh(T * dk);
  for (std::size_t l = 0; l < spec_.layers; ++l) {
    const BlockOffsets& o = layer_offsets_[l];
    const std::vector<double>& x = slots[slot(l, kX)];
    auto buf = [&](BlockSlot s, std::size_t n) -> std::vector<double>& {
      auto& v = slots[slot(l, s)];
      v.assign(n, 0.0);
      return v;
    };
    auto& z1hat = buf(kZ1Hat, T * d);
    auto& rstd1 = buf(kRstd1, T);
    auto& z1 = buf(kZ1, T * d);
    layer_norm(x.data(), T, d, p + o.ln1_g, p + o.ln1_b, z1hat.data(), rstd1.data(), z1.data());
    auto& q = buf(kQ, T * d);
    auto& kk = buf(kK, T * d);
    auto& v = buf(kV, T * d);
    k::matmul(z1.data(), p + o.wq, q.data(), T, d, d);
    add_bias_rows(q.data(), p + o.bq, T, d);
    k::matmul(z1.data(), p + o.wk, kk.data(), T, d, d);
    add_bias_rows(kk.data(), p + o.bk, T, d);
    k::matmul(z1.data(), p + o.wv, v.data(), T, d, d);
    add_bias_rows(v.data(), p + o.bv, T, d);

    auto& attn = buf(kAttn, H * T * T);
    auto& concat = buf(kO, T * d);
    for (std::size_t h = 0; h < H; ++h) {
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < dk; ++j) {
          qh[t * dk + j] = q[t * d + h * dk + j];
          kh[t * dk + j] = kk[t * d + h * dk + j];
          vh[t * dk + j] = v[t * d + h * dk + j];
        }
      }
      double* a = attn.data() + h * T * T;
      k::matmul_nt(qh.data(), kh.data(), a, T, dk, T);
      for (std::size_t i = 0; i < T * T; ++i) a[i] *= scale;
      k::softmax_rows(a, T, T);
      k::matmul(a, vh.data(), oh.data(), T, T, dk);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t j = 0; j < dk; ++j) concat[t * d + h * dk + j] = oh[t * dk + j];
      }
    }

    auto& hres = buf(kH, T * d);
    k::matmul(concat.data(), p + o.wo, hres.data(), T, d, d);
    add_bias_rows(hres.data(), p + o.bo, T, d);
    auto& mask1 = slots[slot(l, kMask1)];
    if (use_dropout) {
      draw_mask(rng, dropout->rate, T * d, mask1);
      for (std::size_t i = 0; i < T * d; ++i) hres[i] *= mask1[i];
    } else {
      mask1.clear();
    }
    for (std::size_t i = 0; i < T * d; ++i) hres[i] += x[i];

    auto& z2hat = buf(kZ2Hat, T * d);
    auto& rstd2 = buf(kRstd2, T);
    auto& z2 = buf(kZ2, T * d);
    layer_norm(hres.data(), T, d, p + o.ln2_g, p + o.ln2_b, z2hat.data(), rstd2.data(), z2.data());
    auto& u = buf(kU, T * hidden_);
    k::matmul(z2.data(), p + o.w1, u.data(), T, d, hidden_);
    add_bias_rows(u.data(), p + o.b1, T, hidden_);
    auto& rl = buf(kR, T * hidden_);
    for (std::size_t i = 0; i < u.size(); ++i) rl[i] = u[i] > 0.0 ? u[i] : 0.0;

    const std::size_t next = l + 1 < spec_.layers ? slot(l + 1, kX) : spec_.layers * kBlockSlots + kFinalY;
    auto& y = slots[next];
    y.assign(T * d, 0.0);
    k::matmul(rl.data(), p + o.w2, y.data(), T, hidden_, d);
    add_bias_rows(y.data(), p + o.b2, T, d);
    auto& mask2 = slots[slot(l, kMask2)];
    if (use_dropout) {
      draw_mask(rng, dropout->rate, T * d, mask2);
      for (std::size_t i = 0; i < T * d; ++i) y[i] *= mask2[i];
    } else {
      mask2.clear();
    }
    for (std::size_t i = 0; i < T * d; ++i) y[i] += hres[i];
  }

  const std::size_t fb = spec_.layers * kBlockSlots;
  const auto& yf = slots[fb + kFinalY];
  slots[fb + kFinalHat].assign(d, 0.0);
  slots[fb + kFinalRstd].assign(1, 0.0);
  slots[fb + kFinalZ].assign(d, 0.0);
  layer_norm(yf.data(), 1, d, p + lnf_g_, p + lnf_b_, slots[fb + kFinalHat].data(), slots[fb + kFinalRstd].data(),
             slots[fb + kFinalZ].data());
  cache.output.assign(output_size(), 0.0);
  k::matmul(slots[fb + kFinalZ].data(), p + wh_, cache.output.data(), 1, d, output_size());
  for (std::size_t j = 0; j < output_size(); ++j) cache.output[j] += p[bh_ + j];
  cache.filled = true;
}

std::vector<double> TinyViT::mlp_half_backward(const ForwardCache& cache, std::size_t l, std::vector<double> d_y,
                                               double* dp) const {
  // y = h + drop(MLP(LN(h)))
  const double* p = params_.data();
  const BlockOffsets& o = layer_offsets_[l];
  const std::size_t d = spec_.dim;
  const std::size_t T = num_tokens();
  const auto& slots = cache.slots;

  std::vector<double> dm = d_y;
  const auto& mask2 = slots[slot(l, kMask2)];
  if (!mask2.empty()) {
    for (std::size_t i = 0; i < dm.size(); ++i) dm[i] *= mask2[i];
  }
  if (dp) {
    k::matmul_tn_acc(slots[slot(l, kR)].data(), dm.data(), dp + o.w2, T, hidden_, d);
    col_sum_acc(dm.data(), T, d, dp + o.b2);
  }
  std::vector<double> d_hidden(T * hidden_);
  k::matmul_nt(dm.data(), p + o.w2, d_hidden.data(), T, d, hidden_);

  std::vector<double> d_h = std::move(d_y);
  std::vector<double> ln_path = mlp_hidden_backward(cache, l, std::move(d_hidden), dp);
  for (std::size_t i = 0; i < d_h.size(); ++i) d_h[i] += ln_path[i];
  return d_h;
}

std::vector<double> TinyViT::mlp_hidden_backward(const ForwardCache& cache, std::size_t l,
                                                           std::vector<double> d_hidden, double* dp) const {
  const double* p = params_.data();
  const BlockOffsets& o = layer_offsets_[l];
  const std::size_t d = spec_.dim;
  const std::size_t T = num_tokens();
  const auto& slots = cache.slots;
  const auto& u = slots[slot(l, kU)];
  for (std::size_t i = 0; i < d_hidden.size(); ++i) {
    if (u[i] <= 0.0) d_hidden[i] = 0.0;
  }
  if (dp) {
    k::matmul_tn_acc(slots[slot(l, kZ2)].data(), d_hidden.data(), dp + o.w1, T, d, hidden_);
    col_sum_acc(d_hidden.data(), T, hidden_, dp + o.b1);
  }
  std::vector<double> dz2(T * d);
  k::matmul_nt(d_hidden.data(), p + o.w1, dz2.data(), T, hidden_, d);
  std::vector<double> dh(T * d);
  layer_norm_backward(slots[slot(l, kZ2Hat)].data(), slots[slot(l, kRstd2)].data(), p + o.ln2_g, dz2.data(), T, d,
                      dp ? dp + o.ln2_g : nullptr, dp ? dp + o.ln2_b : nullptr, dh.data());
  return dh;
}

std::vector<double> TinyViT::attention_half_backward(const ForwardCache& cache, std::size_t l,
                                                     std::vector<double> d_h, double* dp) const {
  const double* p = params_.data();
  const BlockOffsets& o = layer_offsets_[l];
  const std::size_t d = spec_.dim;
  const std::size_t T = num_tokens();
  const std::size_t H = spec_.heads;
  const std::size_t dk = head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  const auto& slots = cache.slots;

  std::vector<double> dproj = d_h;
  const auto& mask1 = slots[slot(l, kMask1)];
  if (!mask1.empty()) {
    for (std::size_t i = 0; i < dproj.size(); ++i) dproj[i] *= mask1[i];
  }
  if (dp) {
    k::matmul_tn_acc(slots[slot(l, kO)].data(), dproj.data(), dp + o.wo, T, d, d);
    col_sum_acc(dproj.data(), T, d, dp + o.bo);
  }
  std::vector<double> dconcat(T * d);
  k::matmul_nt(dproj.data(), p + o.wo, dconcat.data(), T, d, d);

  const auto& q = slots[slot(l, kQ)];
  const auto& kk = slots[slot(l, kK)];
  const auto& v = slots[slot(l, kV)];
  const auto& attn = slots[slot(l, kAttn)];
  std::vector<double> dq(T * d), dkk(T * d), dv(T * d);
  std::vector<double> qh(T * dk), kh(T * dk), vh(T * dk), doh(T * dk);
  std::vector<double> da(T * T), dqh(T * dk), dkh(T * dk), dvh(T * dk);
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < dk; ++j) {
        qh[t * dk + j] = q[t * d + h * dk + j];
        kh[t * dk + j] = kk[t * d + h * dk + j];
        vh[t * dk + j] = v[t * d + h * dk + j];
        doh[t * dk + j] = dconcat[t * d + h * dk + j];
      }
    }
    const double* a = attn.data() + h * T * T;
    k::matmul_nt(doh.data(), vh.data(), da.data(), T, dk, T);
    std::fill(dvh.begin(), dvh.end(), 0.0);
    k::matmul_tn_acc(a, doh.data(), dvh.data(), T, T, dk);
    for (std::size_t i = 0; i < T; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < T; ++j) dot += da[i * T + j] * a[i * T + j];
      for (std::size_t j = 0; j < T; ++j) da[i * T + j] = a[i * T + j] * (da[i * T + j] - dot) * scale;
    }
    k::matmul(da.data(), kh.data(), dqh.data(), T, T, dk);
    std::fill(dkh.begin(), dkh.end(), 0.0);
    k::matmul_tn_acc(da.data(), qh.data(), dkh.data(), T, T, dk);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t j = 0; j < dk; ++j) {
        dq[t * d + h * dk + j] = dqh[t * dk + j];
        dkk[t * d + h * dk + j] = dkh[t * dk + j];
        dv[t * d + h * dk + j] = dvh[t * dk + j];
      }
    }
  }

  const auto& z1 = slots[slot(l, kZ1)];
  if (dp) {
    k::matmul_tn_acc(z1.data(), dq.data(), dp + o.wq, T, d, d);
    col_sum_acc(dq.data(), T, d, dp + o.bq);
    k::matmul_tn_acc(z1.data(), dkk.data(), dp + o.wk, T, d, d);
    col_sum_acc(dkk.data(), T, d, dp + o.bk);
    k::matmul_tn_acc(z1.data(), dv.data(), dp + o.wv, T, d, d);
    col_sum_acc(dv.data(), T, d, dp + o.bv);
  }
  std::vector<double> dz1(T * d);
  k::matmul_nt(dq.data(), p + o.wq, dz1.data(), T, d, d);
  k::matmul_nt(dkk.data(), p + o.wk, dz1.data(), T, d, d, true);
  k::matmul_nt(dv.data(), p + o.wv, dz1.data(), T, d, d, true);
  std::vector<double> dx(T * d);
  layer_norm_backward(slots[slot(l, kZ1Hat)].data(), slots[slot(l, kRstd1)].data(), p + o.ln1_g, dz1.data(), T, d,
                      dp ? dp + o.ln1_g : nullptr, dp ? dp + o.ln1_b : nullptr, dx.data());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d_h[i];
  return dx;
}

std::vector<double> TinyViT::blocks_backward(const ForwardCache& cache, std::size_t top_layer,
                                             std::vector<double> d_x, double* dp) const {
  for (std::size_t l = top_layer; l-- > 0;) {
    d_x = mlp_half_backward(cache, l, std::move(d_x), dp);
    d_x = attention_half_backward(cache, l, std::move(d_x), dp);
  }
  return d_x;
}

void TinyViT::embed_backward(std::span<const double> input, std::span<const double> d_tokens, double* dp,
                             std::span<double> d_input) const {
  const double* p = params_.data();
  const std::size_t d = spec_.dim;
  const std::size_t P = spec_.patch;
  const std::size_t S = spec_.input_side;
  const std::size_t G = grid();
  const std::size_t T = num_tokens();
  if (dp) {
    for (std::size_t i = 0; i < T * d; ++i) dp[pos_ + i] += d_tokens[i];
    for (std::size_t j = 0; j < d; ++j) dp[cls_ + j] += d_tokens[j];
  }
  std::vector<double> patch(P * P);
  std::vector<double> dpatch(P * P);
  for (std::size_t r = 0; r < G; ++r) {
    for (std::size_t c = 0; c < G; ++c) {
      const double* dt = d_tokens.data() + (1 + r * G + c) * d;
      if (dp) {
        for (std::size_t py = 0; py < P; ++py) {
          for (std::size_t px = 0; px < P; ++px) patch[py * P + px] = input[(r * P + py) * S + c * P + px];
        }
        k::matmul_tn_acc(patch.data(), dt, dp + we_, 1, P * P, d);
        for (std::size_t j = 0; j < d; ++j) dp[be_ + j] += dt[j];
      }
      if (!d_input.empty()) {
        k::matmul_nt(dt, p + we_, dpatch.data(), 1, d, P * P);
        for (std::size_t py = 0; py < P; ++py) {
          for (std::size_t px = 0; px < P; ++px) d_input[(r * P + py) * S + c * P + px] = dpatch[py * P + px];
        }
      }
    }
  }
}

void TinyViT::backward_sample(std::span<const double> input, const ForwardCache& cache,
                              std::span<const double> d_output, std::span<double> d_params,
                              std::span<double> d_input) const {
  if (!cache.filled) throw ValidationError("TinyViT backward: forward cache is missing");
  const double* p = params_.data();
  double* dp = d_params.data();
  const std::size_t d = spec_.dim;
  const std::size_t T = num_tokens();
  const std::size_t fb = spec_.layers * kBlockSlots;
  const auto& slots = cache.slots;

  k::matmul_tn_acc(slots[fb + kFinalZ].data(), d_output.data(), dp + wh_, 1, d, output_size());
  for (std::size_t j = 0; j < output_size(); ++j) dp[bh_ + j] += d_output[j];
  std::vector<double> dz(d);
  k::matmul_nt(d_output.data(), p + wh_, dz.data(), 1, output_size(), d);
  std::vector<double> d_y(T * d, 0.0);
  layer_norm_backward(slots[fb + kFinalHat].data(), slots[fb + kFinalRstd].data(), p + lnf_g_, dz.data(), 1, d,
                      dp + lnf_g_, dp + lnf_b_, d_y.data());
  auto d_tokens = blocks_backward(cache, spec_.layers, std::move(d_y), dp);
  embed_backward(input, d_tokens, dp, d_input);
}

std::vector<ProbeLayer> TinyViT::probe_layers() const {
  std::vector<ProbeLayer> out;
  for (std::size_t l = 0; l < spec_.layers; ++l) out.push_back({"block" + std::to_string(l) + ".mlp", hidden_});
  return out;
}

void TinyViT::probe_activations(const ForwardCache& cache, std::size_t layer, std::span<double> out) const {
  const auto& rl = cache.slots.at(slot(layer, kR));
  const std::size_t T = num_tokens();
  for (std::size_t n = 0; n < hidden_; ++n) {
    double s = 0.0;
    for (std::size_t t = 0; t < T; ++t) s += rl[t * hidden_ + n];
    out[n] = s / static_cast<double>(T);
  }
}

void TinyViT::probe_input_gradient(std::span<const double> input, const ForwardCache& cache, std::size_t layer,
                                   std::size_t neuron, std::span<double> d_input) const {
  if (!cache.filled) throw ValidationError("TinyViT probe: forward cache is missing");
  if (layer >= spec_.layers) throw std::out_of_range("TinyViT probe layer out of range");
  const std::size_t T = num_tokens();
  std::vector<double> d_hidden(T * hidden_, 0.0);
  for (std::size_t t = 0; t < T; ++t) d_hidden[t * hidden_ + neuron] = 1.0 / static_cast<double>(T);
  auto d_h = mlp_hidden_backward(cache, layer, std::move(d_hidden), nullptr);
  auto d_x = attention_half_backward(cache, layer, std::move(d_h), nullptr);
  auto d_tokens = blocks_backward(cache, layer, std::move(d_x), nullptr);
  embed_backward(input, d_tokens, nullptr, d_input);
}

}  // namespace biaslens
