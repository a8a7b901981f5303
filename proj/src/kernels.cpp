#include "biaslens/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>

namespace biaslens::kernels {
namespace {

// Each kernel body is written once; the parallel instantiation only adds the
// work-sharing clause over independent outputs.

template <bool Parallel>
void matmul_impl(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                 bool accumulate) {
#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <bool Parallel>
void matmul_nt_impl(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                    bool accumulate) {
#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t ii = 0; ii < static_cast<std::int64_t>(m); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <bool Parallel>
void matmul_tn_acc_impl(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                        std::size_t n) {
#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t pp = 0; pp < static_cast<std::int64_t>(k); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    double* crow = c + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <bool Parallel>
void softmax_rows_impl(double* x, std::size_t rows, std::size_t cols) {
#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t rr = 0; rr < static_cast<std::int64_t>(rows); ++rr) {
    double* row = x + static_cast<std::size_t>(rr) * cols;
    const double mx = *std::max_element(row, row + cols);
    double sum = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

// Output positions o in [lo, hi) whose input index o * stride + k - pad lies
// inside [0, side).
struct Span1 {
  std::size_t lo = 0, hi = 0;
};

Span1 valid_outputs(const ConvShape& s, std::size_t k) {
  const auto pad = static_cast<std::int64_t>(s.pad());
  const auto stride = static_cast<std::int64_t>(s.stride);
  const auto side = static_cast<std::int64_t>(s.side);
  const auto kk = static_cast<std::int64_t>(k);
  const std::int64_t lo = kk >= pad ? 0 : (pad - kk + stride - 1) / stride;
  const std::int64_t last = side - 1 + pad - kk;
  std::int64_t hi = last < 0 ? 0 : last / stride + 1;
  hi = std::min<std::int64_t>(hi, static_cast<std::int64_t>(s.out_side()));
  if (hi < lo) hi = lo;
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <bool Parallel>
void conv2d_forward_impl(const ConvShape& s, const double* input, const double* weights, const double* bias,
                         double* output) {
  const std::size_t os = s.out_side();
  const std::size_t ks = s.kernel;
  const std::size_t st = s.stride;
  const std::size_t pad = s.pad();
#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t occ = 0; occ < static_cast<std::int64_t>(s.out_channels); ++occ) {
    const auto oc = static_cast<std::size_t>(occ);
    double* out = output + oc * os * os;
    std::fill(out, out + os * os, bias[oc]);
    // Per output the terms are added in (ic, ky, kx) order.
    for (std::size_t ic = 0; ic < s.in_channels; ++ic) {
      const double* in = input + ic * s.side * s.side;
      const double* w = weights + (oc * s.in_channels + ic) * ks * ks;
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const auto ys = valid_outputs(s, ky);
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const auto xs = valid_outputs(s, kx);
          const double wv = w[ky * ks + kx];
          for (std::size_t oy = ys.lo; oy < ys.hi; ++oy) {
            const double* src = in + (oy * st + ky - pad) * s.side;
            double* dst = out + oy * os;
            if (st == 1) {
              const auto off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
              for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) dst[ox] += wv * src[static_cast<std::ptrdiff_t>(ox) + off];
            } else {
              for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) dst[ox] += wv * src[ox * st + kx - pad];
            }
          }
        }
      }
    }
  }
}

template <bool Parallel>
void conv2d_backward_impl(const ConvShape& s, const double* input, const double* weights,
                          const double* d_output, double* d_weights, double* d_bias, double* d_input) {
  const std::size_t os = s.out_side();
  const std::size_t ks = s.kernel;
  const std::size_t st = s.stride;
  const std::size_t pad = s.pad();

#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t occ = 0; occ < static_cast<std::int64_t>(s.out_channels); ++occ) {
    const auto oc = static_cast<std::size_t>(occ);
    const double* g = d_output + oc * os * os;
    double db = 0.0;
    for (std::size_t i = 0; i < os * os; ++i) db += g[i];
    d_bias[oc] += db;
    for (std::size_t ic = 0; ic < s.in_channels; ++ic) {
      const double* in = input + ic * s.side * s.side;
      double* dw = d_weights + (oc * s.in_channels + ic) * ks * ks;
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const auto ys = valid_outputs(s, ky);
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const auto xs = valid_outputs(s, kx);
          double acc = 0.0;
          for (std::size_t oy = ys.lo; oy < ys.hi; ++oy) {
            const double* src = in + (oy * st + ky - pad) * s.side;
            const double* gr = g + oy * os;
            for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) acc += gr[ox] * src[ox * st + kx - pad];
          }
          dw[ky * ks + kx] += acc;
        }
      }
    }
  }

  if (d_input == nullptr) return;
#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t icc = 0; icc < static_cast<std::int64_t>(s.in_channels); ++icc) {
    const auto ic = static_cast<std::size_t>(icc);
    double* din = d_input + ic * s.side * s.side;
    std::fill(din, din + s.side * s.side, 0.0);
    for (std::size_t oc = 0; oc < s.out_channels; ++oc) {
      const double* g = d_output + oc * os * os;
      const double* w = weights + (oc * s.in_channels + ic) * ks * ks;
      for (std::size_t ky = 0; ky < ks; ++ky) {
        const auto ys = valid_outputs(s, ky);
        for (std::size_t kx = 0; kx < ks; ++kx) {
          const auto xs = valid_outputs(s, kx);
          const double wv = w[ky * ks + kx];
          for (std::size_t oy = ys.lo; oy < ys.hi; ++oy) {
            double* dst = din + (oy * st + ky - pad) * s.side;
            const double* gr = g + oy * os;
            if (st == 1) {
              const auto off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
              for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) dst[static_cast<std::ptrdiff_t>(ox) + off] += wv * gr[ox];
            } else {
              for (std::size_t ox = xs.lo; ox < xs.hi; ++ox) dst[ox * st + kx - pad] += wv * gr[ox];
            }
          }
        }
      }
    }
  }
}

constexpr std::size_t kReduceChunk = 256;

template <bool Parallel>
void reduce_rows_impl(double* rows, std::size_t n_rows, std::size_t n_cols, double* out) {
  if (n_rows == 0) {
    std::fill(out, out + n_cols, 0.0);
    return;
  }
  const std::size_t n_chunks = (n_cols + kReduceChunk - 1) / kReduceChunk;
#pragma omp parallel for if (Parallel) schedule(static)
  for (std::int64_t cc = 0; cc < static_cast<std::int64_t>(n_chunks); ++cc) {
    const std::size_t lo = static_cast<std::size_t>(cc) * kReduceChunk;
    const std::size_t hi = std::min(n_cols, lo + kReduceChunk);
    for (std::size_t stride = 1; stride < n_rows; stride *= 2) {
      for (std::size_t i = 0; i + stride < n_rows; i += 2 * stride) {
        double* dst = rows + i * n_cols;
        const double* src = rows + (i + stride) * n_cols;
        for (std::size_t j = lo; j < hi; ++j) dst[j] += src[j];
      }
    }
    std::copy(rows + lo, rows + hi, out + lo);
  }
}

std::atomic<int> g_jobs{1};

}  // namespace

namespace serial {
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate) {
  matmul_impl<false>(a, b, c, m, k, n, accumulate);
}
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate) {
  matmul_nt_impl<false>(a, b, c, m, k, n, accumulate);
}
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  matmul_tn_acc_impl<false>(a, b, c, m, k, n);
}
void softmax_rows(double* x, std::size_t rows, std::size_t cols) { softmax_rows_impl<false>(x, rows, cols); }
void conv2d_forward(const ConvShape& s, const double* input, const double* weights, const double* bias,
                    double* output) {
  conv2d_forward_impl<false>(s, input, weights, bias, output);
}
void conv2d_backward(const ConvShape& s, const double* input, const double* weights, const double* d_output,
                     double* d_weights, double* d_bias, double* d_input) {
  conv2d_backward_impl<false>(s, input, weights, d_output, d_weights, d_bias, d_input);
}
void reduce_rows(double* rows, std::size_t n_rows, std::size_t n_cols, double* out) {
  reduce_rows_impl<false>(rows, n_rows, n_cols, out);
}
}  // namespace serial

namespace omp {
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate) {
  matmul_impl<true>(a, b, c, m, k, n, accumulate);
}
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate) {
  matmul_nt_impl<true>(a, b, c, m, k, n, accumulate);
}
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  matmul_tn_acc_impl<true>(a, b, c, m, k, n);
}
void softmax_rows(double* x, std::size_t rows, std::size_t cols) { softmax_rows_impl<true>(x, rows, cols); }
void conv2d_forward(const ConvShape& s, const double* input, const double* weights, const double* bias,
                    double* output) {
  conv2d_forward_impl<true>(s, input, weights, bias, output);
}
void conv2d_backward(const ConvShape& s, const double* input, const double* weights, const double* d_output,
                     double* d_weights, double* d_bias, double* d_input) {
  conv2d_backward_impl<true>(s, input, weights, d_output, d_weights, d_bias, d_input);
}
void reduce_rows(double* rows, std::size_t n_rows, std::size_t n_cols, double* out) {
  reduce_rows_impl<true>(rows, n_rows, n_cols, out);
}
}  // namespace omp

void set_num_jobs(int jobs) {
  g_jobs = std::max(1, jobs);
  omp_set_num_threads(g_jobs);
}

int num_jobs() { return g_jobs; }

}  // namespace biaslens::kernels
