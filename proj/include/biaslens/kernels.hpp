#pragma once

#include <cstddef>

// Dense numeric kernels. Every kernel has a serial reference in
// kernels::serial and an OpenMP version in kernels::omp with the same
// signature. The OpenMP versions partition independent outputs only, so
// both produce bit-identical results for any thread count.
//
// Matrices are row-major; dimensions are given as (rows, cols).
namespace biaslens::kernels {

// Conv geometry for a single image: in_c x side x side input, square kernel,
// zero padding kernel/2.
struct ConvShape {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t side = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;

  std::size_t pad() const { return kernel / 2; }
  std::size_t out_side() const { return (side + 2 * pad() - kernel) / stride + 1; }
};

namespace serial {

// C = A(m x k) * B(k x n), or C += when accumulate.
void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false);
// C = A(m x k) * B(n x k)^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate = false);
// C(k x n) += A(m x k)^T * B(m x n)
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);

// Numerically stable in-place row softmax.
void softmax_rows(double* x, std::size_t rows, std::size_t cols);

void conv2d_forward(const ConvShape& s, const double* input, const double* weights, const double* bias,
                    double* output);
// Accumulates weight/bias gradients; overwrites d_input when non-null.
void conv2d_backward(const ConvShape& s, const double* input, const double* weights, const double* d_output,
                     double* d_weights, double* d_bias, double* d_input);

// out[j] = sum_i rows[i][j] using a fixed pairwise tree over i.
// `rows` is clobbered.
void reduce_rows(double* rows, std::size_t n_rows, std::size_t n_cols, double* out);

}  // namespace serial

namespace omp {

void matmul(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate = false);
void matmul_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n);
void softmax_rows(double* x, std::size_t rows, std::size_t cols);
void conv2d_forward(const ConvShape& s, const double* input, const double* weights, const double* bias,
                    double* output);
void conv2d_backward(const ConvShape& s, const double* input, const double* weights, const double* d_output,
                     double* d_weights, double* d_bias, double* d_input);
void reduce_rows(double* rows, std::size_t n_rows, std::size_t n_cols, double* out);

}  // namespace omp

// Thread count used by the parallel paths; 1 selects the serial paths.
void set_num_jobs(int jobs);
int num_jobs();

}  // namespace biaslens::kernels
