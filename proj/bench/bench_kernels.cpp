// Serial reference kernels against their OpenMP counterparts, plus a batch
// forward/backward under both execution policies.
#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "biaslens/batch.hpp"
#include "biaslens/common.hpp"
#include "biaslens/kernels.hpp"
#include "biaslens/model.hpp"

namespace {

using namespace biaslens;

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = standard_normal(rng);
  return v;
}

template <auto Kernel>
void BM_matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_values(n * n, 1), b = random_values(n * n, 2);
  std::vector<double> c(n * n);
  kernels::set_num_jobs(omp_get_num_procs());
  for (auto _ : state) {
    Kernel(a.data(), b.data(), c.data(), n, n, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n * n * n));
}
BENCHMARK(BM_matmul<kernels::serial::matmul>)->Name("matmul/serial")->Arg(32)->Arg(128);
BENCHMARK(BM_matmul<kernels::omp::matmul>)->Name("matmul/omp")->Arg(32)->Arg(128);

template <auto Kernel>
void BM_conv(benchmark::State& state) {
  kernels::ConvShape s{4, 8, static_cast<std::size_t>(state.range(0)), 3, 1};
  const auto in = random_values(s.in_channels * s.side * s.side, 3);
  const auto w = random_values(s.out_channels * s.in_channels * s.kernel * s.kernel, 4);
  const std::vector<double> bias(s.out_channels, 0.1);
  std::vector<double> out(s.out_channels * s.out_side() * s.out_side());
  kernels::set_num_jobs(omp_get_num_procs());
  for (auto _ : state) {
    Kernel(s, in.data(), w.data(), bias.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_conv<kernels::serial::conv2d_forward>)->Name("conv2d/serial")->Arg(32)->Arg(64);
BENCHMARK(BM_conv<kernels::omp::conv2d_forward>)->Name("conv2d/omp")->Arg(32)->Arg(64);

void BM_train_step(benchmark::State& state, ModelKind kind, ExecPolicy policy) {
  kernels::set_num_jobs(policy == ExecPolicy::Parallel ? omp_get_num_procs() : 1);
  auto model = kind == ModelKind::TinyViT ? make_vit({}, 3, 7) : make_cnn({}, 3, 7);
  const std::size_t n = 32, side = model->input_side();
  Tensor batch({n, 1, side, side}, random_values(n * side * side, 5));
  Tensor grad({n, model->output_size()}, random_values(n * model->output_size(), 6));
  ForwardOptions opts;
  opts.policy = policy;
  for (auto _ : state) {
    const auto fwd = forward(*model, batch, opts);
    auto g = backward(*model, batch, fwd, grad, policy);
    benchmark::DoNotOptimize(g.params.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<long>(n));
}
BENCHMARK_CAPTURE(BM_train_step, cnn_serial, ModelKind::TinyCNN, ExecPolicy::Serial);
BENCHMARK_CAPTURE(BM_train_step, cnn_parallel, ModelKind::TinyCNN, ExecPolicy::Parallel);
BENCHMARK_CAPTURE(BM_train_step, vit_serial, ModelKind::TinyViT, ExecPolicy::Serial);
BENCHMARK_CAPTURE(BM_train_step, vit_parallel, ModelKind::TinyViT, ExecPolicy::Parallel);

}  // namespace

BENCHMARK_MAIN();
