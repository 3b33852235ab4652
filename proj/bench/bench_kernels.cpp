// OpenMP kernels against the serial reference loops, at the shapes one
// training step of the default configuration produces.

#include <vector>

#include <benchmark/benchmark.h>

#include "cpsprompt/kernels.hpp"
#include "cpsprompt/rng.hpp"
#include "cpsprompt/tensor.hpp"

using namespace cpsp;
namespace k = cpsp::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

void set_rate(benchmark::State& state, double macs) {
  state.counters["MAC/s"] = benchmark::Counter(macs * static_cast<double>(state.iterations()), benchmark::Counter::kIsRate);
}

template <bool Omp>
void BM_matmul(benchmark::State& state) {
  const std::size_t m = state.range(0), kk = state.range(1), n = state.range(2);
  const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Omp) k::matmul(a.data(), b.data(), c.data(), m, kk, n);
    else k::reference::matmul(a.data(), b.data(), c.data(), m, kk, n);
    benchmark::DoNotOptimize(c.data());
  }
  set_rate(state, double(m) * kk * n);
}

template <bool Omp>
void BM_matmul_nt(benchmark::State& state) {
  const std::size_t m = state.range(0), n = state.range(1), kk = state.range(2);
  const auto a = random_vec(m * n, 3), b = random_vec(kk * n, 4);
  std::vector<double> c(m * kk);
  for (auto _ : state) {
    if constexpr (Omp) k::matmul_nt(a.data(), b.data(), c.data(), m, n, kk);
    else k::reference::matmul_nt(a.data(), b.data(), c.data(), m, n, kk);
    benchmark::DoNotOptimize(c.data());
  }
  set_rate(state, double(m) * kk * n);
}

template <bool Omp>
void BM_matmul_tn(benchmark::State& state) {
  const std::size_t m = state.range(0), kk = state.range(1), n = state.range(2);
  const auto a = random_vec(m * kk, 5), b = random_vec(m * n, 6);
  std::vector<double> c(kk * n);
  for (auto _ : state) {
    if constexpr (Omp) k::matmul_tn_acc(a.data(), b.data(), c.data(), m, kk, n);
    else k::reference::matmul_tn_acc(a.data(), b.data(), c.data(), m, kk, n);
    benchmark::DoNotOptimize(c.data());
  }
  set_rate(state, double(m) * kk * n);
}

k::AttentionDims dims(const benchmark::State& state) {
  // Queries are the tokens; keys add an 8-token prompt prefix.
  const std::size_t n = state.range(0);
  return {16, n, n + 8, 4, 32};
}

template <bool Omp>
void BM_attention_forward(benchmark::State& state) {
  const auto d = dims(state);
  const auto q = random_vec(d.batch * d.queries * d.dim, 7);
  const auto kv = random_vec(d.batch * d.keys * d.dim, 8), v = random_vec(d.batch * d.keys * d.dim, 9);
  std::vector<double> probs(d.batch * d.heads * d.queries * d.keys), out(d.batch * d.queries * d.dim);
  for (auto _ : state) {
    if constexpr (Omp) k::attention_forward(d, q.data(), kv.data(), v.data(), probs.data(), out.data());
    else k::reference::attention_forward(d, q.data(), kv.data(), v.data(), probs.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
  set_rate(state, 2.0 * d.batch * d.queries * d.keys * d.dim);
}

template <bool Omp>
void BM_attention_backward(benchmark::State& state) {
  const auto d = dims(state);
  const auto q = random_vec(d.batch * d.queries * d.dim, 10);
  const auto kv = random_vec(d.batch * d.keys * d.dim, 11), v = random_vec(d.batch * d.keys * d.dim, 12);
  const auto dout = random_vec(d.batch * d.queries * d.dim, 13);
  std::vector<double> probs(d.batch * d.heads * d.queries * d.keys), out(d.batch * d.queries * d.dim);
  k::reference::attention_forward(d, q.data(), kv.data(), v.data(), probs.data(), out.data());
  std::vector<double> dq(q.size()), dk(kv.size()), dv(v.size());
  for (auto _ : state) {
    if constexpr (Omp)
      k::attention_backward(d, q.data(), kv.data(), v.data(), probs.data(), dout.data(), dq.data(), dk.data(), dv.data());
    else
      k::reference::attention_backward(d, q.data(), kv.data(), v.data(), probs.data(), dout.data(), dq.data(), dk.data(),
                                       dv.data());
    benchmark::DoNotOptimize(dq.data());
  }
  set_rate(state, 4.0 * d.batch * d.queries * d.keys * d.dim);
}

// Token rows of a batch of 16 at r=0 (65 tokens) and r=0.5 (33 tokens).
void matmul_shapes(benchmark::internal::Benchmark* b) {
  for (long rows : {16 * 65, 16 * 33}) {
    b->Args({rows, 32, 96});   // fused q/k/v projection
    b->Args({rows, 32, 128});  // MLP up
    b->Args({rows, 128, 32});  // MLP down
  }
}

void nt_shapes(benchmark::internal::Benchmark* b) {
  for (long rows : {16 * 65, 16 * 33}) {
    b->Args({rows, 96, 32});   // input gradient of the projection
    b->Args({rows, 32, 128});  // input gradient of the MLP down layer
  }
}

}  // namespace

BENCHMARK(BM_matmul<true>)->Name("omp/matmul")->Apply(matmul_shapes);
BENCHMARK(BM_matmul<false>)->Name("reference/matmul")->Apply(matmul_shapes);
BENCHMARK(BM_matmul_nt<true>)->Name("omp/matmul_nt")->Apply(nt_shapes);
BENCHMARK(BM_matmul_nt<false>)->Name("reference/matmul_nt")->Apply(nt_shapes);
BENCHMARK(BM_matmul_tn<true>)->Name("omp/matmul_tn_acc")->Apply(matmul_shapes);
BENCHMARK(BM_matmul_tn<false>)->Name("reference/matmul_tn_acc")->Apply(matmul_shapes);
BENCHMARK(BM_attention_forward<true>)->Name("omp/attention_forward")->Arg(65)->Arg(33);
BENCHMARK(BM_attention_forward<false>)->Name("reference/attention_forward")->Arg(65)->Arg(33);
BENCHMARK(BM_attention_backward<true>)->Name("omp/attention_backward")->Arg(65)->Arg(33);
BENCHMARK(BM_attention_backward<false>)->Name("reference/attention_backward")->Arg(65)->Arg(33);

int main(int argc, char** argv) {
  tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
