// Reference versus OpenMP kernels at training-step sizes. The thread count
// is the benchmark argument; results are the same bits for every count.

#include <benchmark/benchmark.h>

#include <vector>

#include "locemb/kernels.hpp"
#include "locemb/rng.hpp"

using namespace locemb;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

// Packed batch of 16 sequences, 36 rows each, d = 64.
constexpr int kRows = 16 * 36, kD = 64, kFfn = 256;

void BM_matmul_reference(benchmark::State& st) {
  const auto a = random_vec(kRows * kD, 1), b = random_vec(kD * kFfn, 2);
  std::vector<float> c(kRows * kFfn);
  for (auto _ : st) {
    kernels::reference::matmul(a.data(), b.data(), c.data(), kRows, kD, kFfn);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * long(kRows) * kD * kFfn);
}

void BM_matmul_omp(benchmark::State& st) {
  kernels::set_thread_count(static_cast<int>(st.range(0)));
  const auto a = random_vec(kRows * kD, 1), b = random_vec(kD * kFfn, 2);
  std::vector<float> c(kRows * kFfn);
  for (auto _ : st) {
    kernels::matmul(a.data(), b.data(), c.data(), kRows, kD, kFfn);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * long(kRows) * kD * kFfn);
  kernels::set_thread_count(1);
}

std::vector<kernels::Segment> segments() {
  std::vector<kernels::Segment> s;
  for (int i = 0; i < 16; ++i) s.push_back({i * 36, 36});
  return s;
}

void BM_attention_reference(benchmark::State& st) {
  const auto segs = segments();
  const auto qkv = random_vec(kRows * 3 * kD, 3);
  std::vector<float> out(kRows * kD), probs(kernels::attention_probs_size(segs, 4));
  for (auto _ : st) {
    kernels::reference::attention_forward(qkv.data(), out.data(), probs.data(), segs, 4, kD);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_attention_omp(benchmark::State& st) {
  kernels::set_thread_count(static_cast<int>(st.range(0)));
  const auto segs = segments();
  const auto qkv = random_vec(kRows * 3 * kD, 3);
  std::vector<float> out(kRows * kD), probs(kernels::attention_probs_size(segs, 4));
  for (auto _ : st) {
    kernels::attention_forward(qkv.data(), out.data(), probs.data(), segs, 4, kD);
    benchmark::DoNotOptimize(out.data());
  }
  kernels::set_thread_count(1);
}

// Mask decoder first layer: 7 -> 16 channels at 64 x 64.
void BM_conv_reference(benchmark::State& st) {
  const auto x = random_vec(7 * 64 * 64, 4), w = random_vec(16 * 7 * 9, 5), b = random_vec(16, 6);
  std::vector<float> y(16 * 64 * 64);
  for (auto _ : st) {
    kernels::reference::conv2d_forward(x.data(), w.data(), b.data(), y.data(), 7, 64, 64, 16, 3);
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_conv_omp(benchmark::State& st) {
  kernels::set_thread_count(static_cast<int>(st.range(0)));
  const auto x = random_vec(7 * 64 * 64, 4), w = random_vec(16 * 7 * 9, 5), b = random_vec(16, 6);
  std::vector<float> y(16 * 64 * 64);
  for (auto _ : st) {
    kernels::conv2d_forward(x.data(), w.data(), b.data(), y.data(), 7, 64, 64, 16, 3);
    benchmark::DoNotOptimize(y.data());
  }
  kernels::set_thread_count(1);
}

}  // namespace

BENCHMARK(BM_matmul_reference);
BENCHMARK(BM_matmul_omp)->Arg(1)->Arg(2)->Arg(4);
BENCHMARK(BM_attention_reference);
BENCHMARK(BM_attention_omp)->Arg(1)->Arg(2)->Arg(4);
BENCHMARK(BM_conv_reference);
BENCHMARK(BM_conv_omp)->Arg(1)->Arg(2)->Arg(4);

BENCHMARK_MAIN();
