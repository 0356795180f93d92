#include <benchmark/benchmark.h>

#include "rtdp/rng.hpp"
#include "rtdp/tensor.hpp"

using namespace rtdp;

static void BM_Matmul(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(1);
  Tensor a = Tensor::randn({n, n}, rng, 1.0f);
  Tensor b = Tensor::randn({n, n}, rng, 1.0f);
  for (auto _ : state) {
    Tensor c = matmul(a, b);
    benchmark::DoNotOptimize(c.value().data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(32, 512);

static void BM_LayerNorm(benchmark::State& state) {
  const int64_t rows = state.range(0);
  Rng rng(2);
  Tensor x = Tensor::randn({rows, 64}, rng, 1.0f);
  Tensor g = Tensor::full({64}, 1.0f);
  Tensor b = Tensor::zeros({64});
  for (auto _ : state) {
    Tensor y = layer_norm(x, g, b);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * rows * 64);
}
BENCHMARK(BM_LayerNorm)->Range(64, 1024);

static void BM_Softmax(benchmark::State& state) {
  const int64_t len = state.range(0);
  Rng rng(3);
  Tensor x = Tensor::randn({len, len}, rng, 1.0f);
  for (auto _ : state) {
    Tensor y = softmax(x, 1);
    benchmark::DoNotOptimize(y.value().data());
  }
  state.SetItemsProcessed(state.iterations() * len * len);
}
BENCHMARK(BM_Softmax)->Range(32, 512);

static void BM_BackwardMLP(benchmark::State& state) {
  const int64_t n = state.range(0);
  Rng rng(4);
  Tensor x = Tensor::randn({n, 64}, rng, 1.0f);
  Tensor w1 = Tensor::randn({64, 256}, rng, 0.05f).set_requires_grad(true);
  Tensor w2 = Tensor::randn({256, 64}, rng, 0.05f).set_requires_grad(true);
  for (auto _ : state) {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = sum_all(matmul(gelu(matmul(x, w1)), w2));
    tape.backward(loss);
    w1.zero_grad();
    w2.zero_grad();
  }
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_BackwardMLP)->Range(16, 256);

BENCHMARK_MAIN();
