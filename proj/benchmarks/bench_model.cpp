#include <benchmark/benchmark.h>

#include "rtdp/model.hpp"
#include "rtdp/objective.hpp"
#include "rtdp/trainer.hpp"

using namespace rtdp;

namespace {

MaskedBatch bench_batch(const ModelConfig& cfg, int64_t batch, int64_t len, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int32_t>> rows;
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<int32_t> row{Vocabulary::kCls};
    for (int64_t i = 0; i < len - 2; ++i)
      row.push_back(static_cast<int32_t>(5 + rng.below(static_cast<uint64_t>(cfg.vocab_size - 5))));
    row.push_back(Vocabulary::kSep);
    rows.push_back(std::move(row));
  }
  return make_masked_batch(rows, len, 0.15, seed);
}

ModelConfig bench_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.hidden = 64;
  cfg.vocab_size = 512;
  cfg.max_rel_distance = 8;
  cfg.generator_hidden = 32;
  cfg.generator_layers = 2;
  return cfg;
}

}  // namespace

static void BM_DiscriminatorForward(benchmark::State& state) {
  const int64_t len = state.range(0);
  ModelConfig cfg = bench_config();
  ModelT<float> model(cfg, 1);
  MaskedBatch mb = bench_batch(cfg, 4, len, 2);
  for (auto _ : state) {
    Tensor d = model.discriminator_forward(mb.input_ids, mb.attention_mask, 4, len);
    benchmark::DoNotOptimize(d.value().data());
  }
  state.SetItemsProcessed(state.iterations() * 4 * len);
}
BENCHMARK(BM_DiscriminatorForward)->RangeMultiplier(2)->Range(32, 256);

static void BM_TrainStep(benchmark::State& state) {
  ModelConfig cfg = bench_config();
  ModelT<float> model(cfg, 3);
  std::vector<MaskedBatch> micros;
  for (int m = 0; m < 4; ++m) micros.push_back(bench_batch(cfg, 8, 64, 10 + m));
  LambStateT<float> opt;
  opt.init(model.params());
  LambConfigT<float> opt_cfg;
  for (auto _ : state) {
    model.params().zero_grad();
    StepStats stats = accumulate_step<float>(model, micros, 50.0);
    lamb_step(model.params(), opt, opt_cfg, 1e-3f);
    benchmark::DoNotOptimize(stats.combined);
  }
  state.SetItemsProcessed(state.iterations() * 4 * 8 * 64);
}
BENCHMARK(BM_TrainStep);

BENCHMARK_MAIN();
