#include <doctest.h>

#include <array>
#include <cmath>

#include "rtdp/model.hpp"
#include "rtdp/objective.hpp"

using namespace rtdp;

namespace {

MaskedBatch fixed_batch(int64_t batch, int64_t len, int64_t vocab, uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int32_t>> rows;
  for (int64_t b = 0; b < batch; ++b) {
    std::vector<int32_t> row{Vocabulary::kCls};
    for (int64_t i = 0; i < len - 2; ++i)
      row.push_back(static_cast<int32_t>(5 + rng.below(static_cast<uint64_t>(vocab - 5))));
    row.push_back(Vocabulary::kSep);
    rows.push_back(std::move(row));
  }
  return make_masked_batch(rows, len, 0.15, seed);
}

}  // namespace

TEST_CASE("mlm loss at a perfect one-hot prediction is near zero") {
  std::vector<std::vector<int32_t>> rows = {{Vocabulary::kCls, 7, Vocabulary::kSep}};
  MaskedBatch mb = make_masked_batch(rows, 4, 0.15, 3);
  REQUIRE(mb.masked_positions[0].size() == 1);

  const int64_t vocab = 37;
  Tensor logits = Tensor::zeros({4, vocab});
  const int32_t original = mb.original_ids[0][0];
  const int64_t row = mb.masked_positions[0][0];
  for (int64_t v = 0; v < vocab; ++v)
    logits.value()[static_cast<size_t>(row * vocab + v)] = (v == original) ? 30.0f : -30.0f;
  CHECK(mlm_loss(logits, mb).item() < 1e-6f);
}

TEST_CASE("mlm loss with zero masked rows is a contract error") {
  Tensor logits = Tensor::zeros({0, 37});
  std::vector<int32_t> none;
  CHECK_THROWS_AS(mlm_loss_rows(logits, std::span<const int32_t>(none)), contract_error);
}

TEST_CASE("mlm loss on uniform logits equals ln(vocab)") {
  MaskedBatch mb = fixed_batch(2, 8, 37, 5);
  Tensor logits = Tensor::zeros({16, 37});
  CHECK(mlm_loss(logits, mb).item() == doctest::Approx(std::log(37.0)).epsilon(1e-6));
}

TEST_CASE("mlm loss matches a 64-bit oracle on random logits") {
  MaskedBatch mb = fixed_batch(2, 8, 11, 7);
  Rng rng(9);
  TensorT<double> logits = TensorT<double>::randn({16, 11}, rng, 2.0);
  const auto rows = mb.flat_masked_positions();
  const auto originals = mb.flat_original_ids();

  double want = 0;
  for (size_t i = 0; i < rows.size(); ++i) {
    const double* row = logits.value().data() + rows[i] * 11;
    double mx = row[0];
    for (int v = 1; v < 11; ++v) mx = std::max(mx, row[v]);
    double denom = 0;
    for (int v = 0; v < 11; ++v) denom += std::exp(row[v] - mx);
    want += mx + std::log(denom) - row[originals[i]];
  }
  want /= static_cast<double>(rows.size());
  CHECK(mlm_loss(logits, mb).item() == doctest::Approx(want).epsilon(1e-6));
}

TEST_CASE("sampling follows the logits distribution") {
  // near-deterministic: a 30-margin one-hot row picks its token
  Tensor peaked = Tensor::zeros({1, 5});
  for (int v = 0; v < 5; ++v) peaked.value()[static_cast<size_t>(v)] = v == 3 ? 30.0f : 0.0f;
  for (uint64_t s = 0; s < 50; ++s) CHECK(sample_rows(peaked, s)[0] == 3);

  // uniform logits over vocab 4: each token frequency 0.25 +/- 0.02
  Tensor uniform = Tensor::zeros({1, 4});
  std::array<int, 4> counts{};
  const int draws = 10000;
  for (int d = 0; d < draws; ++d) ++counts[static_cast<size_t>(sample_rows(uniform, static_cast<uint64_t>(d))[0])];
  for (int v = 0; v < 4; ++v) {
    const double freq = static_cast<double>(counts[static_cast<size_t>(v)]) / draws;
    CHECK(freq > 0.23);
    CHECK(freq < 0.27);
  }

  // determinism
  Rng rng(13);
  Tensor random_logits = Tensor::randn({6, 9}, rng, 1.5f);
  CHECK(sample_rows(random_logits, 77) == sample_rows(random_logits, 77));
}

TEST_CASE("build_corrupted_batch labels follow the same-token convention") {
  MaskedBatch mb = fixed_batch(2, 8, 37, 21);
  const auto originals = mb.flat_original_ids();

  // all samples equal originals: nothing was effectively replaced
  CorruptedBatch same = build_corrupted_batch(mb, std::span<const int32_t>(originals));
  for (const int8_t l : same.rtd_labels) CHECK(l <= 0);
  CHECK(same.input_ids == [&] {
    std::vector<int32_t> restored = mb.input_ids;
    size_t c = 0;
    for (int64_t b = 0; b < mb.batch; ++b)
      for (size_t i = 0; i < mb.masked_positions[static_cast<size_t>(b)].size(); ++i, ++c)
        restored[static_cast<size_t>(b * mb.seq_len + mb.masked_positions[static_cast<size_t>(b)][i])] =
            originals[c];
    return restored;
  }());

  // all samples differ: label 1 exactly at masked positions
  std::vector<int32_t> different = originals;
  for (auto& s : different) s = s == 5 ? 6 : 5;
  CorruptedBatch diff = build_corrupted_batch(mb, std::span<const int32_t>(different));
  int64_t ones = 0;
  for (const int8_t l : diff.rtd_labels) ones += l == 1 ? 1 : 0;
  CHECK(ones == mb.total_masked());

  // mixed case against a position-by-position comparison oracle
  std::vector<int32_t> mixed = originals;
  for (size_t i = 0; i < mixed.size(); i += 2) mixed[i] = mixed[i] == 5 ? 6 : 5;
  CorruptedBatch cb = build_corrupted_batch(mb, std::span<const int32_t>(mixed));
  size_t cursor = 0;
  for (int64_t b = 0; b < mb.batch; ++b) {
    const auto& pos = mb.masked_positions[static_cast<size_t>(b)];
    const auto& orig = mb.original_ids[static_cast<size_t>(b)];
    for (size_t i = 0; i < pos.size(); ++i, ++cursor) {
      const size_t flat = static_cast<size_t>(b * mb.seq_len + pos[i]);
      CHECK(cb.input_ids[flat] == mixed[cursor]);
      CHECK(cb.rtd_labels[flat] == (mixed[cursor] != orig[i] ? 1 : 0));
    }
  }

  // labels are -1 exactly at PAD positions
  for (size_t i = 0; i < cb.rtd_labels.size(); ++i)
    CHECK((cb.rtd_labels[i] == -1) == (mb.attention_mask[i] == 0));

  // misaligned samples
  std::vector<int32_t> short_samples(originals.begin(), originals.end() - 1);
  CHECK_THROWS_AS(build_corrupted_batch(mb, std::span<const int32_t>(short_samples)),
                  contract_error);
}

TEST_CASE("rtd loss baselines") {
  // zero logits on balanced labels: ln 2
  std::vector<int8_t> labels = {0, 1, 0, 1, -1, -1};
  Tensor zeros = Tensor::zeros({6});
  CHECK(rtd_loss(zeros, labels).item() == doctest::Approx(std::log(2.0)).epsilon(1e-7));

  // confident correct logits: loss near zero
  Tensor confident = Tensor::from_vector({6}, {-30, 30, -30, 30, 0, 0});
  CHECK(rtd_loss(confident, labels).item() < 1e-9f);

  // contributing positions = all non-PAD, not just the masked share
  MaskedBatch mb = fixed_batch(2, 16, 37, 31);
  auto originals = mb.flat_original_ids();
  for (auto& s : originals) s = s == 5 ? 6 : 5;
  CorruptedBatch cb = build_corrupted_batch(mb, std::span<const int32_t>(originals));
  int64_t non_pad = 0;
  for (uint8_t m : mb.attention_mask) non_pad += m;
  int64_t contributing = 0;
  for (const int8_t l : cb.rtd_labels) contributing += l >= 0 ? 1 : 0;
  CHECK(contributing == non_pad);
  CHECK(contributing > mb.total_masked() * 5);

  std::vector<int8_t> all_ignored = {-1, -1};
  CHECK_THROWS_AS(rtd_loss(Tensor::zeros({2}), all_ignored), contract_error);
}

TEST_CASE("combined loss arithmetic") {
  Tensor l_mlm = Tensor::scalar(2.0f);
  Tensor l_rtd = Tensor::scalar(0.1f);
  CHECK(combined_loss(l_mlm, l_rtd, 50.0).item() == doctest::Approx(7.0).epsilon(1e-7));
  CHECK(combined_loss(l_mlm, l_rtd, 0.0).item() == doctest::Approx(2.0));
  CHECK(combined_loss(Tensor::scalar(0.0f), Tensor::scalar(0.0f), 50.0).item() == 0.0f);
  CHECK_THROWS_AS(combined_loss(l_mlm, l_rtd, -1.0), contract_error);
}

TEST_CASE("gradient routing separates generator and discriminator") {
  ModelConfig cfg;
  ModelT<float> model(cfg, 71);
  MaskedBatch mb = fixed_batch(2, 8, cfg.vocab_size, 73);

  Tensor gen_logits = model.generator_forward(mb);
  auto samples = sample_replacements(gen_logits, mb, 79);
  CorruptedBatch cb = build_corrupted_batch(mb, std::span<const int32_t>(samples));

  model.params().zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor l_mlm = mlm_loss(model.generator_forward(mb), mb);
    Tensor d = model.discriminator_forward(cb.input_ids, mb.attention_mask, mb.batch, mb.seq_len);
    Tensor total = combined_loss(l_mlm, rtd_loss(d, cb.rtd_labels), 50.0);
    tape.backward(total);
  }

  auto grad_zero = [&](const std::string& name) {
    const auto& t = model.params().find(name)->tensor;
    if (!t.has_grad()) return true;
    for (float v : t.grad_buffer())
      if (v != 0.0f) return false;
    return true;
  };

  // discriminator-only parameters receive nothing from L_MLM and vice versa;
  // with lambda > 0 both losses are live, so each side must be nonzero where
  // its own loss reaches
  CHECK(!grad_zero("gen.l0.q.w"));
  CHECK(!grad_zero("disc.l0.q.w"));
  CHECK(!grad_zero("emb.e_g"));
  CHECK(!grad_zero("emb.e_delta"));

  // MLM alone: no discriminator parameter moves
  model.params().zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(mlm_loss(model.generator_forward(mb), mb));
  }
  CHECK(!grad_zero("gen.l0.q.w"));
  CHECK(grad_zero("disc.l0.q.w"));
  CHECK(grad_zero("disc.head.w"));
  CHECK(grad_zero("emb.e_delta"));

  // RTD alone: no generator parameter moves, E_G protected by stop-gradient
  model.params().zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor d = model.discriminator_forward(cb.input_ids, mb.attention_mask, mb.batch, mb.seq_len);
    tape.backward(rtd_loss(d, cb.rtd_labels));
  }
  CHECK(grad_zero("gen.l0.q.w"));
  CHECK(grad_zero("gen.in_proj.w"));
  CHECK(grad_zero("emb.e_g"));
  CHECK(!grad_zero("disc.l0.q.w"));
  CHECK(!grad_zero("emb.e_delta"));
  // the shared position table is reached by both encoders
  CHECK(!grad_zero("emb.rel_pos"));
}

TEST_CASE("full logits and gathered-rows mlm paths agree bitwise") {
  ModelConfig cfg;
  ModelT<float> model(cfg, 83);
  MaskedBatch mb = fixed_batch(2, 8, cfg.vocab_size, 89);

  Tensor full = mlm_loss(model.generator_forward(mb), mb);

  Tensor h = model.generator_hidden(mb.input_ids, mb.attention_mask, mb.batch, mb.seq_len);
  const auto rows = mb.flat_masked_positions();
  const auto originals = mb.flat_original_ids();
  Tensor gathered = mlm_loss_rows(model.mlm_logits(gather_rows(h, std::span<const int32_t>(rows))),
                                  std::span<const int32_t>(originals));
  CHECK(full.item() == gathered.item());
}
