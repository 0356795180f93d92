#include <doctest.h>

#include <cmath>

#include "rtdp/verify.hpp"

using namespace rtdp;

namespace {

MaskedBatch small_batch(const ModelConfig& cfg, uint64_t seed, int64_t batch = 2,
                        int64_t len = 8) {
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

}  // namespace

TEST_CASE("finite differences recover analytic derivatives") {
  // f(x) = x^2 at x = 3: derivative 6
  ParameterStoreT<double> params;
  params.add("x", TensorT<double>::from_vector({1}, {3.0}));
  auto grads = finite_difference_gradient(
      params, [&] { return params[0].tensor.value()[0] * params[0].tensor.value()[0]; }, 1e-4);
  CHECK(grads[0][0] == doctest::Approx(6.0).epsilon(1e-8));

  // f(x) = sum(softmax(x)) == 1: gradient vanishes
  ParameterStoreT<double> sm;
  Rng rng(3);
  sm.add("x", TensorT<double>::randn({5}, rng, 1.0));
  auto g2 = finite_difference_gradient(
      sm,
      [&] {
        TensorT<double> y = softmax(sm[0].tensor, 0);
        double s = 0;
        for (double v : y.value()) s += v;
        return s;
      },
      1e-4);
  for (double v : g2[0]) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("finite differences report non-finite evaluations with the coordinate") {
  ParameterStoreT<double> params;
  params.add("p", TensorT<double>::from_vector({2}, {1.0, 0.0}));
  CHECK_THROWS_WITH_AS(
      finite_difference_gradient(
          params, [&] { return std::log(params[0].tensor.value()[1]); }, 1e-4),
      doctest::Contains("p["), error);
}

TEST_CASE("full model gradient check passes on the toy configuration") {
  ModelConfig toy;  // 2 layers, hidden 16, 2 heads, vocab 37, generator 8
  CheckReport report = full_model_gradient_check(toy, 1234, 1e-3);
  INFO(report.to_line());
  CHECK(report.pass);
  CHECK(report.worst_rel_err <= 1e-3);
}

TEST_CASE("gdes isolation holds for the default model and fails for the ablation") {
  ModelConfig cfg;
  ModelT<float> model(cfg, 55);
  MaskedBatch mb = small_batch(cfg, 57);
  CheckReport ok = gdes_isolation_check(model, mb);
  INFO(ok.to_line());
  CHECK(ok.pass);

  ModelT<float> ablated(cfg, 55, /*gdes_enabled=*/false);
  CheckReport bad = gdes_isolation_check(ablated, mb);
  CHECK(!bad.pass);
  CHECK(bad.location == "dL_RTD/dE_G");

  CheckReport wrapped = gdes_ablation_check(59);
  INFO(wrapped.to_line());
  CHECK(wrapped.pass);
}

TEST_CASE("gdes isolation reports the skipped leg on zero-replacement batches") {
  ModelConfig cfg;
  ModelT<float> model(cfg, 61);
  MaskedBatch mb = small_batch(cfg, 63);
  // corruption where every sample reproduced its original: zero replacements
  const auto originals = mb.flat_original_ids();
  CorruptedBatch cb = build_corrupted_batch(mb, std::span<const int32_t>(originals));
  CheckReport report = gdes_isolation_check(model, mb, &cb);
  CHECK(report.pass);
  CHECK(report.note.find("skipped") != std::string::npos);
}

TEST_CASE("rtd coverage audit counts supervised versus masked positions") {
  // 128-token rows at 15%: ratio lands near 126/19
  ModelConfig cfg;
  cfg.vocab_size = 200;
  std::vector<int32_t> row{Vocabulary::kCls};
  for (int i = 0; i < 126; ++i) row.push_back(5 + (i % 150));
  row.push_back(Vocabulary::kSep);
  MaskedBatch mb = make_masked_batch({row}, 128, 0.15, 71);
  auto samples = mb.flat_original_ids();
  for (auto& s : samples) s = s == 5 ? 6 : 5;
  CorruptedBatch cb = build_corrupted_batch(mb, std::span<const int32_t>(samples));
  const double ratio = rtd_coverage_audit(cb);
  CHECK(ratio == doctest::Approx(128.0 / 19.0).epsilon(1e-9));
  CHECK(ratio >= 6.0);

  // rate 0.5 shrinks the ratio to about 2
  MaskedBatch half = make_masked_batch({row}, 128, 0.5, 73);
  auto s2 = half.flat_original_ids();
  CorruptedBatch cb2 = build_corrupted_batch(half, std::span<const int32_t>(s2));
  CHECK(rtd_coverage_audit(cb2) == doctest::Approx(128.0 / 63.0).epsilon(1e-9));

  // an all-PAD row contributes to neither count
  CorruptedBatch padded = cb;
  padded.rtd_labels.insert(padded.rtd_labels.end(), 128, -1);
  CHECK(rtd_coverage_audit(padded) == doctest::Approx(128.0 / 19.0).epsilon(1e-9));

  CheckReport report = rtd_coverage_check(75);
  INFO(report.to_line());
  CHECK(report.pass);
}

TEST_CASE("every check is deterministic given its seed") {
  const auto a = run_all_checks(2026);
  const auto b = run_all_checks(2026);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].pass == b[i].pass);
    CHECK(a[i].worst_rel_err == b[i].worst_rel_err);
    CHECK(a[i].to_line() == b[i].to_line());
  }
  for (const auto& r : a) {
    INFO(r.to_line());
    CHECK(r.pass);
  }
}
