#pragma once

// Independent oracles that make the training method's claims checkable:
// central finite differences against the tape's gradients, a naive three-term
// attention evaluation, the embedding-gradient isolation audit (with its
// no-stop-gradient ablation), the shared-projection audit against a
// per-layer-duplicated reference, and the RTD coverage ratio.
//
// Every oracle evaluates in 64-bit regardless of the model precision.

#include <functional>
#include <string>
#include <vector>

#include "rtdp/model.hpp"
#include "rtdp/objective.hpp"
#include "rtdp/tensor.hpp"

namespace rtdp {

struct CheckReport {
  std::string name;
  bool pass = false;
  double worst_rel_err = 0;
  std::string location;  // offending parameter / case, when failing
  std::string note;

  std::string to_line() const;
};

// Central differences per coordinate: (f(x+h e) - f(x-h e)) / 2h. loss_fn is
// evaluated with the store's current values; parameters are restored after
// each probe. Throws when an evaluation goes non-finite, naming the
// coordinate.
std::vector<std::vector<double>> finite_difference_gradient(
    ParameterStoreT<double>& params, const std::function<double()>& loss_fn, double h = 1e-3);

// Relative error with an absolute floor, used by every gradient comparison.
double relative_error(double a, double b, double floor = 1e-8);

// Full combined-loss gradient check on a double instantiation of the model:
// the corruption is frozen once so the loss is a smooth function of the
// parameters, exactly what backward() differentiates.
CheckReport full_model_gradient_check(const ModelConfig& config, uint64_t seed, double tolerance,
                                      int64_t batch = 2, int64_t seq_len = 8,
                                      double lambda_rtd = 50.0);

// Asserts dL_RTD/dE_G == 0 bitwise, dL_MLM/dE_Delta == 0 bitwise, and
// dL_RTD/dE_Delta != 0 when the batch has at least one replaced token
// (otherwise that leg is reported as skipped).
CheckReport gdes_isolation_check(ModelT<float>& model, const MaskedBatch& batch,
                                 const CorruptedBatch* fixed_corruption = nullptr);

// The shared pos_q/pos_k pair must be single storage and its gradient must
// equal the per-layer gradient sum of a duplicated-reference encoder
// initialized identically.
CheckReport shared_projection_check(uint64_t seed, int64_t n_layers = 3, double tolerance = 1e-5);

// (#labels != -1) / (#masked positions).
double rtd_coverage_audit(const CorruptedBatch& batch);
CheckReport rtd_coverage_check(uint64_t seed);

// Naive 64-bit evaluation of the whole disentangled attention sublayer
// (three score terms, masking, softmax, heads, output projection, residual,
// layer norm) for one sequence. Returns the [L x width] output; when
// weights_out is non-null the post-softmax attention rows are stored per head.
std::vector<double> naive_attention_sublayer(
    const EncoderT<double>& encoder, int64_t layer, const std::vector<double>& x_seq, int64_t len,
    const std::vector<double>& pos_table, int64_t pos_rows,
    const std::vector<uint8_t>& key_valid, std::vector<std::vector<double>>* weights_out);

CheckReport attention_oracle_check(uint64_t seed, int cases = 50, double tolerance = 1e-5);

// The ablation leg: a model built without stop-gradient must fail the
// isolation check; this wraps that expectation as its own report.
CheckReport gdes_ablation_check(uint64_t seed);

std::vector<CheckReport> run_all_checks(uint64_t seed);

}  // namespace rtdp
