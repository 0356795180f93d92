#pragma once

// Replaced-token-detection objective. The generator learns from masked
// cross-entropy only; its sampled outputs corrupt the batch for the
// discriminator, which is supervised on every non-PAD position.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "rtdp/data.hpp"
#include "rtdp/model.hpp"
#include "rtdp/tensor.hpp"

namespace rtdp {

struct CorruptedBatch {
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int32_t> input_ids;   // originals with sampled replacements
  std::vector<int8_t> rtd_labels;   // 0 original, 1 replaced, -1 ignore (PAD)
  int64_t masked_count = 0;         // provenance for the coverage audit
  uint64_t seed = 0;
};

// Mean cross-entropy over masked positions only. Logits are the full
// [B*L x vocab] generator output.
template <typename T>
TensorT<T> mlm_loss(const TensorT<T>& gen_logits, const MaskedBatch& mb) {
  const auto rows = mb.flat_masked_positions();
  if (rows.empty()) throw contract_error("mlm_loss: batch has no masked positions");
  const auto originals = mb.flat_original_ids();
  return cross_entropy_mean(gather_rows(gen_logits, std::span<const int32_t>(rows)),
                            std::span<const int32_t>(originals));
}

// Same loss when the caller already gathered the masked rows.
template <typename T>
TensorT<T> mlm_loss_rows(const TensorT<T>& masked_logits, std::span<const int32_t> originals) {
  if (masked_logits.dim(0) == 0) throw contract_error("mlm_loss: no masked positions");
  return cross_entropy_mean(masked_logits, originals);
}

// Multinomial draw at temperature 1 from each logits row. Reads values only;
// nothing is recorded on the tape, so no gradient flows through sampling.
template <typename T>
std::vector<int32_t> sample_rows(const TensorT<T>& logits, uint64_t rng_seed) {
  if (logits.rank() != 2) throw shape_error("sample_rows: logits must be rank 2");
  const int64_t n = logits.dim(0), v = logits.dim(1);
  Rng rng(rng_seed);
  std::vector<int32_t> out(static_cast<size_t>(n));
  std::vector<double> probs(static_cast<size_t>(v));
  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.value().data() + i * v;
    double mx = static_cast<double>(row[0]);
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0;
    for (int64_t j = 0; j < v; ++j) {
      probs[static_cast<size_t>(j)] = std::exp(static_cast<double>(row[j]) - mx);
      denom += probs[static_cast<size_t>(j)];
    }
    const double u = rng.uniform01() * denom;
    double acc = 0;
    int32_t pick = static_cast<int32_t>(v - 1);
    for (int64_t j = 0; j < v; ++j) {
      acc += probs[static_cast<size_t>(j)];
      if (u < acc) {
        pick = static_cast<int32_t>(j);
        break;
      }
    }
    out[static_cast<size_t>(i)] = pick;
  }
  return out;
}

// Contract form: full generator logits plus the batch's masked positions.
template <typename T>
std::vector<int32_t> sample_replacements(const TensorT<T>& gen_logits, const MaskedBatch& mb,
                                         uint64_t rng_seed) {
  const auto rows = mb.flat_masked_positions();
  TensorT<T> picked = gather_rows(stop_gradient(gen_logits), std::span<const int32_t>(rows));
  return sample_rows(picked, rng_seed);
}

// Masked positions receive their sampled token; a sample equal to the
// original counts as "original" (label 0).
CorruptedBatch build_corrupted_batch(const MaskedBatch& mb, std::span<const int32_t> samples);

// Mean sigmoid BCE over every position with label != -1.
template <typename T>
TensorT<T> rtd_loss(const TensorT<T>& disc_logits, const std::vector<int8_t>& labels) {
  if (disc_logits.numel() != static_cast<int64_t>(labels.size()))
    throw shape_error("rtd_loss: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(disc_logits.numel()) + " logits");
  std::vector<T> targets(labels.size(), T(0));
  std::vector<uint8_t> include(labels.size(), 0);
  bool any = false;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    include[i] = 1;
    targets[i] = static_cast<T>(labels[i]);
    any = true;
  }
  if (!any) throw contract_error("rtd_loss: every label is ignore (-1)");
  return bce_with_logits_mean(disc_logits, std::span<const T>(targets),
                              std::span<const uint8_t>(include));
}

// L = L_MLM + lambda * L_RTD.
template <typename T>
TensorT<T> combined_loss(const TensorT<T>& l_mlm, const TensorT<T>& l_rtd, double lambda_rtd) {
  if (lambda_rtd < 0) throw contract_error("combined_loss: lambda must be >= 0");
  return add(l_mlm, scale(l_rtd, static_cast<T>(lambda_rtd)));
}

// Fraction of supervised (label != -1) positions predicted correctly by the
// sign of the logit. PAD positions are excluded.
template <typename T>
double discriminator_accuracy(const TensorT<T>& disc_logits, const std::vector<int8_t>& labels) {
  int64_t correct = 0, total = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) continue;
    ++total;
    const bool said_replaced = disc_logits.value()[i] > T(0);
    if (said_replaced == (labels[i] == 1)) ++correct;
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace rtdp
