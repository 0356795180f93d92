#pragma once

// Two-phase pretraining orchestration: gradient accumulation over
// micro-batches, LAMB updates on the warm-up/decay schedule, per-step metrics,
// periodic atomic checkpoints, resume, and final export.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rtdp/checkpoint.hpp"
#include "rtdp/config.hpp"
#include "rtdp/data.hpp"
#include "rtdp/lamb.hpp"
#include "rtdp/model.hpp"
#include "rtdp/objective.hpp"
#include "rtdp/tensor.hpp"

namespace rtdp {

struct MetricsRecord {
  int64_t step = 0;          // 1-based within the phase
  int phase = 0;             // 1-based
  float l_mlm = 0;
  float l_rtd = 0;
  float combined = 0;
  double lr = 0;
  uint64_t tokens_seen = 0;
  double wall_ms = 0;
  double disc_accuracy = 0;

  std::string to_line() const;
  static MetricsRecord parse_line(const std::string& line);
};

struct StepStats {
  double l_mlm = 0;
  double l_rtd = 0;
  double combined = 0;
  int64_t disc_correct = 0;
  int64_t disc_total = 0;

  double accuracy() const {
    return disc_total == 0 ? 0.0 : static_cast<double>(disc_correct) / disc_total;
  }
};

// Accumulates gradients for one effective step: each micro-batch loss is
// scaled by 1/n_micro before backward so the summed gradient equals the
// large-batch mean gradient. Does not touch the optimizer.
template <typename T>
StepStats accumulate_step(ModelT<T>& model, std::span<const MaskedBatch> micros,
                          double lambda_rtd) {
  if (micros.empty()) throw contract_error("accumulate_step: no micro-batches");
  const T inv = T(1) / static_cast<T>(micros.size());
  StepStats stats;
  for (const MaskedBatch& mb : micros) {
    TapeT<T> tape;
    typename TapeT<T>::Scope scope(tape);

    TensorT<T> h = model.generator_hidden(mb.input_ids, mb.attention_mask, mb.batch, mb.seq_len);
    const auto rows = mb.flat_masked_positions();
    const auto originals = mb.flat_original_ids();
    TensorT<T> logits = model.mlm_logits(gather_rows(h, std::span<const int32_t>(rows)));
    TensorT<T> l_mlm = mlm_loss_rows(logits, std::span<const int32_t>(originals));

    const auto samples = sample_rows(logits, mix_seed(mb.rng_seed, 0x5a3c1eull));
    const CorruptedBatch cb = build_corrupted_batch(mb, samples);
    TensorT<T> d_logits =
        model.discriminator_forward(cb.input_ids, mb.attention_mask, mb.batch, mb.seq_len);
    TensorT<T> l_rtd = rtd_loss(d_logits, cb.rtd_labels);

    TensorT<T> total = scale(combined_loss(l_mlm, l_rtd, lambda_rtd), inv);
    tape.backward(total);

    stats.l_mlm += static_cast<double>(l_mlm.item()) / micros.size();
    stats.l_rtd += static_cast<double>(l_rtd.item()) / micros.size();
    stats.combined += static_cast<double>(l_mlm.item() + static_cast<T>(lambda_rtd) * l_rtd.item()) /
                      micros.size();
    for (size_t i = 0; i < cb.rtd_labels.size(); ++i) {
      if (cb.rtd_labels[i] < 0) continue;
      ++stats.disc_total;
      if ((d_logits.value()[i] > T(0)) == (cb.rtd_labels[i] == 1)) ++stats.disc_correct;
    }
  }
  return stats;
}

class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<std::vector<int32_t>> docs, std::string out_dir);

  void resume_from(const std::string& checkpoint_path);
  // Runs the remaining phases to completion.
  void run();

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const TrainerRunState& state() const { return run_; }
  const std::vector<MetricsRecord>& metrics() const { return metrics_; }
  std::string checkpoint_path(int phase_index, int64_t step) const;

 private:
  void run_phase(int phase_index, int64_t start_step);
  void write_checkpoint(const std::string& path);
  void append_metrics(const MetricsRecord& rec);

  RunConfig cfg_;
  std::vector<std::vector<int32_t>> docs_;
  std::string out_dir_;
  Model model_;
  LambState opt_;
  LambConfig opt_cfg_;
  TrainerRunState run_;
  std::vector<MetricsRecord> metrics_;
  bool resumed_ = false;
};

}  // namespace rtdp
