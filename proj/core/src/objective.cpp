#include "rtdp/objective.hpp"

namespace rtdp {

CorruptedBatch build_corrupted_batch(const MaskedBatch& mb, std::span<const int32_t> samples) {
  if (static_cast<int64_t>(samples.size()) != mb.total_masked())
    throw contract_error("build_corrupted_batch: " + std::to_string(samples.size()) +
                         " samples for " + std::to_string(mb.total_masked()) +
                         " masked positions");
  CorruptedBatch cb;
  cb.batch = mb.batch;
  cb.seq_len = mb.seq_len;
  cb.seed = mb.rng_seed;
  cb.masked_count = mb.total_masked();
  cb.input_ids = mb.input_ids;
  cb.rtd_labels.assign(mb.input_ids.size(), -1);
  for (size_t i = 0; i < mb.input_ids.size(); ++i)
    if (mb.attention_mask[i]) cb.rtd_labels[i] = 0;

  size_t cursor = 0;
  for (int64_t b = 0; b < mb.batch; ++b) {
    const auto& positions = mb.masked_positions[static_cast<size_t>(b)];
    const auto& originals = mb.original_ids[static_cast<size_t>(b)];
    for (size_t i = 0; i < positions.size(); ++i, ++cursor) {
      const size_t flat = static_cast<size_t>(b * mb.seq_len + positions[i]);
      const int32_t sampled = samples[cursor];
      cb.input_ids[flat] = sampled;
      cb.rtd_labels[flat] = (sampled != originals[i]) ? 1 : 0;
    }
  }
  return cb;
}

}  // namespace rtdp
