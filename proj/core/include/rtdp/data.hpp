#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "rtdp/rng.hpp"
#include "rtdp/vocab.hpp"

namespace rtdp {

// One encoded document: [CLS] ids... [SEP], no interior padding.
struct TokenSequence {
  std::vector<int32_t> ids;
};

// One micro-batch after dynamic masking. Masked positions carry the MASK id
// in input_ids; the originals are kept per row for the MLM loss.
struct MaskedBatch {
  int64_t batch = 0;
  int64_t seq_len = 0;
  std::vector<int32_t> input_ids;                    // batch * seq_len
  std::vector<uint8_t> attention_mask;               // 1 = real token, 0 = PAD
  std::vector<std::vector<int32_t>> masked_positions;  // per row, ascending
  std::vector<std::vector<int32_t>> original_ids;      // aligned with masked_positions
  uint64_t rng_seed = 0;

  int64_t total_masked() const {
    int64_t n = 0;
    for (const auto& row : masked_positions) n += static_cast<int64_t>(row.size());
    return n;
  }
  // Flat row indices (b * seq_len + pos) of every masked position.
  std::vector<int32_t> flat_masked_positions() const;
  std::vector<int32_t> flat_original_ids() const;
};

TokenSequence encode(std::string_view text, const Vocabulary& vocab, int64_t max_len);

// Dynamic masking: per row, max(1, round(rate * n_maskable))
// distinct maskable positions become MASK. CLS/SEP/PAD never count as
// maskable. rows holds packed token rows (without padding, each <= seq_len).
MaskedBatch make_masked_batch(const std::vector<std::vector<int32_t>>& rows, int64_t seq_len,
                              double rate, uint64_t rng_seed);

struct PhaseDataConfig {
  int64_t max_len = 128;
  int64_t micro_batch = 8;
  double mask_rate = 0.15;
};

// Greedy packer over the corpus with wrap-around; deterministic given
// (documents, config, seed) and resumable from (doc_cursor, batch_counter).
class BatchStream {
 public:
  BatchStream(const std::vector<std::vector<int32_t>>* docs, PhaseDataConfig cfg,
              uint64_t base_seed, int phase_index, uint64_t doc_cursor = 0,
              uint64_t batch_counter = 0);

  MaskedBatch next();

  uint64_t doc_cursor() const { return doc_cursor_; }
  uint64_t batch_counter() const { return batch_counter_; }

 private:
  std::vector<int32_t> next_packed_row();

  const std::vector<std::vector<int32_t>>* docs_;
  PhaseDataConfig cfg_;
  uint64_t base_seed_;
  int phase_index_;
  uint64_t doc_cursor_;
  uint64_t batch_counter_;
};

// Bounded producer queue in front of a BatchStream. Each item carries the
// stream state after it was produced so the consumer can checkpoint exactly.
class BatchPrefetcher {
 public:
  struct Item {
    MaskedBatch batch;
    uint64_t doc_cursor_after = 0;
    uint64_t batch_counter_after = 0;
  };

  BatchPrefetcher(BatchStream stream, size_t capacity = 4);
  ~BatchPrefetcher();

  BatchPrefetcher(const BatchPrefetcher&) = delete;
  BatchPrefetcher& operator=(const BatchPrefetcher&) = delete;

  Item next();

 private:
  void run();

  BatchStream stream_;
  size_t capacity_;
  std::deque<Item> queue_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_ = false;
  std::thread worker_;
};

std::vector<std::string> load_corpus_lines(const std::string& path);
std::vector<std::vector<int32_t>> docs_to_unit_ids(const std::vector<std::string>& lines,
                                                   const Vocabulary& vocab);

}  // namespace rtdp
