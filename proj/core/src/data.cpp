#include "rtdp/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "rtdp/errors.hpp"

namespace rtdp {

std::vector<int32_t> MaskedBatch::flat_masked_positions() const {
  std::vector<int32_t> out;
  for (int64_t b = 0; b < batch; ++b)
    for (int32_t p : masked_positions[static_cast<size_t>(b)])
      out.push_back(static_cast<int32_t>(b * seq_len + p));
  return out;
}

std::vector<int32_t> MaskedBatch::flat_original_ids() const {
  std::vector<int32_t> out;
  for (const auto& row : original_ids) out.insert(out.end(), row.begin(), row.end());
  return out;
}

TokenSequence encode(std::string_view text, const Vocabulary& vocab, int64_t max_len) {
  if (max_len < 3) throw contract_error("encode: max_len must be at least 3");
  TokenSequence seq;
  seq.ids.push_back(Vocabulary::kCls);
  const auto units = split_units(text);
  const size_t keep = std::min(units.size(), static_cast<size_t>(max_len - 2));
  for (size_t i = 0; i < keep; ++i) seq.ids.push_back(vocab.id(units[i]));
  seq.ids.push_back(Vocabulary::kSep);
  return seq;
}

namespace {

bool maskable_id(int32_t id) {
  return id != Vocabulary::kPad && id != Vocabulary::kCls && id != Vocabulary::kSep;
}

}  // namespace

MaskedBatch make_masked_batch(const std::vector<std::vector<int32_t>>& rows, int64_t seq_len,
                              double rate, uint64_t rng_seed) {
  if (rate < 0.0 || rate >= 1.0)
    throw contract_error("make_masked_batch: rate must lie in [0, 1)");
  MaskedBatch mb;
  mb.batch = static_cast<int64_t>(rows.size());
  mb.seq_len = seq_len;
  mb.rng_seed = rng_seed;
  mb.input_ids.assign(static_cast<size_t>(mb.batch * seq_len), Vocabulary::kPad);
  mb.attention_mask.assign(static_cast<size_t>(mb.batch * seq_len), 0);
  mb.masked_positions.resize(rows.size());
  mb.original_ids.resize(rows.size());

  Rng rng(rng_seed);
  for (size_t r = 0; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (static_cast<int64_t>(row.size()) > seq_len)
      throw contract_error("make_masked_batch: row longer than seq_len");
    const int64_t base = static_cast<int64_t>(r) * seq_len;
    std::vector<int32_t> maskable;
    for (size_t p = 0; p < row.size(); ++p) {
      mb.input_ids[static_cast<size_t>(base) + p] = row[p];
      mb.attention_mask[static_cast<size_t>(base) + p] = 1;
      if (maskable_id(row[p])) maskable.push_back(static_cast<int32_t>(p));
    }
    if (maskable.empty())
      throw contract_error("make_masked_batch: row " + std::to_string(r) +
                           " has no maskable token");
    const int64_t want =
        std::max<int64_t>(1, std::llround(rate * static_cast<double>(maskable.size())));
    if (want > static_cast<int64_t>(maskable.size()))
      throw contract_error("make_masked_batch: rate asks for " + std::to_string(want) +
                           " of " + std::to_string(maskable.size()) + " maskable positions");
    // Partial Fisher-Yates; first `want` entries are the selection.
    for (int64_t i = 0; i < want; ++i) {
      const size_t j = static_cast<size_t>(i) +
                       static_cast<size_t>(rng.below(maskable.size() - static_cast<size_t>(i)));
      std::swap(maskable[static_cast<size_t>(i)], maskable[j]);
    }
    std::vector<int32_t> chosen(maskable.begin(), maskable.begin() + want);
    std::sort(chosen.begin(), chosen.end());
    for (int32_t p : chosen) {
      mb.masked_positions[r].push_back(p);
      mb.original_ids[r].push_back(mb.input_ids[static_cast<size_t>(base + p)]);
      mb.input_ids[static_cast<size_t>(base + p)] = Vocabulary::kMask;
    }
  }
  return mb;
}

BatchStream::BatchStream(const std::vector<std::vector<int32_t>>* docs, PhaseDataConfig cfg,
                         uint64_t base_seed, int phase_index, uint64_t doc_cursor,
                         uint64_t batch_counter)
    : docs_(docs),
      cfg_(cfg),
      base_seed_(base_seed),
      phase_index_(phase_index),
      doc_cursor_(doc_cursor),
      batch_counter_(batch_counter) {
  if (docs_ == nullptr || docs_->empty()) throw contract_error("BatchStream: empty corpus");
  if (cfg_.max_len < 3 || cfg_.micro_batch < 1) throw contract_error("BatchStream: bad config");
}

std::vector<int32_t> BatchStream::next_packed_row() {
  std::vector<int32_t> row;
  while (true) {
    const auto& doc = (*docs_)[static_cast<size_t>(doc_cursor_ % docs_->size())];
    const size_t body = std::min(doc.size(), static_cast<size_t>(cfg_.max_len - 2));
    const size_t need = body + 2;
    if (!row.empty() && row.size() + need > static_cast<size_t>(cfg_.max_len)) break;
    row.push_back(Vocabulary::kCls);
    row.insert(row.end(), doc.begin(), doc.begin() + static_cast<std::ptrdiff_t>(body));
    row.push_back(Vocabulary::kSep);
    ++doc_cursor_;
    if (row.size() == static_cast<size_t>(cfg_.max_len)) break;
  }
  return row;
}

MaskedBatch BatchStream::next() {
  std::vector<std::vector<int32_t>> rows;
  rows.reserve(static_cast<size_t>(cfg_.micro_batch));
  for (int64_t r = 0; r < cfg_.micro_batch; ++r) rows.push_back(next_packed_row());
  const uint64_t seed =
      mix_seed(base_seed_, static_cast<uint64_t>(phase_index_), batch_counter_);
  ++batch_counter_;
  return make_masked_batch(rows, cfg_.max_len, cfg_.mask_rate, seed);
}

BatchPrefetcher::BatchPrefetcher(BatchStream stream, size_t capacity)
    : stream_(std::move(stream)), capacity_(std::max<size_t>(1, capacity)) {
  worker_ = std::thread([this] { run(); });
}

BatchPrefetcher::~BatchPrefetcher() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void BatchPrefetcher::run() {
  while (true) {
    Item item;
    item.batch = stream_.next();
    item.doc_cursor_after = stream_.doc_cursor();
    item.batch_counter_after = stream_.batch_counter();
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] { return stop_ || queue_.size() < capacity_; });
    if (stop_) return;
    queue_.push_back(std::move(item));
    cv_.notify_all();
  }
}

BatchPrefetcher::Item BatchPrefetcher::next() {
  std::unique_lock<std::mutex> lock(mu_);
  cv_.wait(lock, [this] { return !queue_.empty(); });
  Item item = std::move(queue_.front());
  queue_.pop_front();
  cv_.notify_all();
  return item;
}

std::vector<std::string> load_corpus_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("cannot open corpus file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::vector<std::vector<int32_t>> docs_to_unit_ids(const std::vector<std::string>& lines,
                                                   const Vocabulary& vocab) {
  std::vector<std::vector<int32_t>> docs;
  docs.reserve(lines.size());
  for (const auto& l : lines) {
    std::vector<int32_t> ids;
    for (const auto& u : split_units(l)) ids.push_back(vocab.id(u));
    if (!ids.empty()) docs.push_back(std::move(ids));
  }
  return docs;
}

}  // namespace rtdp
