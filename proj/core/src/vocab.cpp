#include "rtdp/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace rtdp {

const std::array<const char*, 5>& Vocabulary::reserved_tokens() {
  static const std::array<const char*, 5> r = {"[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"};
  return r;
}

std::vector<std::string> split_units(std::string_view line) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.emplace_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

Vocabulary Vocabulary::build(std::istream& corpus, int64_t target_size) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(corpus, line)) lines.push_back(line);
  return build(lines, target_size);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& lines, int64_t target_size) {
  if (target_size <= kReservedCount)
    throw contract_error("build_vocab: target size " + std::to_string(target_size) +
                         " leaves no room after " + std::to_string(kReservedCount) +
                         " reserved tokens");
  std::unordered_map<std::string, int64_t> freq;
  for (const auto& l : lines)
    for (auto& u : split_units(l)) ++freq[u];
  if (freq.empty()) throw contract_error("build_vocab: empty corpus");

  std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  std::vector<std::string> tokens;
  tokens.reserve(static_cast<size_t>(target_size));
  for (const char* r : reserved_tokens()) tokens.emplace_back(r);
  const size_t room = static_cast<size_t>(target_size - kReservedCount);
  for (size_t i = 0; i < ranked.size() && i < room; ++i) tokens.push_back(ranked[i].first);
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<size_t>(kReservedCount))
    throw contract_error("vocabulary: fewer tokens than reserved slots");
  for (int32_t i = 0; i < kReservedCount; ++i)
    if (tokens[static_cast<size_t>(i)] != reserved_tokens()[static_cast<size_t>(i)])
      throw contract_error("vocabulary: reserved token slot " + std::to_string(i) +
                           " holds '" + tokens[static_cast<size_t>(i)] + "'");
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (size_t i = 0; i < v.tokens_.size(); ++i) {
    if (v.ids_.count(v.tokens_[i]))
      throw contract_error("vocabulary: duplicate token '" + v.tokens_[i] + "'");
    v.ids_[v.tokens_[i]] = static_cast<int32_t>(i);
  }
  return v;
}

Vocabulary Vocabulary::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("cannot open vocabulary file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == '\n')) line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw error("cannot write vocabulary file: " + path);
  for (const auto& t : tokens_) out << t << "\n";
}

int32_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int32_t id) const {
  if (id < 0 || id >= size()) throw index_error("vocabulary: id " + std::to_string(id));
  return tokens_[static_cast<size_t>(id)];
}

}  // namespace rtdp
