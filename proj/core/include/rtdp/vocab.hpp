#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rtdp/errors.hpp"

namespace rtdp {

// Token <-> id mapping with the five reserved ids pinned at the front.
// Built from corpus frequencies or loaded from a one-token-per-line file, so
// an externally trained tokenizer vocabulary can be plugged in.
class Vocabulary {
 public:
  static constexpr int32_t kPad = 0;
  static constexpr int32_t kCls = 1;
  static constexpr int32_t kSep = 2;
  static constexpr int32_t kMask = 3;
  static constexpr int32_t kUnk = 4;
  static constexpr int32_t kReservedCount = 5;
  static const std::array<const char*, 5>& reserved_tokens();

  // Most frequent whitespace-delimited units, ties broken lexicographically.
  static Vocabulary build(std::istream& corpus, int64_t target_size);
  static Vocabulary build(const std::vector<std::string>& lines, int64_t target_size);

  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load_file(const std::string& path);
  void save_file(const std::string& path) const;

  int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
  // Unknown units map to kUnk.
  int32_t id(std::string_view token) const;
  const std::string& token(int32_t id) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int32_t> ids_;
};

std::vector<std::string> split_units(std::string_view line);

}  // namespace rtdp
