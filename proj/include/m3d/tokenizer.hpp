#pragma once

// Hashed-word tokenizer: whitespace-split words, FNV-1a (64-bit) into the
// non-special id range. Pure function of (text, VocabSpec).

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "m3d/error.hpp"

namespace m3d {

using TokenId = std::size_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr std::size_t kNumSpecialTokens = 3;

struct VocabSpec {
  std::size_t vocab_size = 4096;

  void validate() const {
    if (vocab_size < 8) throw ParameterError("vocab_size must be at least 8");
  }
  std::size_t buckets() const { return vocab_size - kNumSpecialTokens; }
};

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline TokenId word_id(std::string_view word, const VocabSpec& spec) {
  return static_cast<TokenId>(fnv1a64(word) % spec.buckets()) + kNumSpecialTokens;
}

inline std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> words;
  std::size_t i = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
  };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) words.push_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

/// BOS + word ids + EOS. Over-long inputs keep the leading words and drop the
/// tail, so EOS is always the last token and the length never exceeds max_len.
inline TokenSequence encode(std::string_view text, const VocabSpec& spec, std::size_t max_len) {
  spec.validate();
  if (max_len < 2) throw ParameterError("max_len must be at least 2");
  const auto words = split_words(text);
  const std::size_t keep = std::min(words.size(), max_len - 2);
  TokenSequence ids;
  ids.reserve(keep + 2);
  ids.push_back(kBosId);
  for (std::size_t i = 0; i < keep; ++i) ids.push_back(word_id(words[i], spec));
  ids.push_back(kEosId);
  return ids;
}

inline std::vector<TokenSequence> encode_batch(const std::vector<std::string>& texts,
                                               const VocabSpec& spec, std::size_t max_len) {
  std::vector<TokenSequence> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(encode(t, spec, max_len));
  return out;
}

}  // namespace m3d
