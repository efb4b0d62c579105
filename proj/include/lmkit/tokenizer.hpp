#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lmkit/errors.hpp"

namespace lmkit {

inline constexpr int32_t kPadId = 0;
inline constexpr int32_t kUnkId = 1;
inline constexpr int32_t kClsId = 2;
inline constexpr int32_t kSepId = 3;
inline constexpr int32_t kMaskId = 4;
inline constexpr int32_t kNumSpecials = 5;

/// word_id sentinel carried by special tokens and padding.
inline constexpr int32_t kNoWord = -1;

/// Longest word (in code points) the matcher will segment; anything longer
/// becomes a single [UNK].
inline constexpr size_t kMaxWordChars = 100;

const std::array<std::string, kNumSpecials>& special_tokens();

/// Immutable subword vocabulary. Ids are positions in the token list; the
/// five specials are pinned to ids 0..4. Safe to share across threads once
/// constructed.
class Vocab {
 public:
  /// Validates and adopts a full token list (specials included, in order).
  static Vocab from_tokens(std::vector<std::string> tokens);

  /// Builds a vocabulary of at most `size` tokens from raw document texts:
  /// the five specials followed by the most frequent candidates among whole
  /// words, word-initial single characters and ##-prefixed word suffixes.
  /// Ties break lexicographically. size must be at least 5.
  static Vocab build(const std::vector<std::string>& documents, size_t size);

  static Vocab load(const std::string& path);
  void save(const std::string& path) const;

  int32_t id_of(std::string_view token) const;  // -1 when absent
  bool contains(std::string_view token) const { return id_of(token) >= 0; }
  const std::string& token(int32_t id) const { return tokens_.at(static_cast<size_t>(id)); }
  int32_t size() const { return static_cast<int32_t>(tokens_.size()); }

 private:
  Vocab() = default;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int32_t> ids_;
};

/// Tokenized sequence. The three vectors always have equal length; subwords
/// of one source word are contiguous and share a word_id, and word_ids of
/// content tokens are monotone non-decreasing starting at 0.
struct Encoding {
  std::vector<int32_t> token_ids;
  std::vector<int32_t> word_ids;
  std::vector<uint8_t> attention_mask;

  size_t size() const { return token_ids.size(); }
};

/// Splits text on whitespace, additionally isolating ASCII punctuation
/// characters as standalone words. UTF-8 multibyte sequences pass through
/// untouched.
std::vector<std::string> pre_split(std::string_view text);

/// Splits a UTF-8 string into code points (leniently: a malformed byte
/// counts as one code point).
std::vector<std::string_view> utf8_chars(std::string_view s);

/// Greedy longest-match-first pieces for one word (no further splitting).
/// Falls back to a single [UNK] when no segmentation exists.
std::vector<int32_t> word_pieces(std::string_view word, const Vocab& vocab);

/// Greedy longest-match-first subword encoding. Words with no valid
/// segmentation become a single [UNK]. No special tokens are added here.
Encoding encode(std::string_view text, const Vocab& vocab);

/// Half-open [start, end) token ranges, one per content word, in order.
std::vector<std::pair<int32_t, int32_t>> word_spans(const Encoding& enc);

/// Re-joins content subwords (stripping ##) with single spaces. Inverse of
/// encode for fully in-vocabulary text.
std::string decode_words(const Encoding& enc, const Vocab& vocab);

}  // namespace lmkit
