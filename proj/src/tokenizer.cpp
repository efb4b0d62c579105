#include "lmkit/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>

namespace lmkit {

const std::array<std::string, kNumSpecials>& special_tokens() {
  static const std::array<std::string, kNumSpecials> kSpecials = {"[PAD]", "[UNK]", "[CLS]",
                                                                  "[SEP]", "[MASK]"};
  return kSpecials;
}

Vocab Vocab::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < static_cast<size_t>(kNumSpecials)) {
    throw ConfigError("vocabulary needs at least the five special tokens");
  }
  for (int i = 0; i < kNumSpecials; ++i) {
    if (tokens[static_cast<size_t>(i)] != special_tokens()[static_cast<size_t>(i)]) {
      throw ConfigError("special token mismatch at id " + std::to_string(i));
    }
  }
  Vocab v;
  v.ids_.reserve(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i].empty()) throw ConfigError("empty vocabulary token at id " + std::to_string(i));
    auto [it, inserted] = v.ids_.emplace(tokens[i], static_cast<int32_t>(i));
    if (!inserted) throw ConfigError("duplicate vocabulary token: " + tokens[i]);
  }
  v.tokens_ = std::move(tokens);
  return v;
}

int32_t Vocab::id_of(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? -1 : it->second;
}

std::vector<std::string_view> utf8_chars(std::string_view s) {
  std::vector<std::string_view> out;
  size_t i = 0;
  while (i < s.size()) {
    unsigned char b = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((b & 0x80) == 0x00) {
      len = 1;
    } else if ((b & 0xE0) == 0xC0) {
      len = 2;
    } else if ((b & 0xF0) == 0xE0) {
      len = 3;
    } else if ((b & 0xF8) == 0xF0) {
      len = 4;
    }
    if (i + len > s.size()) len = 1;  // malformed trailing byte
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

namespace {

bool is_ascii_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

bool is_ascii_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace

std::vector<std::string> pre_split(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) {
      words.push_back(std::move(current));
      current.clear();
    }
  };
  size_t i = 0;
  while (i < text.size()) {
    unsigned char b = static_cast<unsigned char>(text[i]);
    if (b < 0x80) {
      if (is_ascii_space(b)) {
        flush();
      } else if (is_ascii_punct(b)) {
        flush();
        words.emplace_back(1, static_cast<char>(b));
      } else {
        current.push_back(static_cast<char>(b));
      }
      ++i;
    } else {
      // Multibyte sequences are always word characters here.
      size_t len = 1;
      if ((b & 0xE0) == 0xC0) {
        len = 2;
      } else if ((b & 0xF0) == 0xE0) {
        len = 3;
      } else if ((b & 0xF8) == 0xF0) {
        len = 4;
      }
      if (i + len > text.size()) len = 1;
      current.append(text.substr(i, len));
      i += len;
    }
  }
  flush();
  return words;
}

Vocab Vocab::build(const std::vector<std::string>& documents, size_t size) {
  if (size < static_cast<size_t>(kNumSpecials)) {
    throw ConfigError("vocabulary size must be at least " + std::to_string(kNumSpecials));
  }
  // Candidate frequencies: whole words, word-initial characters, and
  // ##-prefixed suffixes. std::map keeps the tie order lexicographic.
  std::map<std::string, uint64_t> counts;
  for (const std::string& doc : documents) {
    for (const std::string& word : pre_split(doc)) {
      auto chars = utf8_chars(word);
      if (chars.empty() || chars.size() > kMaxWordChars) continue;
      counts[word] += 1;
      counts[std::string(chars[0])] += 1;
      for (size_t i = 1; i < chars.size(); ++i) {
        counts["##" + std::string(chars[i])] += 1;
      }
      for (size_t i = 1; i + 1 < chars.size(); ++i) {
        counts["##" + std::string(word.substr(chars[i].data() - word.data()))] += 1;
      }
    }
  }
  for (const std::string& s : special_tokens()) counts.erase(s);

  std::vector<std::pair<std::string, uint64_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  std::vector<std::string> tokens(special_tokens().begin(), special_tokens().end());
  for (const auto& [token, count] : ranked) {
    if (tokens.size() >= size) break;
    tokens.push_back(token);
  }
  return from_tokens(std::move(tokens));
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open vocabulary file: " + path);
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write vocabulary file: " + path);
  for (const std::string& t : tokens_) out << t << '\n';
  if (!out) throw IoError("short write to vocabulary file: " + path);
}

std::vector<int32_t> word_pieces(std::string_view word, const Vocab& vocab) {
  auto chars = utf8_chars(word);
  std::vector<int32_t> pieces;
  if (!chars.empty() && chars.size() <= kMaxWordChars) {
    size_t start = 0;
    while (start < chars.size()) {
      int32_t match = -1;
      size_t match_end = start;
      for (size_t end = chars.size(); end > start; --end) {
        // Byte range of code points [start, end).
        const char* from = chars[start].data();
        const char* to = chars[end - 1].data() + chars[end - 1].size();
        std::string piece(from, static_cast<size_t>(to - from));
        if (start > 0) piece = "##" + piece;
        int32_t id = vocab.id_of(piece);
        if (id >= 0) {
          match = id;
          match_end = end;
          break;
        }
      }
      if (match < 0) {
        pieces.clear();
        break;
      }
      pieces.push_back(match);
      start = match_end;
    }
  }
  if (pieces.empty()) pieces.push_back(kUnkId);
  return pieces;
}

Encoding encode(std::string_view text, const Vocab& vocab) {
  Encoding enc;
  int32_t word_index = 0;
  for (const std::string& word : pre_split(text)) {
    for (int32_t id : word_pieces(word, vocab)) {
      enc.token_ids.push_back(id);
      enc.word_ids.push_back(word_index);
      enc.attention_mask.push_back(1);
    }
    ++word_index;
  }
  return enc;
}

std::vector<std::pair<int32_t, int32_t>> word_spans(const Encoding& enc) {
  std::vector<std::pair<int32_t, int32_t>> spans;
  const int32_t n = static_cast<int32_t>(enc.size());
  for (int32_t i = 0; i < n;) {
    if (enc.word_ids[static_cast<size_t>(i)] == kNoWord) {
      ++i;
      continue;
    }
    int32_t j = i + 1;
    while (j < n && enc.word_ids[static_cast<size_t>(j)] == enc.word_ids[static_cast<size_t>(i)]) {
      ++j;
    }
    spans.emplace_back(i, j);
    i = j;
  }
  return spans;
}

std::string decode_words(const Encoding& enc, const Vocab& vocab) {
  std::string out;
  for (size_t i = 0; i < enc.size(); ++i) {
    if (enc.word_ids[i] == kNoWord) continue;
    const std::string& t = vocab.token(enc.token_ids[i]);
    if (t.size() > 2 && t.compare(0, 2, "##") == 0) {
      out += t.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += t;
    }
  }
  return out;
}

}  // namespace lmkit
