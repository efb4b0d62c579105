#include "lmkit/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "lmkit/rng.hpp"

namespace lmkit {

namespace fs = std::filesystem;

std::vector<Document> read_documents_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<Document> docs;
  for (const fs::path& file : files) {
    std::ifstream in(file, std::ios::binary);
    if (!in) throw IoError("cannot open corpus file: " + file.string());
    std::string line;
    std::string block;
    int block_index = 0;
    auto flush = [&] {
      // Trim trailing newline noise; skip whitespace-only blocks.
      if (block.find_first_not_of(" \t\r\n") == std::string::npos) {
        block.clear();
        return;
      }
      docs.push_back({file.filename().string() + "#" + std::to_string(block_index++), block});
      block.clear();
    };
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) {
        flush();
      } else {
        if (!block.empty()) block += '\n';
        block += line;
      }
    }
    flush();
  }
  return docs;
}

std::vector<std::string> read_blocklist(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open blocklist file: " + path);
  std::vector<std::string> keywords;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) keywords.push_back(line);
  }
  return keywords;
}

namespace {

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

}  // namespace

std::vector<Document> filter_documents(const std::vector<Document>& docs,
                                       const std::vector<std::string>& blocklist) {
  std::vector<std::string> needles;
  needles.reserve(blocklist.size());
  for (const std::string& k : blocklist) {
    if (k.empty()) throw ConfigError("blocklist entries must be non-empty");
    needles.push_back(ascii_lower(k));
  }
  std::vector<Document> kept;
  kept.reserve(docs.size());
  for (const Document& doc : docs) {
    std::string haystack = ascii_lower(doc.text);
    bool blocked = false;
    for (const std::string& needle : needles) {
      if (haystack.find(needle) != std::string::npos) {
        blocked = true;
        break;
      }
    }
    if (!blocked) kept.push_back(doc);
  }
  return kept;
}

DocumentTokens encode_document(const std::string& text, const Vocab& vocab) {
  Encoding enc = encode(text, vocab);
  DocumentTokens words;
  for (auto [start, end] : word_spans(enc)) {
    words.emplace_back(enc.token_ids.begin() + start, enc.token_ids.begin() + end);
  }
  return words;
}

std::vector<PretrainExample> pack_sequences(const std::vector<DocumentTokens>& docs,
                                            int max_seq_len, PackStats* stats) {
  if (max_seq_len < 8) throw ConfigError("max_seq_len must be at least 8");
  const size_t capacity = static_cast<size_t>(max_seq_len) - 2;

  PackStats local;
  std::vector<PretrainExample> out;
  std::vector<std::vector<int32_t>> current;
  size_t current_len = 0;

  auto flush = [&] {
    if (current.empty()) return;
    Encoding enc;
    enc.token_ids.reserve(static_cast<size_t>(max_seq_len));
    enc.token_ids.push_back(kClsId);
    enc.word_ids.push_back(kNoWord);
    enc.attention_mask.push_back(1);
    int32_t word_id = 0;
    for (const auto& word : current) {
      for (int32_t id : word) {
        enc.token_ids.push_back(id);
        enc.word_ids.push_back(word_id);
        enc.attention_mask.push_back(1);
      }
      ++word_id;
    }
    enc.token_ids.push_back(kSepId);
    enc.word_ids.push_back(kNoWord);
    enc.attention_mask.push_back(1);
    while (enc.token_ids.size() < static_cast<size_t>(max_seq_len)) {
      enc.token_ids.push_back(kPadId);
      enc.word_ids.push_back(kNoWord);
      enc.attention_mask.push_back(0);
    }
    local.content_tokens += current_len;
    local.examples += 1;
    out.push_back({std::move(enc)});
    current.clear();
    current_len = 0;
  };

  for (const DocumentTokens& doc : docs) {
    for (const std::vector<int32_t>& word : doc) {
      if (word.empty()) continue;
      std::vector<int32_t> w = word;
      if (w.size() > capacity) {
        w.resize(capacity);
        local.truncated_words += 1;
      }
      if (current_len + w.size() > capacity) flush();
      current_len += w.size();
      current.push_back(std::move(w));
    }
    flush();  // examples never span documents
  }
  if (stats) *stats = local;
  return out;
}

namespace {

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_i32(std::string& buf, int32_t v) { put_u32(buf, static_cast<uint32_t>(v)); }

uint32_t get_u32(const std::string& buf, size_t& pos) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) {
    v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)]))
         << (8 * i);
  }
  pos += 4;
  return v;
}

}  // namespace

void write_shard(const std::string& path, const std::vector<PretrainExample>& examples) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write shard: " + path);
  for (const PretrainExample& ex : examples) {
    const Encoding& enc = ex.encoding;
    std::string payload;
    put_u32(payload, static_cast<uint32_t>(enc.size()));
    for (int32_t id : enc.token_ids) put_i32(payload, id);
    for (int32_t w : enc.word_ids) put_i32(payload, w);
    for (uint8_t m : enc.attention_mask) payload.push_back(static_cast<char>(m));
    std::string record;
    put_u32(record, static_cast<uint32_t>(payload.size()));
    out.write(record.data(), static_cast<std::streamsize>(record.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  if (!out) throw IoError("short write to shard: " + path);
}

std::vector<PretrainExample> read_shard(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open shard: " + path);
  std::string contents((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  std::vector<PretrainExample> examples;
  size_t pos = 0;
  while (pos < contents.size()) {
    if (pos + 4 > contents.size()) throw CorruptionError("truncated record header in " + path);
    uint32_t len = get_u32(contents, pos);
    if (pos + len > contents.size()) throw CorruptionError("truncated record in " + path);
    size_t end = pos + len;
    if (len < 4) throw CorruptionError("record too small in " + path);
    uint32_t n = get_u32(contents, pos);
    if (len != 4 + n * 9) throw CorruptionError("record size mismatch in " + path);
    Encoding enc;
    enc.token_ids.resize(n);
    enc.word_ids.resize(n);
    enc.attention_mask.resize(n);
    for (uint32_t i = 0; i < n; ++i) enc.token_ids[i] = static_cast<int32_t>(get_u32(contents, pos));
    for (uint32_t i = 0; i < n; ++i) enc.word_ids[i] = static_cast<int32_t>(get_u32(contents, pos));
    for (uint32_t i = 0; i < n; ++i) {
      enc.attention_mask[i] = static_cast<uint8_t>(contents[pos++]);
    }
    if (pos != end) throw CorruptionError("record overrun in " + path);
    examples.push_back({std::move(enc)});
  }
  return examples;
}

CorpusBuildResult build_pretrain_shards(const std::string& corpus_dir, const Vocab& vocab,
                                        const std::vector<std::string>& blocklist,
                                        int max_seq_len, int num_shards, uint64_t seed,
                                        const std::string& out_dir) {
  if (num_shards < 1) throw ConfigError("num_shards must be positive");
  std::vector<Document> docs = filter_documents(read_documents_dir(corpus_dir), blocklist);

  std::vector<DocumentTokens> tokenized;
  tokenized.reserve(docs.size());
  for (const Document& doc : docs) tokenized.push_back(encode_document(doc.text, vocab));

  CorpusBuildResult result;
  std::vector<PretrainExample> examples = pack_sequences(tokenized, max_seq_len, &result.stats);

  Rng rng(mix_seed(seed, 0x5ca4d));
  rng.shuffle(examples);

  fs::create_directories(out_dir);
  const size_t per_shard = examples.size() / static_cast<size_t>(num_shards);
  const size_t remainder = examples.size() % static_cast<size_t>(num_shards);
  size_t offset = 0;
  for (int s = 0; s < num_shards; ++s) {
    size_t count = per_shard + (static_cast<size_t>(s) < remainder ? 1 : 0);
    char name[32];
    std::snprintf(name, sizeof(name), "shard-%04d.bin", s);
    std::string path = (fs::path(out_dir) / name).string();
    std::vector<PretrainExample> slice(examples.begin() + static_cast<std::ptrdiff_t>(offset),
                                       examples.begin() + static_cast<std::ptrdiff_t>(offset + count));
    write_shard(path, slice);
    result.shard_paths.push_back(path);
    offset += count;
  }
  return result;
}

}  // namespace lmkit
