#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lmkit/tokenizer.hpp"

namespace lmkit {

struct Document {
  std::string id;
  std::string text;
};

/// Reads a directory of plain-text files (sorted by filename); each file is
/// split into documents on blank lines.
std::vector<Document> read_documents_dir(const std::string& dir);

/// One keyword per line; blank lines skipped.
std::vector<std::string> read_blocklist(const std::string& path);

/// Drops every document whose text contains any blocklist keyword under
/// case-insensitive (ASCII) substring match. Order preserved.
std::vector<Document> filter_documents(const std::vector<Document>& docs,
                                       const std::vector<std::string>& blocklist);

/// One document as a list of words, each word a list of subword token ids.
using DocumentTokens = std::vector<std::vector<int32_t>>;

DocumentTokens encode_document(const std::string& text, const Vocab& vocab);

/// Fixed-length pretraining example: [CLS] content... [SEP] [PAD]...
/// attention_mask is 1 through the [SEP].
struct PretrainExample {
  Encoding encoding;
};

struct PackStats {
  uint64_t truncated_words = 0;
  uint64_t content_tokens = 0;
  uint64_t examples = 0;
};

/// Packs documents into examples of exactly max_seq_len tokens. Words are
/// never split across examples; a word that would straddle the boundary
/// starts the next example, and an example never spans two documents. A
/// single word longer than max_seq_len-2 tokens is truncated (counted in
/// stats). max_seq_len must be at least 8.
std::vector<PretrainExample> pack_sequences(const std::vector<DocumentTokens>& docs,
                                            int max_seq_len, PackStats* stats = nullptr);

/// Length-prefixed little-endian binary records, one per example.
void write_shard(const std::string& path, const std::vector<PretrainExample>& examples);
std::vector<PretrainExample> read_shard(const std::string& path);

struct CorpusBuildResult {
  std::vector<std::string> shard_paths;
  PackStats stats;
};

/// Full ingestion pipeline: read, filter, encode, pack, shuffle (seeded),
/// shard. Deterministic given (directory contents, seed).
CorpusBuildResult build_pretrain_shards(const std::string& corpus_dir, const Vocab& vocab,
                                        const std::vector<std::string>& blocklist,
                                        int max_seq_len, int num_shards, uint64_t seed,
                                        const std::string& out_dir);

}  // namespace lmkit
