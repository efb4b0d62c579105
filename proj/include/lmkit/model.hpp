#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "lmkit/corpus.hpp"
#include "lmkit/tensor.hpp"

namespace lmkit {

enum class Arch { kBert, kElectra };

Arch arch_from_string(std::string_view s);
std::string to_string(Arch arch);

/// Transformer encoder hyperparameters. ffn_dim of 0 means 4*hidden.
struct ModelConfig {
  int layers = 2;
  int hidden = 64;
  int heads = 2;
  int ffn_dim = 0;
  int vocab_size = 0;
  int max_seq_len = 128;
  double dropout = 0.1;

  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden; }
  void validate() const;
};

/// Generator tower dimensions for the ELECTRA objective: roughly one third
/// of the discriminator width, rounded so hidden stays divisible by heads.
struct GeneratorDims {
  int layers;
  int hidden;
  int heads;
  int ffn;
};

GeneratorDims generator_dims(const ModelConfig& config);

/// Flattened batch of padded sequences. Row-major (size x seq_len); padding
/// uses token id [PAD], word id kNoWord and attention 0.
struct Batch {
  int size = 0;
  int seq_len = 0;
  std::vector<int32_t> token_ids;
  std::vector<int32_t> word_ids;
  std::vector<uint8_t> attention_mask;

  int64_t positions() const { return static_cast<int64_t>(size) * seq_len; }
};

/// Pads encodings to a common length (the longest one, capped and validated
/// against max_seq_len).
Batch make_batch(const std::vector<Encoding>& encodings, int max_seq_len);

enum class HeadKind { kMlm, kClsClassify, kElectraPoolClassify, kRtdDiscriminate, kTokenTag };

/// All parameters for an architecture, pretraining heads included. Matrices
/// are drawn from a truncated normal (sigma 0.02, clipped at 2 sigma);
/// biases and layer-norm shifts start at zero, layer-norm gains at one.
/// Deterministic given (arch, config, seed).
TensorMap init_weights(Arch arch, const ModelConfig& config, uint64_t seed);

/// Fresh task-head parameters for fine-tuning.
TensorMap init_head(HeadKind head, const ModelConfig& config, int classes, uint64_t seed);

/// Copies the embeddings plus the task tower out of a pretrained map and
/// attaches a fresh head: BERT fine-tunes its encoder, ELECTRA its
/// discriminator. Pretraining-only tensors are dropped.
TensorMap finetune_weights(const TensorMap& pretrained, Arch arch, const ModelConfig& config,
                           HeadKind head, int classes, uint64_t seed);

/// Encoder tower to run: "encoder" (BERT), "disc" or "gen" (ELECTRA).
std::string task_scope(Arch arch);

/// Activations retained for the backward pass. final_hidden is row-major
/// (size*seq_len) x width.
struct ForwardTrace {
  int batch = 0;
  int seq_len = 0;
  int width = 0;
  std::vector<double> final_hidden;

  struct Detail;
  std::shared_ptr<Detail> detail;

  double hidden_at(int64_t position, int dim) const {
    return final_hidden[static_cast<size_t>(position) * width + dim];
  }
};

/// Runs one encoder tower. Dropout is active only in train mode and is
/// fully determined by dropout_seed.
ForwardTrace encoder_forward(const TensorMap& weights, const ModelConfig& config,
                             std::string_view scope, const Batch& batch, bool train_mode,
                             uint64_t dropout_seed);

/// Per-sequence class logits read from position 0 ([CLS]) of each sequence.
Tensor cls_classify_logits(const ForwardTrace& trace, const TensorMap& weights);

/// Per-position affine+GELU, mean over unpadded positions, then affine.
Tensor electra_pool_classify_logits(const ForwardTrace& trace, const TensorMap& weights,
                                    const Batch& batch);

/// Per-position vocab logits (tied output embeddings). scope "encoder" uses
/// the BERT head names, "gen" the generator head names.
Tensor mlm_logits(const ForwardTrace& trace, const TensorMap& weights, std::string_view scope);

/// One logit per position: positive means "replaced".
std::vector<double> rtd_logits(const ForwardTrace& trace, const TensorMap& weights);

/// Class logits at the first subword of every content word.
struct TokenTagLogits {
  Tensor logits;                        // n_words x classes
  std::vector<int32_t> token_positions; // flat position of each word's first subword
  std::vector<int32_t> sequence_index;  // which batch row each word belongs to
};
TokenTagLogits token_tag_logits(const ForwardTrace& trace, const TensorMap& weights,
                                const Batch& batch);

/// Positions (flat, batch-major) of first subwords, in order.
std::vector<int32_t> first_subword_positions(const Batch& batch);

inline constexpr int32_t kIgnoreLabel = -1;

/// Discriminator position labels.
inline constexpr int8_t kDiscOriginal = 0;
inline constexpr int8_t kDiscReplaced = 1;
inline constexpr int8_t kDiscIgnore = -1;

/// Frozen corruption for one batch of the ELECTRA objective. The sampled
/// replacements are inputs here, not functions of the weights, so the joint
/// loss is differentiable and no gradient flows through the sampling step.
struct ElectraStep {
  Batch masked;                      // generator input (after MLM corruption)
  std::vector<int32_t> gen_labels;   // original ids at planned positions, else kIgnoreLabel
  Batch corrupted;                   // discriminator input (samples spliced into originals)
  std::vector<int8_t> disc_labels;   // kDiscOriginal / kDiscReplaced / kDiscIgnore
};

struct GradResult {
  double loss = 0.0;
  TensorMap grads;  // same names and shapes as the weights
  // d(loss)/d(final hidden states) of the tower the loss reads, flattened
  // like ForwardTrace::final_hidden. For the ELECTRA joint loss this is the
  // discriminator tower.
  std::vector<double> d_final_hidden;
  // ELECTRA parts (zero for other losses).
  double gen_loss = 0.0;
  double disc_bce = 0.0;
};

/// Masked-LM loss and exact reverse-mode gradients. labels uses kIgnoreLabel
/// outside planned positions. Throws InputError when nothing is labeled.
GradResult mlm_gradients(const TensorMap& weights, const ModelConfig& config, const Batch& masked,
                         const std::vector<int32_t>& labels, bool train_mode,
                         uint64_t dropout_seed);
double mlm_loss_value(const TensorMap& weights, const ModelConfig& config, const Batch& masked,
                      const std::vector<int32_t>& labels, bool train_mode, uint64_t dropout_seed);

/// Joint ELECTRA loss: generator MLM + lambda * discriminator BCE.
GradResult electra_gradients(const TensorMap& weights, const ModelConfig& config,
                             const ElectraStep& step, double lambda, bool train_mode,
                             uint64_t dropout_seed);
double electra_loss_value(const TensorMap& weights, const ModelConfig& config,
                          const ElectraStep& step, double lambda, bool train_mode,
                          uint64_t dropout_seed);

/// Sequence classification (softmax cross-entropy, mean over batch) through
/// either classification head.
GradResult classify_gradients(const TensorMap& weights, const ModelConfig& config, Arch arch,
                              HeadKind head, const Batch& batch,
                              const std::vector<int32_t>& labels, bool train_mode,
                              uint64_t dropout_seed);
double classify_loss_value(const TensorMap& weights, const ModelConfig& config, Arch arch,
                           HeadKind head, const Batch& batch, const std::vector<int32_t>& labels,
                           bool train_mode, uint64_t dropout_seed);

/// Word-level tagging loss at first subwords. word_labels is flattened in
/// first_subword_positions order; kIgnoreLabel entries are skipped.
GradResult token_tag_gradients(const TensorMap& weights, const ModelConfig& config, Arch arch,
                               const Batch& batch, const std::vector<int32_t>& word_labels,
                               bool train_mode, uint64_t dropout_seed);
double token_tag_loss_value(const TensorMap& weights, const ModelConfig& config, Arch arch,
                            const Batch& batch, const std::vector<int32_t>& word_labels,
                            bool train_mode, uint64_t dropout_seed);

}  // namespace lmkit
