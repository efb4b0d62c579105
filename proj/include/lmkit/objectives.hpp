#pragma once

#include <cstdint>
#include <vector>

#include "lmkit/model.hpp"
#include "lmkit/rng.hpp"
#include "lmkit/tokenizer.hpp"

namespace lmkit {

enum class MaskMode { kToken, kWholeWord };

enum class MaskAction : uint8_t { kMask, kRandom, kKeep };

/// Corruption plan for one encoding. Positions are sorted, exclude special
/// tokens and padding, and in whole-word mode always cover complete words.
struct MaskingPlan {
  std::vector<int32_t> positions;
  std::vector<MaskAction> actions;
  std::vector<int32_t> originals;

  bool empty() const { return positions.empty(); }
  size_t size() const { return positions.size(); }
};

/// Selects k = max(1, round(rate * candidates)) positions. Token mode picks
/// positions uniformly without replacement; whole-word mode picks whole
/// words in shuffled order until the covered token count first reaches k.
/// Each selected position gets MASK/RANDOM/KEEP with probability 0.8/0.1/0.1.
/// An encoding without candidates yields an empty plan.
MaskingPlan plan_masking(const Encoding& enc, MaskMode mode, double rate, Rng& rng);

struct MaskedEncoding {
  Encoding corrupted;
  std::vector<int32_t> labels;  // original id at planned positions, else kIgnoreLabel
};

/// Applies a plan: MASK positions get [MASK], RANDOM positions a uniform
/// random non-special id, KEEP positions stay. Throws InputError when the
/// plan does not match the encoding.
MaskedEncoding apply_masking(const Encoding& enc, const MaskingPlan& plan, int32_t vocab_size,
                             Rng& rng);

/// Mean cross-entropy over rows of vocab logits gathered at labeled
/// positions. Throws InputError on zero rows.
double mlm_loss(const Tensor& logits, const std::vector<int32_t>& labels);

/// Result of replaced-token-detection corruption for one encoding.
struct RTDBatch {
  std::vector<int32_t> masked_ids;      // generator input ids
  std::vector<int32_t> corrupted_ids;   // discriminator input ids
  std::vector<int8_t> disc_labels;      // kDiscIgnore exactly at padding
  std::vector<int32_t> gen_targets;     // original ids at planned positions
  std::vector<int32_t> plan_positions;  // positions the targets refer to
};

/// Runs the generator on the MLM-masked input and samples one replacement
/// per planned position from its full softmax (temperature 1). A sample
/// equal to the original is labeled kDiscOriginal.
RTDBatch rtd_corrupt(const Encoding& enc, const TensorMap& weights, const ModelConfig& config,
                     const MaskingPlan& plan, Rng& rng);

/// Batched variant used by the training loop; one generator forward for the
/// whole batch. Per-example results line up with the inputs.
std::vector<RTDBatch> rtd_corrupt_batch(const std::vector<Encoding>& encs,
                                        const std::vector<MaskingPlan>& plans,
                                        const TensorMap& weights, const ModelConfig& config,
                                        Rng& rng, uint64_t dropout_seed, bool train_mode);

/// Assembles the frozen model-level step from per-example corruptions.
ElectraStep make_electra_step(const std::vector<Encoding>& encs,
                              const std::vector<RTDBatch>& rtd, int max_seq_len);

/// Generator MLM loss + lambda * mean binary cross-entropy of the
/// discriminator over non-ignored positions.
double electra_loss(const Tensor& gen_logits, const std::vector<int32_t>& gen_targets,
                    const std::vector<double>& disc_logits,
                    const std::vector<int8_t>& disc_labels, double lambda);

/// Stable binary cross-entropy with logits, y in {0,1}.
double bce_with_logits(double logit, double target);

}  // namespace lmkit
