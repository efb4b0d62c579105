#include "lmkit/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "model_internal.hpp"

namespace lmkit {

MaskingPlan plan_masking(const Encoding& enc, MaskMode mode, double rate, Rng& rng) {
  if (!(rate > 0.0 && rate < 1.0)) throw ConfigError("mask rate must be in (0, 1)");
  const size_t n = enc.size();
  if (enc.word_ids.size() != n || enc.attention_mask.size() != n) {
    throw InputError("encoding field lengths disagree");
  }

  std::vector<int32_t> candidates;
  for (size_t i = 0; i < n; ++i) {
    if (enc.word_ids[i] != kNoWord && enc.attention_mask[i]) {
      candidates.push_back(static_cast<int32_t>(i));
    }
  }
  MaskingPlan plan;
  if (candidates.empty()) return plan;

  const size_t k = std::max<size_t>(
      1, static_cast<size_t>(std::llround(rate * static_cast<double>(candidates.size()))));

  if (mode == MaskMode::kToken) {
    rng.shuffle(candidates);
    candidates.resize(std::min(k, candidates.size()));
    plan.positions = std::move(candidates);
  } else {
    // Select whole words in shuffled order until the covered token count
    // first reaches k. On single-subword text this coincides exactly with
    // token mode under the same RNG state.
    std::vector<std::pair<int32_t, int32_t>> words = word_spans(enc);
    rng.shuffle(words);
    size_t covered = 0;
    for (const auto& [start, end] : words) {
      if (covered >= k) break;
      for (int32_t p = start; p < end; ++p) plan.positions.push_back(p);
      covered += static_cast<size_t>(end - start);
    }
  }
  std::sort(plan.positions.begin(), plan.positions.end());

  plan.actions.reserve(plan.positions.size());
  plan.originals.reserve(plan.positions.size());
  for (int32_t p : plan.positions) {
    double u = rng.uniform();
    MaskAction action = u < 0.8   ? MaskAction::kMask
                        : u < 0.9 ? MaskAction::kRandom
                                  : MaskAction::kKeep;
    plan.actions.push_back(action);
    plan.originals.push_back(enc.token_ids[static_cast<size_t>(p)]);
  }
  return plan;
}

MaskedEncoding apply_masking(const Encoding& enc, const MaskingPlan& plan, int32_t vocab_size,
                             Rng& rng) {
  if (plan.positions.size() != plan.actions.size() ||
      plan.positions.size() != plan.originals.size()) {
    throw InputError("masking plan fields disagree");
  }
  MaskedEncoding out;
  out.corrupted = enc;
  out.labels.assign(enc.size(), kIgnoreLabel);
  int32_t previous = -1;
  for (size_t i = 0; i < plan.positions.size(); ++i) {
    int32_t p = plan.positions[i];
    if (p <= previous || p >= static_cast<int32_t>(enc.size())) {
      throw InputError("masking plan positions must be sorted and in range");
    }
    previous = p;
    if (enc.token_ids[static_cast<size_t>(p)] != plan.originals[i]) {
      throw InputError("masking plan does not match the encoding");
    }
    if (enc.word_ids[static_cast<size_t>(p)] == kNoWord ||
        !enc.attention_mask[static_cast<size_t>(p)]) {
      throw InputError("masking plan touches a special or padded position");
    }
    switch (plan.actions[i]) {
      case MaskAction::kMask:
        out.corrupted.token_ids[static_cast<size_t>(p)] = kMaskId;
        break;
      case MaskAction::kRandom: {
        if (vocab_size <= kNumSpecials) {
          throw ConfigError("vocabulary has no non-special tokens to sample");
        }
        int32_t id = kNumSpecials + static_cast<int32_t>(rng.uniform_below(
                                        static_cast<uint64_t>(vocab_size - kNumSpecials)));
        out.corrupted.token_ids[static_cast<size_t>(p)] = id;
        break;
      }
      case MaskAction::kKeep:
        break;
    }
    out.labels[static_cast<size_t>(p)] = plan.originals[i];
  }
  return out;
}

double mlm_loss(const Tensor& logits, const std::vector<int32_t>& labels) {
  if (logits.rank() != 2) throw InputError("mlm_loss expects a rank-2 logits tensor");
  Eigen::Map<const detail::RowMat> m(logits.data.data(), logits.rows(), logits.cols());
  detail::RowMat copy = m;
  return detail::cross_entropy_rows(copy, labels, nullptr);
}

double bce_with_logits(double logit, double target) {
  return std::max(logit, 0.0) + std::log1p(std::exp(-std::abs(logit))) - target * logit;
}

std::vector<RTDBatch> rtd_corrupt_batch(const std::vector<Encoding>& encs,
                                        const std::vector<MaskingPlan>& plans,
                                        const TensorMap& weights, const ModelConfig& config,
                                        Rng& rng, uint64_t dropout_seed, bool train_mode) {
  if (encs.size() != plans.size()) throw InputError("one masking plan per encoding required");
  if (encs.empty()) return {};

  std::vector<Encoding> masked;
  masked.reserve(encs.size());
  for (size_t e = 0; e < encs.size(); ++e) {
    masked.push_back(apply_masking(encs[e], plans[e], config.vocab_size, rng).corrupted);
  }
  Batch batch = make_batch(masked, config.max_seq_len);

  // Rows to sample, ordered by (example, position).
  std::vector<int32_t> rows;
  for (size_t e = 0; e < plans.size(); ++e) {
    for (int32_t p : plans[e].positions) {
      rows.push_back(static_cast<int32_t>(e) * batch.seq_len + p);
    }
  }

  detail::RowMat logits;
  if (!rows.empty()) {
    ForwardTrace trace = encoder_forward(weights, config, "gen", batch, train_mode,
                                         detail::gen_stream_seed(dropout_seed));
    logits = detail::mlm_head_forward(weights, trace, "gen", rows, nullptr);
  }

  std::vector<RTDBatch> out(encs.size());
  size_t row = 0;
  for (size_t e = 0; e < encs.size(); ++e) {
    const Encoding& enc = encs[e];
    RTDBatch& r = out[e];
    r.masked_ids = masked[e].token_ids;
    r.corrupted_ids = enc.token_ids;
    r.plan_positions = plans[e].positions;
    r.gen_targets = plans[e].originals;
    r.disc_labels.assign(enc.size(), kDiscOriginal);
    for (size_t i = 0; i < enc.size(); ++i) {
      if (!enc.attention_mask[i]) r.disc_labels[i] = kDiscIgnore;
    }
    for (size_t i = 0; i < plans[e].positions.size(); ++i, ++row) {
      // Inverse-CDF sample from the generator softmax at temperature 1.
      double m = logits.row(static_cast<Eigen::Index>(row)).maxCoeff();
      Eigen::Array<double, 1, Eigen::Dynamic> probs =
          (logits.row(static_cast<Eigen::Index>(row)).array() - m).exp();
      probs /= probs.sum();
      double u = rng.uniform();
      int32_t sampled = config.vocab_size - 1;
      double cum = 0.0;
      for (int32_t v = 0; v < config.vocab_size; ++v) {
        cum += probs[v];
        if (u < cum) {
          sampled = v;
          break;
        }
      }
      int32_t p = plans[e].positions[i];
      r.corrupted_ids[static_cast<size_t>(p)] = sampled;
      if (sampled != plans[e].originals[i]) {
        r.disc_labels[static_cast<size_t>(p)] = kDiscReplaced;
      }
    }
  }
  return out;
}

RTDBatch rtd_corrupt(const Encoding& enc, const TensorMap& weights, const ModelConfig& config,
                     const MaskingPlan& plan, Rng& rng) {
  return rtd_corrupt_batch({enc}, {plan}, weights, config, rng, 0, false).at(0);
}

ElectraStep make_electra_step(const std::vector<Encoding>& encs, const std::vector<RTDBatch>& rtd,
                              int max_seq_len) {
  if (encs.size() != rtd.size() || encs.empty()) {
    throw InputError("make_electra_step: input sizes disagree");
  }
  std::vector<Encoding> masked(encs.size());
  std::vector<Encoding> corrupted(encs.size());
  for (size_t e = 0; e < encs.size(); ++e) {
    masked[e] = encs[e];
    masked[e].token_ids = rtd[e].masked_ids;
    corrupted[e] = encs[e];
    corrupted[e].token_ids = rtd[e].corrupted_ids;
  }
  ElectraStep step;
  step.masked = make_batch(masked, max_seq_len);
  step.corrupted = make_batch(corrupted, max_seq_len);
  const int T = step.masked.seq_len;
  step.gen_labels.assign(static_cast<size_t>(step.masked.positions()), kIgnoreLabel);
  step.disc_labels.assign(static_cast<size_t>(step.masked.positions()), kDiscIgnore);
  for (size_t e = 0; e < encs.size(); ++e) {
    const size_t base = e * static_cast<size_t>(T);
    for (size_t i = 0; i < rtd[e].disc_labels.size(); ++i) {
      step.disc_labels[base + i] = rtd[e].disc_labels[i];
    }
    for (size_t i = 0; i < rtd[e].plan_positions.size(); ++i) {
      step.gen_labels[base + static_cast<size_t>(rtd[e].plan_positions[i])] =
          rtd[e].gen_targets[i];
    }
  }
  return step;
}

double electra_loss(const Tensor& gen_logits, const std::vector<int32_t>& gen_targets,
                    const std::vector<double>& disc_logits,
                    const std::vector<int8_t>& disc_labels, double lambda) {
  if (lambda < 0) throw ConfigError("lambda must be non-negative");
  double gen = mlm_loss(gen_logits, gen_targets);
  if (disc_logits.size() != disc_labels.size()) {
    throw InputError("discriminator logits/labels length mismatch");
  }
  double bce = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < disc_logits.size(); ++i) {
    if (disc_labels[i] == kDiscIgnore) continue;
    bce += bce_with_logits(disc_logits[i], disc_labels[i] == kDiscReplaced ? 1.0 : 0.0);
    ++count;
  }
  if (count == 0) throw InputError("discriminator loss needs at least one labeled position");
  return gen + lambda * bce / static_cast<double>(count);
}

}  // namespace lmkit
