#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "lmkit/model.hpp"
#include "lmkit/objectives.hpp"
#include "lmkit/rng.hpp"

using namespace lmkit;

namespace {

ModelConfig tiny_config(int vocab, int dropout_pct = 0) {
  ModelConfig cfg;
  cfg.layers = 2;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 0;  // 4x
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 16;
  cfg.dropout = dropout_pct / 100.0;
  return cfg;
}

// Two sequences with CLS/SEP framing, multi-subword words and padding.
Batch tiny_batch(int vocab) {
  auto enc = [&](std::vector<int32_t> ids, std::vector<int32_t> words) {
    Encoding e;
    e.token_ids = std::move(ids);
    e.word_ids = std::move(words);
    e.attention_mask.assign(e.token_ids.size(), 1);
    return e;
  };
  int32_t a = 5 % vocab, b = 6 % vocab, c = 7 % vocab, d = 8 % vocab;
  Encoding e1 = enc({kClsId, a, b, c, d, kSepId}, {kNoWord, 0, 0, 1, 2, kNoWord});
  Encoding e2 = enc({kClsId, d, c, kSepId}, {kNoWord, 0, 1, kNoWord});
  return make_batch({e1, e2}, 16);
}

struct FdFailure {
  std::string tensor;
  size_t index = 0;
  double analytic = 0, numeric = 0;
};

// Central finite differences (h = 1e-5) against the analytic gradients.
// The denominator floor covers FD's own cancellation noise, which scales
// with the loss magnitude: |L| * eps / h per evaluation.
int check_gradients(TensorMap& weights, const TensorMap& grads,
                    const std::function<double()>& loss, FdFailure* first, double tol = 1e-4) {
  const double h = 1e-5;
  const double floor = std::max(1e-6, std::abs(loss()) * 1e-5);
  int failures = 0;
  for (auto& [name, w] : weights) {
    const Tensor& g = grads.at(name);
    for (size_t i = 0; i < w.data.size(); ++i) {
      double orig = w.data[i];
      w.data[i] = orig + h;
      double lp = loss();
      w.data[i] = orig - h;
      double lm = loss();
      w.data[i] = orig;
      double fd = (lp - lm) / (2 * h);
      double an = g.data[i];
      double denom = std::max({std::abs(fd), std::abs(an), floor});
      if (std::abs(fd - an) / denom > tol) {
        if (failures == 0 && first) *first = {name, i, an, fd};
        ++failures;
      }
    }
  }
  return failures;
}

void report(int failures, const FdFailure& f) {
  if (failures > 0) {
    MESSAGE("first mismatch at " << f.tensor << "[" << f.index << "]: analytic " << f.analytic
                                 << " vs numeric " << f.numeric);
  }
  CHECK(failures == 0);
}

std::vector<int32_t> mlm_labels_for(const Batch& batch, int stride = 3) {
  // Label every stride-th content position with its own token id.
  std::vector<int32_t> labels(batch.token_ids.size(), kIgnoreLabel);
  int seen = 0;
  for (size_t i = 0; i < batch.token_ids.size(); ++i) {
    if (batch.word_ids[i] == kNoWord || !batch.attention_mask[i]) continue;
    if (seen++ % stride == 0) labels[i] = batch.token_ids[i];
  }
  return labels;
}

}  // namespace

TEST_CASE("init_weights is deterministic and respects init rules") {
  ModelConfig cfg = tiny_config(23);
  TensorMap a = init_weights(Arch::kBert, cfg, 11);
  TensorMap b = init_weights(Arch::kBert, cfg, 11);
  REQUIRE(same_names_and_shapes(a, b));
  for (auto ia = a.begin(), ib = b.begin(); ia != a.end(); ++ia, ++ib) {
    CHECK(ia->second.data == ib->second.data);
  }
  TensorMap c = init_weights(Arch::kBert, cfg, 12);
  CHECK(c.at("embeddings.word").data != a.at("embeddings.word").data);

  for (const auto& [name, t] : a) {
    CHECK(t.all_finite());
    if (name.ends_with(".gain")) {
      for (double x : t.data) CHECK(x == 1.0);
    }
    if (name.ends_with(".bias") || name.ends_with(".b") || name.ends_with("_bias")) {
      for (double x : t.data) CHECK(x == 0.0);
    }
  }
}

TEST_CASE("init statistics match the truncated normal") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 128;
  cfg.heads = 2;
  cfg.vocab_size = 512;
  cfg.max_seq_len = 8;
  TensorMap w = init_weights(Arch::kBert, cfg, 3);
  const Tensor& emb = w.at("embeddings.word");  // 512*128 = 65536 samples
  double mean = 0;
  for (double x : emb.data) {
    CHECK(std::abs(x) <= 0.04);  // clipped at 2 sigma
    mean += x;
  }
  mean /= static_cast<double>(emb.data.size());
  double var = 0;
  for (double x : emb.data) var += (x - mean) * (x - mean);
  var /= static_cast<double>(emb.data.size());
  CHECK(std::abs(mean) < 0.005);
  CHECK(std::sqrt(var) > 0.015);
  CHECK(std::sqrt(var) < 0.025);
}

TEST_CASE("forward shape contract and eval determinism") {
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  Batch batch = tiny_batch(cfg.vocab_size);
  ForwardTrace t1 = encoder_forward(w, cfg, "encoder", batch, false, 0);
  CHECK(t1.batch == 2);
  CHECK(t1.seq_len == batch.seq_len);
  CHECK(t1.width == cfg.hidden);
  CHECK(t1.final_hidden.size() == static_cast<size_t>(batch.positions() * cfg.hidden));

  ForwardTrace t2 = encoder_forward(w, cfg, "encoder", batch, false, 99);
  CHECK(t1.final_hidden == t2.final_hidden);  // dropout seed ignored in eval mode
}

TEST_CASE("forward rejects bad inputs") {
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  Batch batch = tiny_batch(cfg.vocab_size);
  batch.token_ids[1] = 23;  // out of range
  CHECK_THROWS_AS(encoder_forward(w, cfg, "encoder", batch, false, 0), InputError);

  Batch long_batch = tiny_batch(cfg.vocab_size);
  long_batch.seq_len = 99;
  CHECK_THROWS_AS(encoder_forward(w, cfg, "encoder", long_batch, false, 0), InputError);
}

TEST_CASE("padding positions cannot influence real positions") {
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  Batch batch = tiny_batch(cfg.vocab_size);
  ForwardTrace t1 = encoder_forward(w, cfg, "encoder", batch, false, 0);

  Batch mutated = batch;
  // last position of sequence 2 is padding
  size_t pad_pos = static_cast<size_t>(batch.positions()) - 1;
  REQUIRE(mutated.attention_mask[pad_pos] == 0);
  mutated.token_ids[pad_pos] = 9;
  ForwardTrace t2 = encoder_forward(w, cfg, "encoder", mutated, false, 0);

  for (int64_t p = 0; p < batch.positions(); ++p) {
    if (!batch.attention_mask[static_cast<size_t>(p)]) continue;
    for (int k = 0; k < cfg.hidden; ++k) {
      CHECK(t1.hidden_at(p, k) == t2.hidden_at(p, k));
    }
  }

  // electra_pool_classify is also invariant to padded values
  TensorMap head = init_head(HeadKind::kElectraPoolClassify, cfg, 3, 7);
  TensorMap pool_w = w;
  for (auto& [k, v] : head) pool_w.emplace(k, v);
  Tensor l1 = electra_pool_classify_logits(t1, pool_w, batch);
  Tensor l2 = electra_pool_classify_logits(t2, pool_w, mutated);
  CHECK(l1.data == l2.data);
}

TEST_CASE("layer norm output is standardized before gain and shift") {
  // The final tower op is a layer norm whose gain is 1 and bias 0 at init,
  // so the final hidden rows must come out standardized.
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  Batch batch = tiny_batch(cfg.vocab_size);
  ForwardTrace trace = encoder_forward(w, cfg, "encoder", batch, false, 0);
  for (int64_t p = 0; p < batch.positions(); ++p) {
    double mean = 0;
    for (int k = 0; k < cfg.hidden; ++k) mean += trace.hidden_at(p, k);
    mean /= cfg.hidden;
    double var = 0;
    for (int k = 0; k < cfg.hidden; ++k) {
      double d = trace.hidden_at(p, k) - mean;
      var += d * d;
    }
    var /= cfg.hidden;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("token_tag head predicts once per word at first subwords") {
  Encoding e;
  e.token_ids = {kClsId, 9, 10, 11, kSepId};
  e.word_ids = {kNoWord, 0, 0, 1, kNoWord};
  e.attention_mask = {1, 1, 1, 1, 1};
  Batch batch = make_batch({e}, 8);
  auto positions = first_subword_positions(batch);
  REQUIRE(positions.size() == 2);
  CHECK(positions[0] == 1);
  CHECK(positions[1] == 3);

  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  TensorMap head = init_head(HeadKind::kTokenTag, cfg, 4, 7);
  for (auto& [k, v] : head) w.emplace(k, v);
  ForwardTrace trace = encoder_forward(w, cfg, "encoder", batch, false, 0);
  TokenTagLogits logits = token_tag_logits(trace, w, batch);
  CHECK(logits.logits.rows() == 2);
  CHECK(logits.logits.cols() == 4);
  CHECK(logits.token_positions == positions);
}

TEST_CASE("property: token_tag covers every word exactly once under random fanout") {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    Encoding e;
    e.token_ids.push_back(kClsId);
    e.word_ids.push_back(kNoWord);
    size_t n_words = 1 + rng.uniform_below(6);
    for (size_t w = 0; w < n_words; ++w) {
      size_t fanout = 1 + rng.uniform_below(4);
      for (size_t i = 0; i < fanout; ++i) {
        e.token_ids.push_back(5);
        e.word_ids.push_back(static_cast<int32_t>(w));
      }
    }
    e.token_ids.push_back(kSepId);
    e.word_ids.push_back(kNoWord);
    e.attention_mask.assign(e.token_ids.size(), 1);
    Batch batch = make_batch({e}, 64);
    auto positions = first_subword_positions(batch);
    CHECK(positions.size() == n_words);
    // each position opens a distinct word, in order
    for (size_t i = 0; i < positions.size(); ++i) {
      CHECK(batch.word_ids[static_cast<size_t>(positions[i])] == static_cast<int32_t>(i));
    }
  }
}

TEST_CASE("cls head reads only position 0") {
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  TensorMap head = init_head(HeadKind::kClsClassify, cfg, 3, 7);
  for (auto& [k, v] : head) w.emplace(k, v);
  Batch batch = tiny_batch(cfg.vocab_size);
  GradResult r = classify_gradients(w, cfg, Arch::kBert, HeadKind::kClsClassify, batch, {0, 2},
                                    false, 0);
  Tensor logits = cls_classify_logits(encoder_forward(w, cfg, "encoder", batch, false, 0), w);
  CHECK(logits.rows() == 2);
  CHECK(logits.cols() == 3);
  // loss gradient touches the final hidden states only at position 0 of
  // each sequence
  for (int b = 0; b < batch.size; ++b) {
    for (int t = 0; t < batch.seq_len; ++t) {
      double norm = 0;
      for (int k = 0; k < cfg.hidden; ++k) {
        double v = r.d_final_hidden[(static_cast<size_t>(b) * batch.seq_len + t) * cfg.hidden + k];
        norm += v * v;
      }
      if (t == 0) {
        CHECK(norm > 0);
      } else {
        CHECK(norm == 0);
      }
    }
  }
}

TEST_CASE("gradient check: MLM loss (BERT)") {
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  Batch batch = tiny_batch(cfg.vocab_size);
  std::vector<int32_t> labels = mlm_labels_for(batch, 2);
  GradResult r = mlm_gradients(w, cfg, batch, labels, false, 0);
  CHECK(std::isfinite(r.loss));
  REQUIRE(same_names_and_shapes(r.grads, w));
  FdFailure f;
  int failures = check_gradients(
      w, r.grads, [&] { return mlm_loss_value(w, cfg, batch, labels, false, 0); }, &f);
  report(failures, f);
}

TEST_CASE("gradient check: MLM loss with dropout active") {
  ModelConfig cfg = tiny_config(23, 20);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  Batch batch = tiny_batch(cfg.vocab_size);
  std::vector<int32_t> labels = mlm_labels_for(batch, 2);
  const uint64_t seed = 1234;
  GradResult r = mlm_gradients(w, cfg, batch, labels, true, seed);
  FdFailure f;
  int failures = check_gradients(
      w, r.grads, [&] { return mlm_loss_value(w, cfg, batch, labels, true, seed); }, &f);
  report(failures, f);
}

TEST_CASE("gradient check: ELECTRA joint loss") {
  ModelConfig cfg = tiny_config(19);
  TensorMap w = init_weights(Arch::kElectra, cfg, 6);
  Batch batch = tiny_batch(cfg.vocab_size);

  // Rebuild per-example encodings from the batch contents.
  std::vector<Encoding> encs(2);
  for (int b = 0; b < 2; ++b) {
    for (int t = 0; t < batch.seq_len; ++t) {
      size_t i = static_cast<size_t>(b) * batch.seq_len + t;
      encs[static_cast<size_t>(b)].token_ids.push_back(batch.token_ids[i]);
      encs[static_cast<size_t>(b)].word_ids.push_back(batch.word_ids[i]);
      encs[static_cast<size_t>(b)].attention_mask.push_back(batch.attention_mask[i]);
    }
  }
  Rng rng(77);
  std::vector<MaskingPlan> plans;
  for (const Encoding& e : encs) plans.push_back(plan_masking(e, MaskMode::kToken, 0.3, rng));
  std::vector<RTDBatch> rtd = rtd_corrupt_batch(encs, plans, w, cfg, rng, 0, false);
  ElectraStep step = make_electra_step(encs, rtd, cfg.max_seq_len);

  const double lambda = 5.0;
  GradResult r = electra_gradients(w, cfg, step, lambda, false, 0);
  CHECK(r.gen_loss > 0);
  CHECK(r.disc_bce > 0);
  CHECK(r.loss == doctest::Approx(r.gen_loss + lambda * r.disc_bce));
  FdFailure f;
  int failures = check_gradients(
      w, r.grads, [&] { return electra_loss_value(w, cfg, step, lambda, false, 0); }, &f);
  report(failures, f);

  SUBCASE("discriminator term scales linearly in lambda") {
    GradResult r0 = electra_gradients(w, cfg, step, 0.0, false, 0);
    GradResult r2 = electra_gradients(w, cfg, step, 2 * lambda, false, 0);
    for (const auto& [name, g1] : r.grads) {
      const Tensor& g0 = r0.grads.at(name);
      const Tensor& g2 = r2.grads.at(name);
      for (size_t i = 0; i < g1.data.size(); ++i) {
        double diff1 = g1.data[i] - g0.data[i];  // lambda * disc grad
        double diff2 = g2.data[i] - g1.data[i];  // also lambda * disc grad
        CHECK(diff2 == doctest::Approx(diff1).epsilon(1e-9).scale(1.0));
      }
    }
  }

  SUBCASE("discriminator head is a dead path when lambda is zero") {
    GradResult gen_only = electra_gradients(w, cfg, step, 0.0, false, 0);
    for (const std::string name : {"rtd.transform.w", "rtd.transform.b", "rtd.out.w", "rtd.out.b"}) {
      for (double x : gen_only.grads.at(name).data) CHECK(x == 0.0);
    }
  }
}

TEST_CASE("gradient check: cls_classify head") {
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  TensorMap head = init_head(HeadKind::kClsClassify, cfg, 3, 7);
  for (auto& [k, v] : head) w.emplace(k, v);
  Batch batch = tiny_batch(cfg.vocab_size);
  std::vector<int32_t> labels = {0, 2};
  GradResult r =
      classify_gradients(w, cfg, Arch::kBert, HeadKind::kClsClassify, batch, labels, false, 0);
  FdFailure f;
  int failures = check_gradients(
      w, r.grads,
      [&] {
        return classify_loss_value(w, cfg, Arch::kBert, HeadKind::kClsClassify, batch, labels,
                                   false, 0);
      },
      &f);
  report(failures, f);

  // unused pretraining head gets an all-zero gradient
  for (const auto& [name, g] : r.grads) {
    if (name.rfind("mlm.", 0) == 0) {
      for (double x : g.data) CHECK(x == 0.0);
    }
  }
}

TEST_CASE("gradient check: electra_pool_classify head") {
  ModelConfig cfg = tiny_config(19);
  TensorMap w = init_weights(Arch::kElectra, cfg, 6);
  TensorMap fw = finetune_weights(w, Arch::kElectra, cfg, HeadKind::kElectraPoolClassify, 3, 7);
  CHECK(fw.count("gen.emb_ln.gain") == 0);  // generator dropped for fine-tuning
  Batch batch = tiny_batch(cfg.vocab_size);
  std::vector<int32_t> labels = {1, 0};
  GradResult r = classify_gradients(fw, cfg, Arch::kElectra, HeadKind::kElectraPoolClassify,
                                    batch, labels, false, 0);
  FdFailure f;
  int failures = check_gradients(
      fw, r.grads,
      [&] {
        return classify_loss_value(fw, cfg, Arch::kElectra, HeadKind::kElectraPoolClassify, batch,
                                   labels, false, 0);
      },
      &f);
  report(failures, f);
}

TEST_CASE("gradient check: token_tag head") {
  ModelConfig cfg = tiny_config(23);
  TensorMap w = init_weights(Arch::kBert, cfg, 5);
  TensorMap head = init_head(HeadKind::kTokenTag, cfg, 3, 7);
  for (auto& [k, v] : head) w.emplace(k, v);
  Batch batch = tiny_batch(cfg.vocab_size);
  // words per sequence: 3 and 2; one ignored
  std::vector<int32_t> labels = {0, 2, 1, kIgnoreLabel, 2};
  GradResult r = token_tag_gradients(w, cfg, Arch::kBert, batch, labels, false, 0);
  FdFailure f;
  int failures = check_gradients(
      w, r.grads,
      [&] { return token_tag_loss_value(w, cfg, Arch::kBert, batch, labels, false, 0); }, &f);
  report(failures, f);
}

TEST_CASE("property: shape closure over random small configs") {
  Rng rng(17);
  for (int trial = 0; trial < 8; ++trial) {
    ModelConfig cfg;
    cfg.layers = 1 + static_cast<int>(rng.uniform_below(3));
    cfg.heads = 1 + static_cast<int>(rng.uniform_below(3));
    cfg.hidden = cfg.heads * static_cast<int>(4 + rng.uniform_below(5));
    cfg.ffn_dim = static_cast<int>(8 + rng.uniform_below(40));
    cfg.vocab_size = static_cast<int>(8 + rng.uniform_below(24));
    cfg.max_seq_len = static_cast<int>(6 + rng.uniform_below(8));
    cfg.dropout = 0.0;
    Arch arch = rng.uniform() < 0.5 ? Arch::kBert : Arch::kElectra;
    TensorMap w = init_weights(arch, cfg, static_cast<uint64_t>(trial));

    Encoding e;
    e.token_ids = {kClsId, 5, 6, kSepId};
    e.word_ids = {kNoWord, 0, 1, kNoWord};
    e.attention_mask = {1, 1, 1, 1};
    Batch batch = make_batch({e, e}, cfg.max_seq_len);

    if (arch == Arch::kBert) {
      std::vector<int32_t> labels(batch.token_ids.size(), kIgnoreLabel);
      labels[1] = 5;
      GradResult r = mlm_gradients(w, cfg, batch, labels, false, 0);
      CHECK(std::isfinite(r.loss));
      CHECK(same_names_and_shapes(r.grads, w));
    } else {
      std::vector<Encoding> encs = {e, e};
      Rng step_rng(static_cast<uint64_t>(trial));
      std::vector<MaskingPlan> plans;
      for (const Encoding& enc : encs) {
        plans.push_back(plan_masking(enc, MaskMode::kToken, 0.5, step_rng));
      }
      std::vector<RTDBatch> rtd = rtd_corrupt_batch(encs, plans, w, cfg, step_rng, 0, false);
      ElectraStep step = make_electra_step(encs, rtd, cfg.max_seq_len);
      GradResult r = electra_gradients(w, cfg, step, 50.0, false, 0);
      CHECK(std::isfinite(r.loss));
      CHECK(same_names_and_shapes(r.grads, w));
    }
  }
}

TEST_CASE("generator dims follow the one-third rule") {
  ModelConfig cfg;
  cfg.layers = 12;
  cfg.hidden = 768;
  cfg.heads = 12;
  cfg.vocab_size = 31000;
  cfg.max_seq_len = 512;
  GeneratorDims g = generator_dims(cfg);
  CHECK(g.layers == 12);
  CHECK(g.hidden == 256);
  CHECK(g.heads == 4);
  CHECK(g.ffn == 1024);
  CHECK(g.hidden % g.heads == 0);

  ModelConfig tiny = tiny_config(23);
  GeneratorDims gt = generator_dims(tiny);
  CHECK(gt.hidden % gt.heads == 0);
  CHECK(gt.hidden >= 1);
}
