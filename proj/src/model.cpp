#include "lmkit/model.hpp"

#include <algorithm>
#include <cmath>

#include "lmkit/rng.hpp"
#include "model_internal.hpp"

namespace lmkit {

using detail::RowMat;
using detail::Vec;

Arch arch_from_string(std::string_view s) {
  if (s == "bert") return Arch::kBert;
  if (s == "electra") return Arch::kElectra;
  throw ConfigError("unknown architecture: " + std::string(s));
}

std::string to_string(Arch arch) { return arch == Arch::kBert ? "bert" : "electra"; }

void ModelConfig::validate() const {
  if (layers < 1 || hidden < 1 || heads < 1 || vocab_size < kNumSpecials || max_seq_len < 1) {
    throw ConfigError("model dimensions must be positive (and vocab must hold the specials)");
  }
  if (hidden % heads != 0) throw ConfigError("hidden must be divisible by heads");
  if (ffn_dim < 0) throw ConfigError("ffn_dim must be non-negative");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
}

GeneratorDims generator_dims(const ModelConfig& config) {
  GeneratorDims dims;
  dims.layers = config.layers;
  dims.heads = std::max(1, config.heads / 3);
  int third = (config.hidden + 2) / 3;
  int rem = third % dims.heads;
  dims.hidden = rem == 0 ? third : third + (dims.heads - rem);
  dims.ffn = 4 * dims.hidden;
  return dims;
}

std::string task_scope(Arch arch) { return arch == Arch::kBert ? "encoder" : "disc"; }

Batch make_batch(const std::vector<Encoding>& encodings, int max_seq_len) {
  if (encodings.empty()) throw InputError("make_batch: empty batch");
  size_t longest = 0;
  for (const Encoding& e : encodings) longest = std::max(longest, e.size());
  if (longest > static_cast<size_t>(max_seq_len)) {
    throw InputError("sequence longer than max_seq_len");
  }
  Batch batch;
  batch.size = static_cast<int>(encodings.size());
  batch.seq_len = static_cast<int>(longest);
  batch.token_ids.assign(static_cast<size_t>(batch.positions()), kPadId);
  batch.word_ids.assign(static_cast<size_t>(batch.positions()), kNoWord);
  batch.attention_mask.assign(static_cast<size_t>(batch.positions()), 0);
  for (size_t b = 0; b < encodings.size(); ++b) {
    const Encoding& e = encodings[b];
    size_t base = b * static_cast<size_t>(batch.seq_len);
    for (size_t i = 0; i < e.size(); ++i) {
      batch.token_ids[base + i] = e.token_ids[i];
      batch.word_ids[base + i] = e.word_ids[i];
      batch.attention_mask[base + i] = e.attention_mask[i];
    }
  }
  return batch;
}

namespace {

enum class InitKind { kTruncNormal, kZero, kOne };

struct ParamSpec {
  std::string name;
  std::vector<int64_t> shape;
  InitKind init;
};

void add_tower(std::vector<ParamSpec>& out, const detail::EncoderSpec& spec) {
  const std::string& p = spec.prefix;
  const int64_t e = spec.in_width;
  const int64_t h = spec.hidden;
  const int64_t f = spec.ffn;
  out.push_back({p + ".emb_ln.gain", {e}, InitKind::kOne});
  out.push_back({p + ".emb_ln.bias", {e}, InitKind::kZero});
  if (spec.has_proj) {
    out.push_back({p + ".embed_proj.w", {e, h}, InitKind::kTruncNormal});
    out.push_back({p + ".embed_proj.b", {h}, InitKind::kZero});
  }
  for (int i = 0; i < spec.layers; ++i) {
    std::string lp = p + ".layer" + std::to_string(i);
    for (const char* name : {"q", "k", "v", "o"}) {
      out.push_back({lp + ".attn." + name + ".w", {h, h}, InitKind::kTruncNormal});
      out.push_back({lp + ".attn." + std::string(name) + ".b", {h}, InitKind::kZero});
    }
    out.push_back({lp + ".attn.ln.gain", {h}, InitKind::kOne});
    out.push_back({lp + ".attn.ln.bias", {h}, InitKind::kZero});
    out.push_back({lp + ".ffn.w1", {h, f}, InitKind::kTruncNormal});
    out.push_back({lp + ".ffn.b1", {f}, InitKind::kZero});
    out.push_back({lp + ".ffn.w2", {f, h}, InitKind::kTruncNormal});
    out.push_back({lp + ".ffn.b2", {h}, InitKind::kZero});
    out.push_back({lp + ".ffn.ln.gain", {h}, InitKind::kOne});
    out.push_back({lp + ".ffn.ln.bias", {h}, InitKind::kZero});
  }
}

void add_mlm_head(std::vector<ParamSpec>& out, const std::string& prefix, int64_t tower_hidden,
                  int64_t emb_width, int64_t vocab) {
  out.push_back({prefix + ".transform.w", {tower_hidden, emb_width}, InitKind::kTruncNormal});
  out.push_back({prefix + ".transform.b", {emb_width}, InitKind::kZero});
  out.push_back({prefix + ".ln.gain", {emb_width}, InitKind::kOne});
  out.push_back({prefix + ".ln.bias", {emb_width}, InitKind::kZero});
  out.push_back({prefix + ".out_bias", {vocab}, InitKind::kZero});
}

std::vector<ParamSpec> weight_schema(Arch arch, const ModelConfig& config) {
  const int64_t v = config.vocab_size;
  const int64_t e = config.hidden;
  std::vector<ParamSpec> out;
  out.push_back({"embeddings.word", {v, e}, InitKind::kTruncNormal});
  out.push_back({"embeddings.position", {config.max_seq_len, e}, InitKind::kTruncNormal});
  if (arch == Arch::kBert) {
    add_tower(out, detail::encoder_spec(config, "encoder"));
    add_mlm_head(out, "mlm", e, e, v);
  } else {
    add_tower(out, detail::encoder_spec(config, "disc"));
    add_tower(out, detail::encoder_spec(config, "gen"));
    GeneratorDims g = generator_dims(config);
    add_mlm_head(out, "gen_mlm", g.hidden, e, v);
    out.push_back({"rtd.transform.w", {e, e}, InitKind::kTruncNormal});
    out.push_back({"rtd.transform.b", {e}, InitKind::kZero});
    out.push_back({"rtd.out.w", {e}, InitKind::kTruncNormal});
    out.push_back({"rtd.out.b", {1}, InitKind::kZero});
  }
  return out;
}

TensorMap materialize(const std::vector<ParamSpec>& schema, uint64_t seed) {
  Rng rng(seed);
  TensorMap weights;
  for (const ParamSpec& spec : schema) {
    Tensor t = Tensor::zeros(spec.shape);
    switch (spec.init) {
      case InitKind::kZero:
        break;
      case InitKind::kOne:
        for (double& x : t.data) x = 1.0;
        break;
      case InitKind::kTruncNormal:
        for (double& x : t.data) x = rng.truncated_normal(0.02, 0.04);
        break;
    }
    weights.emplace(spec.name, std::move(t));
  }
  return weights;
}

}  // namespace

TensorMap init_weights(Arch arch, const ModelConfig& config, uint64_t seed) {
  config.validate();
  return materialize(weight_schema(arch, config), seed);
}

TensorMap init_head(HeadKind head, const ModelConfig& config, int classes, uint64_t seed) {
  config.validate();
  const int64_t h = config.hidden;
  const int64_t c = classes;
  std::vector<ParamSpec> schema;
  switch (head) {
    case HeadKind::kClsClassify:
      if (classes < 2) throw ConfigError("classification heads need at least 2 classes");
      schema.push_back({"head.cls.w", {h, c}, InitKind::kTruncNormal});
      schema.push_back({"head.cls.b", {c}, InitKind::kZero});
      break;
    case HeadKind::kElectraPoolClassify:
      if (classes < 2) throw ConfigError("classification heads need at least 2 classes");
      schema.push_back({"head.pool.w1", {h, h}, InitKind::kTruncNormal});
      schema.push_back({"head.pool.b1", {h}, InitKind::kZero});
      schema.push_back({"head.pool.w2", {h, c}, InitKind::kTruncNormal});
      schema.push_back({"head.pool.b2", {c}, InitKind::kZero});
      break;
    case HeadKind::kTokenTag:
      if (classes < 1) throw ConfigError("token tagging needs at least 1 class");
      schema.push_back({"head.tag.w", {h, c}, InitKind::kTruncNormal});
      schema.push_back({"head.tag.b", {c}, InitKind::kZero});
      break;
    default:
      throw ConfigError("init_head: not a fine-tuning head");
  }
  return materialize(schema, seed);
}

TensorMap finetune_weights(const TensorMap& pretrained, Arch arch, const ModelConfig& config,
                           HeadKind head, int classes, uint64_t seed) {
  const std::string scope = task_scope(arch) + ".";
  TensorMap out;
  for (const auto& [name, tensor] : pretrained) {
    if (name.rfind("embeddings.", 0) == 0 || name.rfind(scope, 0) == 0) {
      out.emplace(name, tensor);
    }
  }
  if (out.find("embeddings.word") == out.end()) {
    throw ConfigError("pretrained weights are missing the embedding table");
  }
  TensorMap head_weights = init_head(head, config, classes, seed);
  for (auto& [name, tensor] : head_weights) out.emplace(name, std::move(tensor));
  return out;
}

namespace detail {

EncoderSpec encoder_spec(const ModelConfig& config, std::string_view scope) {
  EncoderSpec spec;
  spec.prefix = std::string(scope);
  spec.in_width = config.hidden;
  if (scope == "encoder" || scope == "disc") {
    spec.layers = config.layers;
    spec.hidden = config.hidden;
    spec.heads = config.heads;
    spec.ffn = config.ffn();
    spec.has_proj = false;
  } else if (scope == "gen") {
    GeneratorDims g = generator_dims(config);
    spec.layers = g.layers;
    spec.hidden = g.hidden;
    spec.heads = g.heads;
    spec.ffn = g.ffn;
    spec.has_proj = true;
  } else {
    throw ConfigError("unknown encoder scope: " + std::string(scope));
  }
  return spec;
}

const Tensor& param(const TensorMap& weights, const std::string& name) {
  auto it = weights.find(name);
  if (it == weights.end()) throw ConfigError("missing tensor: " + name);
  return it->second;
}

Eigen::Map<const RowMat> mat(const TensorMap& weights, const std::string& name, int64_t rows,
                             int64_t cols) {
  const Tensor& t = param(weights, name);
  if (t.rank() != 2 || t.shape[0] != rows || t.shape[1] != cols) {
    throw ConfigError("tensor shape mismatch for " + name);
  }
  return {t.data.data(), rows, cols};
}

Eigen::Map<const Vec> vec(const TensorMap& weights, const std::string& name, int64_t n) {
  const Tensor& t = param(weights, name);
  if (t.rank() != 1 || t.shape[0] != n) throw ConfigError("tensor shape mismatch for " + name);
  return {t.data.data(), n};
}

Eigen::Map<RowMat> grad_mat(TensorMap& grads, const std::string& name, int64_t rows,
                            int64_t cols) {
  auto it = grads.find(name);
  if (it == grads.end()) throw ConfigError("missing gradient tensor: " + name);
  return {it->second.data.data(), rows, cols};
}

Eigen::Map<Vec> grad_vec(TensorMap& grads, const std::string& name, int64_t n) {
  auto it = grads.find(name);
  if (it == grads.end()) throw ConfigError("missing gradient tensor: " + name);
  return {it->second.data.data(), n};
}

RowMat layer_norm_forward(const RowMat& x, Eigen::Map<const Vec> gain, Eigen::Map<const Vec> bias,
                          LayerNormTrace& trace) {
  const auto rows = x.rows();
  const auto cols = x.cols();
  trace.xhat.resize(rows, cols);
  trace.rstd.resize(rows);
  RowMat y(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double mean = x.row(i).mean();
    double var = (x.row(i).array() - mean).square().mean();
    double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    trace.rstd[i] = rstd;
    trace.xhat.row(i) = (x.row(i).array() - mean) * rstd;
    y.row(i) = trace.xhat.row(i).array() * gain.transpose().array() + bias.transpose().array();
  }
  return y;
}

RowMat layer_norm_backward(const RowMat& dy, const LayerNormTrace& trace,
                           Eigen::Map<const Vec> gain, Eigen::Map<Vec> dgain,
                           Eigen::Map<Vec> dbias) {
  using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;
  const auto rows = dy.rows();
  RowMat dx(rows, dy.cols());
  for (Eigen::Index i = 0; i < rows; ++i) {
    RowArr xhat = trace.xhat.row(i).array();
    RowArr dxhat = dy.row(i).array() * gain.transpose().array();
    double m1 = dxhat.mean();
    double m2 = (dxhat * xhat).mean();
    dx.row(i) = (dxhat - m1 - xhat * m2).matrix() * trace.rstd[i];
    dgain += (dy.row(i).array() * xhat).matrix().transpose();
    dbias += dy.row(i).transpose();
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

double gelu_grad(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;  // 1/sqrt(2*pi)
  return cdf + x * pdf;
}

RowMat gelu_mat(const RowMat& x) { return x.unaryExpr([](double v) { return gelu(v); }); }

RowMat dropout_forward(const RowMat& x, double p, bool train, Rng& rng,
                       std::vector<uint8_t>& keep) {
  if (!train || p <= 0.0) {
    keep.clear();
    return x;
  }
  const double scale = 1.0 / (1.0 - p);
  keep.resize(static_cast<size_t>(x.size()));
  RowMat y(x.rows(), x.cols());
  size_t idx = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j, ++idx) {
      bool k = rng.uniform() >= p;
      keep[idx] = k ? 1 : 0;
      y(i, j) = k ? x(i, j) * scale : 0.0;
    }
  }
  return y;
}

RowMat dropout_backward(const RowMat& dy, double p, const std::vector<uint8_t>& keep) {
  if (keep.empty()) return dy;
  const double scale = 1.0 / (1.0 - p);
  RowMat dx(dy.rows(), dy.cols());
  size_t idx = 0;
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    for (Eigen::Index j = 0; j < dy.cols(); ++j, ++idx) {
      dx(i, j) = keep[idx] ? dy(i, j) * scale : 0.0;
    }
  }
  return dx;
}

namespace {

void softmax_rows_inplace(RowMat& s) {
  using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    double m = s.row(i).maxCoeff();
    RowArr e = (s.row(i).array() - m).exp();
    s.row(i) = (e / e.sum()).matrix();
  }
}

}  // namespace

}  // namespace detail

ForwardTrace encoder_forward(const TensorMap& weights, const ModelConfig& config,
                             std::string_view scope, const Batch& batch, bool train_mode,
                             uint64_t dropout_seed) {
  using namespace detail;
  config.validate();
  if (batch.size < 1 || batch.seq_len < 1) throw InputError("empty batch");
  if (batch.seq_len > config.max_seq_len) throw InputError("sequence longer than max_seq_len");
  const int64_t n = batch.positions();
  if (batch.token_ids.size() != static_cast<size_t>(n) ||
      batch.attention_mask.size() != static_cast<size_t>(n)) {
    throw InputError("batch field lengths disagree");
  }
  for (int32_t id : batch.token_ids) {
    if (id < 0 || id >= config.vocab_size) throw InputError("token id out of range");
  }

  EncoderSpec spec = encoder_spec(config, scope);
  const int T = batch.seq_len;
  const int B = batch.size;
  const int E = spec.in_width;
  const int H = spec.hidden;
  const int d = H / spec.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  ForwardTrace trace;
  trace.batch = B;
  trace.seq_len = T;
  trace.width = H;
  trace.detail = std::make_shared<ForwardTrace::Detail>();
  ForwardTrace::Detail& D = *trace.detail;
  D.spec = spec;
  D.batch = batch;
  D.train = train_mode;
  D.dropout_p = config.dropout;

  Rng drop_rng(dropout_seed);

  auto word_emb = mat(weights, "embeddings.word", config.vocab_size, E);
  auto pos_emb = mat(weights, "embeddings.position", config.max_seq_len, E);

  D.emb_sum.resize(n, E);
  for (int64_t i = 0; i < n; ++i) {
    D.emb_sum.row(i) = word_emb.row(batch.token_ids[static_cast<size_t>(i)]) +
                       pos_emb.row(i % T);
  }

  RowMat x = layer_norm_forward(D.emb_sum, vec(weights, spec.prefix + ".emb_ln.gain", E),
                                vec(weights, spec.prefix + ".emb_ln.bias", E), D.emb_ln);
  x = dropout_forward(x, D.dropout_p, train_mode, drop_rng, D.emb_keep);
  if (spec.has_proj) {
    D.emb_dropped = x;
    RowMat projected = x * mat(weights, spec.prefix + ".embed_proj.w", E, H);
    projected.rowwise() += vec(weights, spec.prefix + ".embed_proj.b", H).transpose();
    x = std::move(projected);
  }
  D.tower_in = x;

  D.key_bias.resize(n);
  for (int64_t i = 0; i < n; ++i) {
    D.key_bias[i] = batch.attention_mask[static_cast<size_t>(i)] ? 0.0 : kMaskBias;
  }

  D.layers.resize(static_cast<size_t>(spec.layers));
  for (int l = 0; l < spec.layers; ++l) {
    LayerTrace& L = D.layers[static_cast<size_t>(l)];
    const std::string lp = spec.prefix + ".layer" + std::to_string(l);
    L.in = x;

    L.q = x * mat(weights, lp + ".attn.q.w", H, H);
    L.q.rowwise() += vec(weights, lp + ".attn.q.b", H).transpose();
    L.k = x * mat(weights, lp + ".attn.k.w", H, H);
    L.k.rowwise() += vec(weights, lp + ".attn.k.b", H).transpose();
    L.v = x * mat(weights, lp + ".attn.v.w", H, H);
    L.v.rowwise() += vec(weights, lp + ".attn.v.b", H).transpose();

    L.ctx.resize(n, H);
    L.probs.resize(static_cast<size_t>(B) * spec.heads);
    L.prob_keep.resize(static_cast<size_t>(B) * spec.heads);
    for (int b = 0; b < B; ++b) {
      const int64_t base = static_cast<int64_t>(b) * T;
      for (int h = 0; h < spec.heads; ++h) {
        RowMat scores = L.q.block(base, h * d, T, d) * L.k.block(base, h * d, T, d).transpose();
        scores *= scale;
        scores.rowwise() += D.key_bias.segment(base, T).transpose();
        softmax_rows_inplace(scores);
        size_t slot = static_cast<size_t>(b) * spec.heads + static_cast<size_t>(h);
        L.probs[slot] = scores;
        RowMat dropped =
            dropout_forward(scores, D.dropout_p, train_mode, drop_rng, L.prob_keep[slot]);
        L.ctx.block(base, h * d, T, d).noalias() = dropped * L.v.block(base, h * d, T, d);
      }
    }

    L.attn_out = L.ctx * mat(weights, lp + ".attn.o.w", H, H);
    L.attn_out.rowwise() += vec(weights, lp + ".attn.o.b", H).transpose();
    RowMat attn_dropped = dropout_forward(L.attn_out, D.dropout_p, train_mode, drop_rng,
                                          L.attn_keep);
    L.r1 = L.in + attn_dropped;
    L.x1 = layer_norm_forward(L.r1, vec(weights, lp + ".attn.ln.gain", H),
                              vec(weights, lp + ".attn.ln.bias", H), L.ln1);

    L.ffn_pre = L.x1 * mat(weights, lp + ".ffn.w1", H, spec.ffn);
    L.ffn_pre.rowwise() += vec(weights, lp + ".ffn.b1", spec.ffn).transpose();
    RowMat activated = gelu_mat(L.ffn_pre);
    L.ffn_out = activated * mat(weights, lp + ".ffn.w2", spec.ffn, H);
    L.ffn_out.rowwise() += vec(weights, lp + ".ffn.b2", H).transpose();
    RowMat ffn_dropped = dropout_forward(L.ffn_out, D.dropout_p, train_mode, drop_rng, L.ffn_keep);
    L.r2 = L.x1 + ffn_dropped;
    x = layer_norm_forward(L.r2, vec(weights, lp + ".ffn.ln.gain", H),
                           vec(weights, lp + ".ffn.ln.bias", H), L.ln2);
  }

  D.hidden = x;
  trace.final_hidden.assign(D.hidden.data(), D.hidden.data() + D.hidden.size());
  return trace;
}

namespace detail {

TensorMap zero_grads(const TensorMap& weights) {
  TensorMap grads;
  for (const auto& [name, tensor] : weights) {
    grads.emplace(name, Tensor::zeros(tensor.shape));
  }
  return grads;
}

void encoder_backward(const ForwardTrace& trace, const TensorMap& weights, const RowMat& d_hidden,
                      TensorMap& grads) {
  const ForwardTrace::Detail& D = *trace.detail;
  const EncoderSpec& spec = D.spec;
  const int B = D.batch.size;
  const int T = D.batch.seq_len;
  const int E = spec.in_width;
  const int H = spec.hidden;
  const int d = H / spec.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const int64_t n = D.batch.positions();

  RowMat dx = d_hidden;
  for (int l = spec.layers - 1; l >= 0; --l) {
    const LayerTrace& L = D.layers[static_cast<size_t>(l)];
    const std::string lp = spec.prefix + ".layer" + std::to_string(l);

    // x2 = LN2(r2 = x1 + dropout(ffn_out))
    RowMat dr2 = layer_norm_backward(dx, L.ln2, vec(weights, lp + ".ffn.ln.gain", H),
                                     grad_vec(grads, lp + ".ffn.ln.gain", H),
                                     grad_vec(grads, lp + ".ffn.ln.bias", H));
    RowMat dx1 = dr2;
    RowMat dffn_out = dropout_backward(dr2, D.dropout_p, L.ffn_keep);

    RowMat activated = gelu_mat(L.ffn_pre);
    grad_mat(grads, lp + ".ffn.w2", spec.ffn, H).noalias() += activated.transpose() * dffn_out;
    grad_vec(grads, lp + ".ffn.b2", H) += dffn_out.colwise().sum().transpose();
    RowMat dact = dffn_out * mat(weights, lp + ".ffn.w2", spec.ffn, H).transpose();
    RowMat dpre = dact.cwiseProduct(L.ffn_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    grad_mat(grads, lp + ".ffn.w1", H, spec.ffn).noalias() += L.x1.transpose() * dpre;
    grad_vec(grads, lp + ".ffn.b1", spec.ffn) += dpre.colwise().sum().transpose();
    dx1.noalias() += dpre * mat(weights, lp + ".ffn.w1", H, spec.ffn).transpose();

    // x1 = LN1(r1 = in + dropout(attn_out))
    RowMat dr1 = layer_norm_backward(dx1, L.ln1, vec(weights, lp + ".attn.ln.gain", H),
                                     grad_vec(grads, lp + ".attn.ln.gain", H),
                                     grad_vec(grads, lp + ".attn.ln.bias", H));
    RowMat din = dr1;
    RowMat dattn_out = dropout_backward(dr1, D.dropout_p, L.attn_keep);

    grad_mat(grads, lp + ".attn.o.w", H, H).noalias() += L.ctx.transpose() * dattn_out;
    grad_vec(grads, lp + ".attn.o.b", H) += dattn_out.colwise().sum().transpose();
    RowMat dctx = dattn_out * mat(weights, lp + ".attn.o.w", H, H).transpose();

    RowMat dq = RowMat::Zero(n, H);
    RowMat dk = RowMat::Zero(n, H);
    RowMat dv = RowMat::Zero(n, H);
    const double keep_scale = 1.0 / (1.0 - D.dropout_p);
    for (int b = 0; b < B; ++b) {
      const int64_t base = static_cast<int64_t>(b) * T;
      for (int h = 0; h < spec.heads; ++h) {
        size_t slot = static_cast<size_t>(b) * spec.heads + static_cast<size_t>(h);
        const RowMat& probs = L.probs[slot];
        const std::vector<uint8_t>& keep = L.prob_keep[slot];

        RowMat dctx_h = dctx.block(base, h * d, T, d);
        RowMat dropped = probs;
        if (!keep.empty()) {
          size_t idx = 0;
          for (int i = 0; i < T; ++i) {
            for (int j = 0; j < T; ++j, ++idx) {
              dropped(i, j) = keep[idx] ? probs(i, j) * keep_scale : 0.0;
            }
          }
        }
        dv.block(base, h * d, T, d).noalias() += dropped.transpose() * dctx_h;
        RowMat dprob_dropped = dctx_h * L.v.block(base, h * d, T, d).transpose();
        RowMat dprob = dropout_backward(dprob_dropped, D.dropout_p, keep);

        // softmax backward, row-wise: dS = P (.) dP - (P . dP) P
        RowMat dscores(T, T);
        for (int i = 0; i < T; ++i) {
          double dot = probs.row(i).cwiseProduct(dprob.row(i)).sum();
          dscores.row(i) = probs.row(i).cwiseProduct(dprob.row(i)) - dot * probs.row(i);
        }
        dq.block(base, h * d, T, d).noalias() +=
            scale * (dscores * L.k.block(base, h * d, T, d));
        dk.block(base, h * d, T, d).noalias() +=
            scale * (dscores.transpose() * L.q.block(base, h * d, T, d));
      }
    }

    grad_mat(grads, lp + ".attn.q.w", H, H).noalias() += L.in.transpose() * dq;
    grad_vec(grads, lp + ".attn.q.b", H) += dq.colwise().sum().transpose();
    grad_mat(grads, lp + ".attn.k.w", H, H).noalias() += L.in.transpose() * dk;
    grad_vec(grads, lp + ".attn.k.b", H) += dk.colwise().sum().transpose();
    grad_mat(grads, lp + ".attn.v.w", H, H).noalias() += L.in.transpose() * dv;
    grad_vec(grads, lp + ".attn.v.b", H) += dv.colwise().sum().transpose();

    din.noalias() += dq * mat(weights, lp + ".attn.q.w", H, H).transpose();
    din.noalias() += dk * mat(weights, lp + ".attn.k.w", H, H).transpose();
    din.noalias() += dv * mat(weights, lp + ".attn.v.w", H, H).transpose();
    dx = std::move(din);
  }

  // tower_in = dropout(LN(emb_sum)) [ * proj ]
  if (spec.has_proj) {
    grad_mat(grads, spec.prefix + ".embed_proj.w", E, H).noalias() +=
        D.emb_dropped.transpose() * dx;
    grad_vec(grads, spec.prefix + ".embed_proj.b", H) += dx.colwise().sum().transpose();
    dx = dx * mat(weights, spec.prefix + ".embed_proj.w", E, H).transpose();
  }
  dx = dropout_backward(dx, D.dropout_p, D.emb_keep);
  RowMat demb = layer_norm_backward(dx, D.emb_ln, vec(weights, spec.prefix + ".emb_ln.gain", E),
                                    grad_vec(grads, spec.prefix + ".emb_ln.gain", E),
                                    grad_vec(grads, spec.prefix + ".emb_ln.bias", E));

  auto dword = grad_mat(grads, "embeddings.word", param(weights, "embeddings.word").shape[0], E);
  auto dpos = grad_mat(grads, "embeddings.position",
                       param(weights, "embeddings.position").shape[0], E);
  for (int64_t i = 0; i < n; ++i) {
    dword.row(D.batch.token_ids[static_cast<size_t>(i)]) += demb.row(i);
    dpos.row(i % T) += demb.row(i);
  }
}

double cross_entropy_rows(const RowMat& logits, const std::vector<int32_t>& labels,
                          RowMat* d_logits) {
  using RowArr = Eigen::Array<double, 1, Eigen::Dynamic>;
  const auto rows = logits.rows();
  if (rows == 0) throw InputError("cross entropy over zero rows");
  if (labels.size() != static_cast<size_t>(rows)) throw InputError("label count mismatch");
  if (d_logits) d_logits->setZero(rows, logits.cols());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < rows; ++i) {
    int32_t y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= logits.cols()) throw InputError("label out of range");
    double m = logits.row(i).maxCoeff();
    RowArr e = (logits.row(i).array() - m).exp();
    double z = e.sum();
    loss += -(logits(i, y) - m - std::log(z));
    if (d_logits) {
      d_logits->row(i) = (e / z).matrix();
      (*d_logits)(i, y) -= 1.0;
    }
  }
  loss /= static_cast<double>(rows);
  if (d_logits) *d_logits /= static_cast<double>(rows);
  return loss;
}

std::string mlm_prefix(std::string_view scope) {
  if (scope == "encoder") return "mlm";
  if (scope == "gen") return "gen_mlm";
  throw ConfigError("no MLM head for scope: " + std::string(scope));
}

RowMat mlm_head_forward(const TensorMap& weights, const ForwardTrace& trace,
                        std::string_view scope, const std::vector<int32_t>& positions,
                        MlmHeadTrace* head_trace) {
  const ForwardTrace::Detail& D = *trace.detail;
  const std::string prefix = mlm_prefix(scope);
  const int H = D.spec.hidden;
  const Tensor& word = param(weights, "embeddings.word");
  const int64_t V = word.shape[0];
  const int64_t E = word.shape[1];

  RowMat selected(static_cast<Eigen::Index>(positions.size()), H);
  for (size_t i = 0; i < positions.size(); ++i) {
    selected.row(static_cast<Eigen::Index>(i)) = D.hidden.row(positions[i]);
  }

  RowMat pre = selected * mat(weights, prefix + ".transform.w", H, E);
  pre.rowwise() += vec(weights, prefix + ".transform.b", E).transpose();
  RowMat activated = gelu_mat(pre);
  LayerNormTrace ln;
  RowMat normed = layer_norm_forward(activated, vec(weights, prefix + ".ln.gain", E),
                                     vec(weights, prefix + ".ln.bias", E), ln);

  RowMat logits = normed * mat(weights, "embeddings.word", V, E).transpose();
  logits.rowwise() += vec(weights, prefix + ".out_bias", V).transpose();

  if (head_trace) {
    head_trace->rows = positions;
    head_trace->selected = std::move(selected);
    head_trace->pre_act = std::move(pre);
    head_trace->activated = std::move(activated);
    head_trace->ln = std::move(ln);
    head_trace->normed = std::move(normed);
  }
  return logits;
}

RowMat mlm_head_backward(const TensorMap& weights, const ForwardTrace& trace,
                         std::string_view scope, const MlmHeadTrace& head_trace,
                         const RowMat& d_logits, TensorMap& grads) {
  const ForwardTrace::Detail& D = *trace.detail;
  const std::string prefix = mlm_prefix(scope);
  const int H = D.spec.hidden;
  const Tensor& word = param(weights, "embeddings.word");
  const int64_t V = word.shape[0];
  const int64_t E = word.shape[1];

  grad_vec(grads, prefix + ".out_bias", V) += d_logits.colwise().sum().transpose();
  grad_mat(grads, "embeddings.word", V, E).noalias() += d_logits.transpose() * head_trace.normed;
  RowMat dnormed = d_logits * mat(weights, "embeddings.word", V, E);

  RowMat dact = layer_norm_backward(dnormed, head_trace.ln, vec(weights, prefix + ".ln.gain", E),
                                    grad_vec(grads, prefix + ".ln.gain", E),
                                    grad_vec(grads, prefix + ".ln.bias", E));
  RowMat dpre =
      dact.cwiseProduct(head_trace.pre_act.unaryExpr([](double v) { return gelu_grad(v); }));
  grad_mat(grads, prefix + ".transform.w", H, E).noalias() +=
      head_trace.selected.transpose() * dpre;
  grad_vec(grads, prefix + ".transform.b", E) += dpre.colwise().sum().transpose();
  RowMat dselected = dpre * mat(weights, prefix + ".transform.w", H, E).transpose();

  RowMat d_hidden = RowMat::Zero(D.batch.positions(), H);
  for (size_t i = 0; i < head_trace.rows.size(); ++i) {
    d_hidden.row(head_trace.rows[i]) += dselected.row(static_cast<Eigen::Index>(i));
  }
  return d_hidden;
}

}  // namespace detail

}  // namespace lmkit
