#pragma once

#include <Eigen/Dense>
#include <string>
#include <string_view>
#include <vector>

#include "lmkit/model.hpp"
#include "lmkit/rng.hpp"

namespace lmkit::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;

inline constexpr double kLayerNormEps = 1e-12;
inline constexpr double kMaskBias = -1e30;

/// One encoder tower, resolved from (config, scope).
struct EncoderSpec {
  std::string prefix;
  int layers = 0;
  int hidden = 0;
  int heads = 0;
  int ffn = 0;
  int in_width = 0;  // embedding width feeding the tower
  bool has_proj = false;
};

EncoderSpec encoder_spec(const ModelConfig& config, std::string_view scope);

/// Dropout-seed streams for the two ELECTRA towers, shared between the
/// sampling forward and the loss forward so their logits agree.
inline uint64_t gen_stream_seed(uint64_t dropout_seed) { return mix_seed(dropout_seed, 1); }
inline uint64_t disc_stream_seed(uint64_t dropout_seed) { return mix_seed(dropout_seed, 2); }

const Tensor& param(const TensorMap& weights, const std::string& name);
Eigen::Map<const RowMat> mat(const TensorMap& weights, const std::string& name, int64_t rows,
                             int64_t cols);
Eigen::Map<const Vec> vec(const TensorMap& weights, const std::string& name, int64_t n);

/// Accumulation view into a gradient tensor (must already exist with the
/// right shape).
Eigen::Map<RowMat> grad_mat(TensorMap& grads, const std::string& name, int64_t rows, int64_t cols);
Eigen::Map<Vec> grad_vec(TensorMap& grads, const std::string& name, int64_t n);

struct LayerNormTrace {
  RowMat xhat;  // normalized activations before gain/shift
  Vec rstd;     // per-row 1/sqrt(var + eps)
};

RowMat layer_norm_forward(const RowMat& x, Eigen::Map<const Vec> gain, Eigen::Map<const Vec> bias,
                          LayerNormTrace& trace);
/// Returns dx; accumulates into dgain/dbias.
RowMat layer_norm_backward(const RowMat& dy, const LayerNormTrace& trace,
                           Eigen::Map<const Vec> gain, Eigen::Map<Vec> dgain,
                           Eigen::Map<Vec> dbias);

double gelu(double x);
double gelu_grad(double x);
RowMat gelu_mat(const RowMat& x);

/// Inverted dropout. In eval mode (or p == 0) returns x and leaves keep
/// empty; otherwise fills keep with 0/1 bytes in row-major order.
RowMat dropout_forward(const RowMat& x, double p, bool train, Rng& rng,
                       std::vector<uint8_t>& keep);
RowMat dropout_backward(const RowMat& dy, double p, const std::vector<uint8_t>& keep);

struct LayerTrace {
  RowMat in;
  RowMat q, k, v;
  std::vector<RowMat> probs;  // batch*heads entries, T x T, post-softmax pre-dropout
  std::vector<std::vector<uint8_t>> prob_keep;
  RowMat ctx;
  RowMat attn_out;  // pre-dropout
  std::vector<uint8_t> attn_keep;
  RowMat r1;
  LayerNormTrace ln1;
  RowMat x1;
  RowMat ffn_pre;
  RowMat ffn_out;  // pre-dropout
  std::vector<uint8_t> ffn_keep;
  RowMat r2;
  LayerNormTrace ln2;
};

}  // namespace lmkit::detail

namespace lmkit {

struct ForwardTrace::Detail {
  detail::EncoderSpec spec;
  Batch batch;
  bool train = false;
  double dropout_p = 0.0;

  detail::RowMat emb_sum;  // word + position, pre-LN
  detail::LayerNormTrace emb_ln;
  std::vector<uint8_t> emb_keep;
  detail::RowMat emb_dropped;  // post-dropout, pre-projection
  detail::RowMat tower_in;     // input to layer 0
  std::vector<detail::LayerTrace> layers;
  detail::RowMat hidden;  // final hidden states
  detail::Vec key_bias;   // 0 for real tokens, kMaskBias for padding
};

}  // namespace lmkit

namespace lmkit::detail {

/// Backpropagates d_hidden through the traced tower, accumulating parameter
/// gradients (embeddings included) into grads.
void encoder_backward(const ForwardTrace& trace, const TensorMap& weights, const RowMat& d_hidden,
                      TensorMap& grads);

/// Zero-initialized gradient map mirroring the weights.
TensorMap zero_grads(const TensorMap& weights);

/// MLM head trace for the backward pass.
struct MlmHeadTrace {
  std::vector<int32_t> rows;  // selected flat positions
  RowMat selected;            // gathered hidden rows
  RowMat pre_act;             // transform output, pre-GELU
  RowMat activated;
  LayerNormTrace ln;
  RowMat normed;  // LN output feeding the tied decoder
};

/// Vocab logits at the given positions through the scope's MLM head
/// ("encoder" -> mlm.*, "gen" -> gen_mlm.*).
RowMat mlm_head_forward(const TensorMap& weights, const ForwardTrace& trace,
                        std::string_view scope, const std::vector<int32_t>& positions,
                        MlmHeadTrace* head_trace);

/// Accumulates head and embedding gradients and returns d_hidden (full
/// tower-shaped matrix, zero away from the selected rows).
RowMat mlm_head_backward(const TensorMap& weights, const ForwardTrace& trace,
                         std::string_view scope, const MlmHeadTrace& head_trace,
                         const RowMat& d_logits, TensorMap& grads);

/// Mean cross-entropy over logit rows; fills d_logits (softmax - onehot,
/// divided by the row count) when non-null.
double cross_entropy_rows(const RowMat& logits, const std::vector<int32_t>& labels,
                          RowMat* d_logits);

std::string mlm_prefix(std::string_view scope);

}  // namespace lmkit::detail
