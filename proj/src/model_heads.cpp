#include <cmath>

#include "lmkit/model.hpp"
#include "model_internal.hpp"

namespace lmkit {

using detail::RowMat;
using detail::Vec;

namespace {

Tensor to_tensor(const RowMat& m) {
  Tensor t = Tensor::zeros({m.rows(), m.cols()});
  std::copy(m.data(), m.data() + m.size(), t.data.begin());
  return t;
}

std::vector<double> flatten(const RowMat& m) {
  return std::vector<double>(m.data(), m.data() + m.size());
}

int head_classes(const TensorMap& weights, const std::string& bias_name) {
  return static_cast<int>(detail::param(weights, bias_name).shape[0]);
}

}  // namespace

std::vector<int32_t> first_subword_positions(const Batch& batch) {
  std::vector<int32_t> positions;
  for (int b = 0; b < batch.size; ++b) {
    int32_t previous = kNoWord;
    for (int t = 0; t < batch.seq_len; ++t) {
      size_t i = static_cast<size_t>(b) * batch.seq_len + static_cast<size_t>(t);
      int32_t w = batch.word_ids[i];
      if (w != kNoWord && w != previous) {
        positions.push_back(static_cast<int32_t>(i));
      }
      previous = w;
    }
  }
  return positions;
}

Tensor cls_classify_logits(const ForwardTrace& trace, const TensorMap& weights) {
  const ForwardTrace::Detail& D = *trace.detail;
  const int H = D.spec.hidden;
  const int C = head_classes(weights, "head.cls.b");
  RowMat rows(D.batch.size, H);
  for (int b = 0; b < D.batch.size; ++b) {
    rows.row(b) = D.hidden.row(static_cast<int64_t>(b) * D.batch.seq_len);
  }
  RowMat logits = rows * detail::mat(weights, "head.cls.w", H, C);
  logits.rowwise() += detail::vec(weights, "head.cls.b", C).transpose();
  return to_tensor(logits);
}

namespace {

// Pool-head forward pieces shared by the public accessor and the loss path.
struct PoolTrace {
  RowMat pre;     // x*W1 + b1
  RowMat pooled;  // per-sequence mean of gelu(pre) over unpadded positions
  std::vector<double> counts;
};

RowMat pool_forward(const ForwardTrace& trace, const TensorMap& weights, const Batch& batch,
                    PoolTrace* keep) {
  const ForwardTrace::Detail& D = *trace.detail;
  const int H = D.spec.hidden;
  const int C = head_classes(weights, "head.pool.b2");

  RowMat pre = D.hidden * detail::mat(weights, "head.pool.w1", H, H);
  pre.rowwise() += detail::vec(weights, "head.pool.b1", H).transpose();
  RowMat activated = detail::gelu_mat(pre);

  RowMat pooled = RowMat::Zero(batch.size, H);
  std::vector<double> counts(static_cast<size_t>(batch.size), 0.0);
  for (int b = 0; b < batch.size; ++b) {
    for (int t = 0; t < batch.seq_len; ++t) {
      size_t i = static_cast<size_t>(b) * batch.seq_len + static_cast<size_t>(t);
      if (!batch.attention_mask[i]) continue;
      pooled.row(b) += activated.row(static_cast<Eigen::Index>(i));
      counts[static_cast<size_t>(b)] += 1.0;
    }
    if (counts[static_cast<size_t>(b)] > 0) pooled.row(b) /= counts[static_cast<size_t>(b)];
  }

  RowMat logits = pooled * detail::mat(weights, "head.pool.w2", H, C);
  logits.rowwise() += detail::vec(weights, "head.pool.b2", C).transpose();
  if (keep) {
    keep->pre = std::move(pre);
    keep->pooled = std::move(pooled);
    keep->counts = std::move(counts);
  }
  return logits;
}

}  // namespace

Tensor electra_pool_classify_logits(const ForwardTrace& trace, const TensorMap& weights,
                                    const Batch& batch) {
  return to_tensor(pool_forward(trace, weights, batch, nullptr));
}

Tensor mlm_logits(const ForwardTrace& trace, const TensorMap& weights, std::string_view scope) {
  std::vector<int32_t> all(static_cast<size_t>(trace.detail->batch.positions()));
  for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int32_t>(i);
  return to_tensor(detail::mlm_head_forward(weights, trace, scope, all, nullptr));
}

namespace {

struct RtdTrace {
  RowMat pre;  // x*W + b, pre-GELU
};

std::vector<double> rtd_forward(const ForwardTrace& trace, const TensorMap& weights,
                                RtdTrace* keep) {
  const ForwardTrace::Detail& D = *trace.detail;
  const int H = D.spec.hidden;
  RowMat pre = D.hidden * detail::mat(weights, "rtd.transform.w", H, H);
  pre.rowwise() += detail::vec(weights, "rtd.transform.b", H).transpose();
  RowMat activated = detail::gelu_mat(pre);
  Vec out = activated * detail::vec(weights, "rtd.out.w", H);
  const double bias = detail::param(weights, "rtd.out.b").data[0];
  std::vector<double> logits(static_cast<size_t>(out.size()));
  for (Eigen::Index i = 0; i < out.size(); ++i) logits[static_cast<size_t>(i)] = out[i] + bias;
  if (keep) keep->pre = std::move(pre);
  return logits;
}

}  // namespace

std::vector<double> rtd_logits(const ForwardTrace& trace, const TensorMap& weights) {
  return rtd_forward(trace, weights, nullptr);
}

TokenTagLogits token_tag_logits(const ForwardTrace& trace, const TensorMap& weights,
                                const Batch& batch) {
  const ForwardTrace::Detail& D = *trace.detail;
  const int H = D.spec.hidden;
  const int C = head_classes(weights, "head.tag.b");
  TokenTagLogits out;
  out.token_positions = first_subword_positions(batch);
  RowMat rows(static_cast<Eigen::Index>(out.token_positions.size()), H);
  for (size_t i = 0; i < out.token_positions.size(); ++i) {
    rows.row(static_cast<Eigen::Index>(i)) = D.hidden.row(out.token_positions[i]);
    out.sequence_index.push_back(out.token_positions[i] / batch.seq_len);
  }
  RowMat logits = rows * detail::mat(weights, "head.tag.w", H, C);
  logits.rowwise() += detail::vec(weights, "head.tag.b", C).transpose();
  out.logits = to_tensor(logits);
  return out;
}

// ---------------------------------------------------------------------------
// Loss entries
// ---------------------------------------------------------------------------

namespace {

std::vector<int32_t> labeled_positions(const std::vector<int32_t>& labels) {
  std::vector<int32_t> rows;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != kIgnoreLabel) rows.push_back(static_cast<int32_t>(i));
  }
  return rows;
}

GradResult mlm_core(const TensorMap& weights, const ModelConfig& config, const Batch& masked,
                    const std::vector<int32_t>& labels, bool train_mode, uint64_t dropout_seed,
                    bool with_grads) {
  if (labels.size() != static_cast<size_t>(masked.positions())) {
    throw InputError("mlm labels must cover every position");
  }
  std::vector<int32_t> rows = labeled_positions(labels);
  if (rows.empty()) throw InputError("mlm loss needs at least one labeled position");
  std::vector<int32_t> row_labels;
  row_labels.reserve(rows.size());
  for (int32_t r : rows) row_labels.push_back(labels[static_cast<size_t>(r)]);

  ForwardTrace trace = encoder_forward(weights, config, "encoder", masked, train_mode,
                                       dropout_seed);
  detail::MlmHeadTrace head_trace;
  RowMat logits = detail::mlm_head_forward(weights, trace, "encoder", rows,
                                           with_grads ? &head_trace : nullptr);
  GradResult result;
  RowMat d_logits;
  result.loss = detail::cross_entropy_rows(logits, row_labels, with_grads ? &d_logits : nullptr);
  if (!std::isfinite(result.loss)) throw NumericError("non-finite MLM loss");
  if (!with_grads) return result;

  result.grads = detail::zero_grads(weights);
  RowMat d_hidden =
      detail::mlm_head_backward(weights, trace, "encoder", head_trace, d_logits, result.grads);
  result.d_final_hidden = flatten(d_hidden);
  detail::encoder_backward(trace, weights, d_hidden, result.grads);
  return result;
}

double bce_loss_and_grad(const std::vector<double>& logits, const std::vector<int8_t>& labels,
                         std::vector<double>* d_logits) {
  if (logits.size() != labels.size()) throw InputError("discriminator label count mismatch");
  double loss = 0.0;
  int64_t count = 0;
  for (size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] == kDiscIgnore) continue;
    double x = logits[i];
    double y = labels[i] == kDiscReplaced ? 1.0 : 0.0;
    loss += std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) - y * x;
    ++count;
  }
  if (count == 0) throw InputError("discriminator loss needs at least one labeled position");
  loss /= static_cast<double>(count);
  if (d_logits) {
    d_logits->assign(logits.size(), 0.0);
    for (size_t i = 0; i < logits.size(); ++i) {
      if (labels[i] == kDiscIgnore) continue;
      double y = labels[i] == kDiscReplaced ? 1.0 : 0.0;
      double sigma = 1.0 / (1.0 + std::exp(-logits[i]));
      (*d_logits)[i] = (sigma - y) / static_cast<double>(count);
    }
  }
  return loss;
}

GradResult electra_core(const TensorMap& weights, const ModelConfig& config,
                        const ElectraStep& step, double lambda, bool train_mode,
                        uint64_t dropout_seed, bool with_grads) {
  if (lambda < 0) throw ConfigError("lambda must be non-negative");
  GradResult result;
  if (with_grads) result.grads = detail::zero_grads(weights);

  // Generator MLM on the masked input.
  std::vector<int32_t> rows = labeled_positions(step.gen_labels);
  if (rows.empty()) throw InputError("electra step has no masked positions");
  std::vector<int32_t> row_labels;
  for (int32_t r : rows) row_labels.push_back(step.gen_labels[static_cast<size_t>(r)]);

  ForwardTrace gen_trace = encoder_forward(weights, config, "gen", step.masked, train_mode,
                                           detail::gen_stream_seed(dropout_seed));
  detail::MlmHeadTrace head_trace;
  RowMat gen_logits = detail::mlm_head_forward(weights, gen_trace, "gen", rows,
                                               with_grads ? &head_trace : nullptr);
  RowMat d_gen_logits;
  result.gen_loss = detail::cross_entropy_rows(gen_logits, row_labels,
                                               with_grads ? &d_gen_logits : nullptr);
  if (with_grads) {
    RowMat d_gen_hidden = detail::mlm_head_backward(weights, gen_trace, "gen", head_trace,
                                                    d_gen_logits, result.grads);
    detail::encoder_backward(gen_trace, weights, d_gen_hidden, result.grads);
  }

  // Discriminator BCE on the corrupted input.
  ForwardTrace disc_trace = encoder_forward(weights, config, "disc", step.corrupted, train_mode,
                                            detail::disc_stream_seed(dropout_seed));
  RtdTrace rtd_trace;
  std::vector<double> disc_logits = rtd_forward(disc_trace, weights,
                                                with_grads ? &rtd_trace : nullptr);
  std::vector<double> d_disc_logits;
  result.disc_bce = bce_loss_and_grad(disc_logits, step.disc_labels,
                                      with_grads ? &d_disc_logits : nullptr);
  result.loss = result.gen_loss + lambda * result.disc_bce;
  if (!std::isfinite(result.loss)) throw NumericError("non-finite ELECTRA loss");
  if (!with_grads) return result;

  const ForwardTrace::Detail& D = *disc_trace.detail;
  const int H = D.spec.hidden;
  Vec d_out(static_cast<Eigen::Index>(d_disc_logits.size()));
  for (size_t i = 0; i < d_disc_logits.size(); ++i) {
    d_out[static_cast<Eigen::Index>(i)] = lambda * d_disc_logits[i];
  }
  RowMat activated = detail::gelu_mat(rtd_trace.pre);
  detail::grad_vec(result.grads, "rtd.out.w", H) += activated.transpose() * d_out;
  result.grads["rtd.out.b"].data[0] += d_out.sum();
  RowMat dact = d_out * detail::vec(weights, "rtd.out.w", H).transpose();
  RowMat dpre = dact.cwiseProduct(
      rtd_trace.pre.unaryExpr([](double v) { return detail::gelu_grad(v); }));
  detail::grad_mat(result.grads, "rtd.transform.w", H, H).noalias() +=
      D.hidden.transpose() * dpre;
  detail::grad_vec(result.grads, "rtd.transform.b", H) += dpre.colwise().sum().transpose();
  RowMat d_disc_hidden = dpre * detail::mat(weights, "rtd.transform.w", H, H).transpose();

  result.d_final_hidden = flatten(d_disc_hidden);
  detail::encoder_backward(disc_trace, weights, d_disc_hidden, result.grads);
  return result;
}

GradResult classify_core(const TensorMap& weights, const ModelConfig& config, Arch arch,
                         HeadKind head, const Batch& batch, const std::vector<int32_t>& labels,
                         bool train_mode, uint64_t dropout_seed, bool with_grads) {
  if (head != HeadKind::kClsClassify && head != HeadKind::kElectraPoolClassify) {
    throw ConfigError("classify_gradients requires a classification head");
  }
  if (labels.size() != static_cast<size_t>(batch.size)) {
    throw InputError("one label per sequence required");
  }
  const std::string scope = task_scope(arch);
  ForwardTrace trace = encoder_forward(weights, config, scope, batch, train_mode, dropout_seed);
  const ForwardTrace::Detail& D = *trace.detail;
  const int H = D.spec.hidden;

  GradResult result;
  RowMat d_logits;
  if (head == HeadKind::kClsClassify) {
    const int C = head_classes(weights, "head.cls.b");
    RowMat rows(batch.size, H);
    for (int b = 0; b < batch.size; ++b) {
      rows.row(b) = D.hidden.row(static_cast<int64_t>(b) * batch.seq_len);
    }
    RowMat logits = rows * detail::mat(weights, "head.cls.w", H, C);
    logits.rowwise() += detail::vec(weights, "head.cls.b", C).transpose();
    result.loss = detail::cross_entropy_rows(logits, labels, with_grads ? &d_logits : nullptr);
    if (!std::isfinite(result.loss)) throw NumericError("non-finite classification loss");
    if (!with_grads) return result;

    result.grads = detail::zero_grads(weights);
    detail::grad_mat(result.grads, "head.cls.w", H, C).noalias() += rows.transpose() * d_logits;
    detail::grad_vec(result.grads, "head.cls.b", C) += d_logits.colwise().sum().transpose();
    RowMat d_rows = d_logits * detail::mat(weights, "head.cls.w", H, C).transpose();
    RowMat d_hidden = RowMat::Zero(batch.positions(), H);
    for (int b = 0; b < batch.size; ++b) {
      d_hidden.row(static_cast<int64_t>(b) * batch.seq_len) = d_rows.row(b);
    }
    result.d_final_hidden = flatten(d_hidden);
    detail::encoder_backward(trace, weights, d_hidden, result.grads);
    return result;
  }

  // electra_pool_classify
  const int C = head_classes(weights, "head.pool.b2");
  PoolTrace pool;
  RowMat logits = pool_forward(trace, weights, batch, &pool);
  result.loss = detail::cross_entropy_rows(logits, labels, with_grads ? &d_logits : nullptr);
  if (!std::isfinite(result.loss)) throw NumericError("non-finite classification loss");
  if (!with_grads) return result;

  result.grads = detail::zero_grads(weights);
  detail::grad_mat(result.grads, "head.pool.w2", H, C).noalias() +=
      pool.pooled.transpose() * d_logits;
  detail::grad_vec(result.grads, "head.pool.b2", C) += d_logits.colwise().sum().transpose();
  RowMat d_pooled = d_logits * detail::mat(weights, "head.pool.w2", H, C).transpose();

  RowMat d_act = RowMat::Zero(batch.positions(), H);
  for (int b = 0; b < batch.size; ++b) {
    if (pool.counts[static_cast<size_t>(b)] == 0) continue;
    for (int t = 0; t < batch.seq_len; ++t) {
      size_t i = static_cast<size_t>(b) * batch.seq_len + static_cast<size_t>(t);
      if (!batch.attention_mask[i]) continue;
      d_act.row(static_cast<Eigen::Index>(i)) =
          d_pooled.row(b) / pool.counts[static_cast<size_t>(b)];
    }
  }
  RowMat dpre = d_act.cwiseProduct(
      pool.pre.unaryExpr([](double v) { return detail::gelu_grad(v); }));
  detail::grad_mat(result.grads, "head.pool.w1", H, H).noalias() += D.hidden.transpose() * dpre;
  detail::grad_vec(result.grads, "head.pool.b1", H) += dpre.colwise().sum().transpose();
  RowMat d_hidden = dpre * detail::mat(weights, "head.pool.w1", H, H).transpose();
  result.d_final_hidden = flatten(d_hidden);
  detail::encoder_backward(trace, weights, d_hidden, result.grads);
  return result;
}

GradResult token_tag_core(const TensorMap& weights, const ModelConfig& config, Arch arch,
                          const Batch& batch, const std::vector<int32_t>& word_labels,
                          bool train_mode, uint64_t dropout_seed, bool with_grads) {
  const std::string scope = task_scope(arch);
  ForwardTrace trace = encoder_forward(weights, config, scope, batch, train_mode, dropout_seed);
  const ForwardTrace::Detail& D = *trace.detail;
  const int H = D.spec.hidden;
  const int C = head_classes(weights, "head.tag.b");

  std::vector<int32_t> positions = first_subword_positions(batch);
  if (word_labels.size() != positions.size()) {
    throw InputError("one label per word required (" + std::to_string(positions.size()) +
                     " words, " + std::to_string(word_labels.size()) + " labels)");
  }
  std::vector<int32_t> rows;
  std::vector<int32_t> labels;
  for (size_t i = 0; i < positions.size(); ++i) {
    if (word_labels[i] == kIgnoreLabel) continue;
    rows.push_back(positions[i]);
    labels.push_back(word_labels[i]);
  }
  if (rows.empty()) throw InputError("token tagging needs at least one labeled word");

  RowMat selected(static_cast<Eigen::Index>(rows.size()), H);
  for (size_t i = 0; i < rows.size(); ++i) {
    selected.row(static_cast<Eigen::Index>(i)) = D.hidden.row(rows[i]);
  }
  RowMat logits = selected * detail::mat(weights, "head.tag.w", H, C);
  logits.rowwise() += detail::vec(weights, "head.tag.b", C).transpose();

  GradResult result;
  RowMat d_logits;
  result.loss = detail::cross_entropy_rows(logits, labels, with_grads ? &d_logits : nullptr);
  if (!std::isfinite(result.loss)) throw NumericError("non-finite tagging loss");
  if (!with_grads) return result;

  result.grads = detail::zero_grads(weights);
  detail::grad_mat(result.grads, "head.tag.w", H, C).noalias() +=
      selected.transpose() * d_logits;
  detail::grad_vec(result.grads, "head.tag.b", C) += d_logits.colwise().sum().transpose();
  RowMat d_rows = d_logits * detail::mat(weights, "head.tag.w", H, C).transpose();
  RowMat d_hidden = RowMat::Zero(batch.positions(), H);
  for (size_t i = 0; i < rows.size(); ++i) {
    d_hidden.row(rows[i]) += d_rows.row(static_cast<Eigen::Index>(i));
  }
  result.d_final_hidden = flatten(d_hidden);
  detail::encoder_backward(trace, weights, d_hidden, result.grads);
  return result;
}

}  // namespace

GradResult mlm_gradients(const TensorMap& weights, const ModelConfig& config, const Batch& masked,
                         const std::vector<int32_t>& labels, bool train_mode,
                         uint64_t dropout_seed) {
  return mlm_core(weights, config, masked, labels, train_mode, dropout_seed, true);
}

double mlm_loss_value(const TensorMap& weights, const ModelConfig& config, const Batch& masked,
                      const std::vector<int32_t>& labels, bool train_mode, uint64_t dropout_seed) {
  return mlm_core(weights, config, masked, labels, train_mode, dropout_seed, false).loss;
}

GradResult electra_gradients(const TensorMap& weights, const ModelConfig& config,
                             const ElectraStep& step, double lambda, bool train_mode,
                             uint64_t dropout_seed) {
  return electra_core(weights, config, step, lambda, train_mode, dropout_seed, true);
}

double electra_loss_value(const TensorMap& weights, const ModelConfig& config,
                          const ElectraStep& step, double lambda, bool train_mode,
                          uint64_t dropout_seed) {
  return electra_core(weights, config, step, lambda, train_mode, dropout_seed, false).loss;
}

GradResult classify_gradients(const TensorMap& weights, const ModelConfig& config, Arch arch,
                              HeadKind head, const Batch& batch,
                              const std::vector<int32_t>& labels, bool train_mode,
                              uint64_t dropout_seed) {
  return classify_core(weights, config, arch, head, batch, labels, train_mode, dropout_seed, true);
}

double classify_loss_value(const TensorMap& weights, const ModelConfig& config, Arch arch,
                           HeadKind head, const Batch& batch, const std::vector<int32_t>& labels,
                           bool train_mode, uint64_t dropout_seed) {
  return classify_core(weights, config, arch, head, batch, labels, train_mode, dropout_seed, false)
      .loss;
}

GradResult token_tag_gradients(const TensorMap& weights, const ModelConfig& config, Arch arch,
                               const Batch& batch, const std::vector<int32_t>& word_labels,
                               bool train_mode, uint64_t dropout_seed) {
  return token_tag_core(weights, config, arch, batch, word_labels, train_mode, dropout_seed, true);
}

double token_tag_loss_value(const TensorMap& weights, const ModelConfig& config, Arch arch,
                            const Batch& batch, const std::vector<int32_t>& word_labels,
                            bool train_mode, uint64_t dropout_seed) {
  return token_tag_core(weights, config, arch, batch, word_labels, train_mode, dropout_seed, false)
      .loss;
}

}  // namespace lmkit
