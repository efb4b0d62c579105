#include "lmkit/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

namespace lmkit {

void TaskSpec::validate() const {
  if (name.empty()) throw ConfigError("task needs a name");
  if (classes.empty()) throw ConfigError("task needs at least one class");
  if (kind == TaskKind::kClassification && classes.size() < 2) {
    throw ConfigError("classification needs at least two classes");
  }
  if ((metric == TaskMetric::kMacroF1) != (kind == TaskKind::kClassification)) {
    throw ConfigError("macro_f1 goes with classification, span_micro_f1 with ner");
  }
  if (max_epochs < 1 || max_train_steps < 1 || batch_size < 1 || max_seq_len < 8) {
    throw ConfigError("task hyperparameters must be positive (max_seq_len >= 8)");
  }
  if (eval_every_steps < 1 || eval_every_steps > max_train_steps) {
    throw ConfigError("eval_every_steps must be in [1, max_train_steps]");
  }
  if (lr <= 0) throw ConfigError("task lr must be positive");
  if (patience < 1) throw ConfigError("patience must be positive");
}

TaskSpec load_task_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open task file: " + path);
  TaskSpec task;
  bool metric_given = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key == "name") {
      task.name = value;
    } else if (key == "kind") {
      if (value == "classification") {
        task.kind = TaskKind::kClassification;
      } else if (value == "ner") {
        task.kind = TaskKind::kNer;
      } else {
        throw DataError(path + ": unknown kind: " + value);
      }
    } else if (key == "classes") {
      task.classes.clear();
      std::istringstream cs(value);
      std::string c;
      while (std::getline(cs, c, ',')) {
        if (!c.empty()) task.classes.push_back(c);
      }
    } else if (key == "max_epochs") {
      task.max_epochs = std::stoi(value);
    } else if (key == "max_train_steps") {
      task.max_train_steps = std::stoll(value);
    } else if (key == "eval_every_steps") {
      task.eval_every_steps = std::stoll(value);
    } else if (key == "lr") {
      task.lr = std::stod(value);
    } else if (key == "batch_size") {
      task.batch_size = std::stoi(value);
    } else if (key == "max_seq_len") {
      task.max_seq_len = std::stoi(value);
    } else if (key == "patience") {
      task.patience = std::stoi(value);
    } else if (key == "metric") {
      metric_given = true;
      if (value == "macro_f1") {
        task.metric = TaskMetric::kMacroF1;
      } else if (value == "span_micro_f1") {
        task.metric = TaskMetric::kSpanMicroF1;
      } else {
        throw DataError(path + ": unknown metric: " + value);
      }
    } else if (key == "train") {
      task.train_path = value;
    } else if (key == "dev") {
      task.dev_path = value;
    } else if (key == "test") {
      task.test_path = value;
    } else {
      throw DataError(path + ": unknown task key: " + key);
    }
  }
  if (!metric_given) {
    task.metric = task.kind == TaskKind::kClassification ? TaskMetric::kMacroF1
                                                         : TaskMetric::kSpanMicroF1;
  }
  task.validate();
  return task;
}

std::vector<ClassificationExample> load_classification_tsv(
    const std::string& path, const std::vector<std::string>& classes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::vector<ClassificationExample> examples;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected text<TAB>label");
    }
    std::string text = line.substr(0, tab);
    std::string label = line.substr(tab + 1);
    auto it = std::find(classes.begin(), classes.end(), label);
    if (it == classes.end()) {
      throw DataError(path + ":" + std::to_string(line_no) + ": unknown label: " + label);
    }
    examples.push_back({std::move(text), static_cast<int32_t>(it - classes.begin())});
  }
  if (examples.empty()) throw DataError("empty dataset: " + path);
  return examples;
}

int32_t parse_bio_tag(const std::string& tag, const std::vector<std::string>& classes) {
  if (tag == "O") return kTagOutside;
  if (tag.size() > 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') {
    std::string cls = tag.substr(2);
    auto it = std::find(classes.begin(), classes.end(), cls);
    if (it != classes.end()) {
      int32_t c = static_cast<int32_t>(it - classes.begin());
      return tag[0] == 'B' ? tag_begin(c) : tag_inside(c);
    }
  }
  throw DataError("unknown BIO tag: " + tag);
}

std::string bio_tag_name(int32_t tag, const std::vector<std::string>& classes) {
  if (tag == kTagOutside) return "O";
  int32_t c = (tag - 1) / 2;
  if (c < 0 || c >= static_cast<int32_t>(classes.size())) {
    throw DataError("tag id out of range: " + std::to_string(tag));
  }
  return (tag % 2 == 1 ? "B-" : "I-") + classes[static_cast<size_t>(c)];
}

std::vector<NerExample> load_ner_conll(const std::string& path,
                                       const std::vector<std::string>& classes) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset: " + path);
  std::vector<NerExample> examples;
  NerExample current;
  std::string line;
  int line_no = 0;
  auto flush = [&] {
    if (!current.tokens.empty()) {
      examples.push_back(std::move(current));
      current = {};
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path + ":" + std::to_string(line_no) + ": expected token<TAB>tag");
    }
    std::string token = line.substr(0, tab);
    std::string tag = line.substr(tab + 1);
    try {
      current.tags.push_back(parse_bio_tag(tag, classes));
    } catch (const DataError&) {
      throw DataError(path + ":" + std::to_string(line_no) + ": unknown tag: " + tag);
    }
    current.tokens.push_back(std::move(token));
  }
  flush();
  if (examples.empty()) throw DataError("empty dataset: " + path);
  return examples;
}

// --------------------------------------------------------------------------
// Metrics
// --------------------------------------------------------------------------

double macro_f1(const std::vector<int32_t>& predictions, const std::vector<int32_t>& gold,
                int n_classes) {
  if (predictions.empty()) throw MetricError("macro_f1 over empty input");
  if (predictions.size() != gold.size()) throw MetricError("prediction/gold length mismatch");
  if (n_classes < 1) throw MetricError("macro_f1 needs at least one class");
  std::vector<int64_t> tp(static_cast<size_t>(n_classes), 0);
  std::vector<int64_t> fp(static_cast<size_t>(n_classes), 0);
  std::vector<int64_t> fn(static_cast<size_t>(n_classes), 0);
  for (size_t i = 0; i < predictions.size(); ++i) {
    int32_t p = predictions[i];
    int32_t g = gold[i];
    if (p < 0 || p >= n_classes || g < 0 || g >= n_classes) {
      throw MetricError("label outside the class set");
    }
    if (p == g) {
      tp[static_cast<size_t>(p)] += 1;
    } else {
      fp[static_cast<size_t>(p)] += 1;
      fn[static_cast<size_t>(g)] += 1;
    }
  }
  double sum = 0.0;
  for (int c = 0; c < n_classes; ++c) {
    size_t i = static_cast<size_t>(c);
    double denom = static_cast<double>(2 * tp[i] + fp[i] + fn[i]);
    // A class that never occurs (predicted or gold) contributes 0.
    sum += denom > 0 ? 2.0 * static_cast<double>(tp[i]) / denom : 0.0;
  }
  return sum / static_cast<double>(n_classes);
}

std::vector<Span> decode_bio_spans(const std::vector<int32_t>& tags) {
  std::vector<Span> spans;
  int32_t open_class = -1;
  int32_t open_start = 0;
  auto close = [&](int32_t end) {
    if (open_class >= 0) spans.push_back({open_class, open_start, end});
    open_class = -1;
  };
  for (size_t i = 0; i < tags.size(); ++i) {
    int32_t tag = tags[i];
    if (tag == kTagOutside) {
      close(static_cast<int32_t>(i));
      continue;
    }
    int32_t cls = (tag - 1) / 2;
    bool begin = tag % 2 == 1;
    // An I- tag that follows O or a different class starts a new span.
    if (begin || cls != open_class) {
      close(static_cast<int32_t>(i));
      open_class = cls;
      open_start = static_cast<int32_t>(i);
    }
  }
  close(static_cast<int32_t>(tags.size()));
  return spans;
}

double span_micro_f1(const std::vector<std::vector<int32_t>>& predictions,
                     const std::vector<std::vector<int32_t>>& gold) {
  if (predictions.size() != gold.size()) throw MetricError("sentence count mismatch");
  if (predictions.empty()) throw MetricError("span_micro_f1 over empty input");
  int64_t tp = 0;
  int64_t fp = 0;
  int64_t fn = 0;
  for (size_t s = 0; s < predictions.size(); ++s) {
    if (predictions[s].size() != gold[s].size()) {
      throw DataError("sentence " + std::to_string(s) + ": tag sequence length mismatch");
    }
    std::vector<Span> pred_spans = decode_bio_spans(predictions[s]);
    std::vector<Span> gold_spans = decode_bio_spans(gold[s]);
    std::set<Span> gold_set(gold_spans.begin(), gold_spans.end());
    for (const Span& span : pred_spans) {
      if (gold_set.erase(span) > 0) {
        tp += 1;
      } else {
        fp += 1;
      }
    }
    fn += static_cast<int64_t>(gold_set.size());
  }
  double denom = static_cast<double>(2 * tp + fp + fn);
  return denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

void write_run_result(std::ostream& out, const RunResult& r) {
  char line[192];
  std::snprintf(line, sizeof(line), "%s\t%llu\t%.2f\t%.2f\t%lld\t%d", r.task.c_str(),
                static_cast<unsigned long long>(r.seed), 100.0 * r.best_dev, 100.0 * r.test,
                static_cast<long long>(r.steps_trained), r.stopped_early ? 1 : 0);
  out << line << '\n';
}

// --------------------------------------------------------------------------
// Fine-tuning
// --------------------------------------------------------------------------

namespace {

struct PreparedExample {
  Encoding encoding;
  int32_t label = 0;                 // classification
  std::vector<int32_t> word_labels;  // ner: one per kept word
  std::vector<int32_t> gold_tags;    // ner: full gold tag sequence
  size_t kept_words = 0;
};

PreparedExample prepare_classification(const ClassificationExample& ex, const Vocab& vocab,
                                       int max_seq_len) {
  Encoding raw = encode(ex.text, vocab);
  size_t cap = static_cast<size_t>(max_seq_len) - 2;
  size_t n = std::min(raw.size(), cap);
  PreparedExample out;
  out.label = ex.label;
  Encoding& enc = out.encoding;
  enc.token_ids.push_back(kClsId);
  enc.word_ids.push_back(kNoWord);
  enc.attention_mask.push_back(1);
  for (size_t i = 0; i < n; ++i) {
    enc.token_ids.push_back(raw.token_ids[i]);
    enc.word_ids.push_back(raw.word_ids[i]);
    enc.attention_mask.push_back(1);
  }
  enc.token_ids.push_back(kSepId);
  enc.word_ids.push_back(kNoWord);
  enc.attention_mask.push_back(1);
  return out;
}

PreparedExample prepare_ner(const NerExample& ex, const Vocab& vocab, int max_seq_len) {
  if (ex.tokens.size() != ex.tags.size()) throw DataError("ner example tokens/tags disagree");
  size_t cap = static_cast<size_t>(max_seq_len) - 2;
  PreparedExample out;
  out.gold_tags = ex.tags;
  Encoding& enc = out.encoding;
  enc.token_ids.push_back(kClsId);
  enc.word_ids.push_back(kNoWord);
  enc.attention_mask.push_back(1);
  size_t used = 0;
  for (size_t w = 0; w < ex.tokens.size(); ++w) {
    std::vector<int32_t> pieces = word_pieces(ex.tokens[w], vocab);
    if (used + pieces.size() > cap) {
      if (out.kept_words == 0 && used < cap) {
        pieces.resize(cap - used);  // keep at least one (truncated) word
      } else {
        break;
      }
    }
    for (int32_t id : pieces) {
      enc.token_ids.push_back(id);
      enc.word_ids.push_back(static_cast<int32_t>(w));
      enc.attention_mask.push_back(1);
    }
    used += pieces.size();
    out.word_labels.push_back(ex.tags[w]);
    out.kept_words += 1;
  }
  enc.token_ids.push_back(kSepId);
  enc.word_ids.push_back(kNoWord);
  enc.attention_mask.push_back(1);
  return out;
}

struct EvalSets {
  std::vector<PreparedExample> train, dev, test;
};

EvalSets load_prepared(const TaskSpec& task, const Vocab& vocab) {
  EvalSets sets;
  auto prepare_file = [&](const std::string& path) {
    std::vector<PreparedExample> out;
    if (task.kind == TaskKind::kClassification) {
      for (const auto& ex : load_classification_tsv(path, task.classes)) {
        out.push_back(prepare_classification(ex, vocab, task.max_seq_len));
      }
    } else {
      for (const auto& ex : load_ner_conll(path, task.classes)) {
        out.push_back(prepare_ner(ex, vocab, task.max_seq_len));
      }
    }
    return out;
  };
  sets.train = prepare_file(task.train_path);
  sets.dev = prepare_file(task.dev_path);
  sets.test = prepare_file(task.test_path);
  return sets;
}

double evaluate_split(const std::vector<PreparedExample>& split, const TaskSpec& task,
                      const TensorMap& weights, const ModelConfig& config, Arch arch,
                      HeadKind head) {
  const std::string scope = task_scope(arch);
  std::vector<int32_t> cls_preds, cls_gold;
  std::vector<std::vector<int32_t>> tag_preds, tag_gold;

  for (size_t begin = 0; begin < split.size(); begin += static_cast<size_t>(task.batch_size)) {
    size_t end = std::min(split.size(), begin + static_cast<size_t>(task.batch_size));
    std::vector<Encoding> encs;
    for (size_t i = begin; i < end; ++i) encs.push_back(split[i].encoding);
    Batch batch = make_batch(encs, task.max_seq_len);
    ForwardTrace trace = encoder_forward(weights, config, scope, batch, false, 0);

    if (task.kind == TaskKind::kClassification) {
      Tensor logits = head == HeadKind::kClsClassify
                          ? cls_classify_logits(trace, weights)
                          : electra_pool_classify_logits(trace, weights, batch);
      for (size_t i = begin; i < end; ++i) {
        int64_t row = static_cast<int64_t>(i - begin);
        int32_t best = 0;
        for (int32_t c = 1; c < logits.cols(); ++c) {
          if (logits.at(row, c) > logits.at(row, best)) best = c;
        }
        cls_preds.push_back(best);
        cls_gold.push_back(split[i].label);
      }
    } else {
      TokenTagLogits logits = token_tag_logits(trace, weights, batch);
      size_t word = 0;
      for (size_t i = begin; i < end; ++i) {
        std::vector<int32_t> pred(split[i].gold_tags.size(), kTagOutside);
        for (size_t w = 0; w < split[i].kept_words; ++w, ++word) {
          int32_t best = 0;
          for (int32_t c = 1; c < logits.logits.cols(); ++c) {
            if (logits.logits.at(static_cast<int64_t>(word), c) >
                logits.logits.at(static_cast<int64_t>(word), best)) {
              best = c;
            }
          }
          pred[w] = best;  // words lost to truncation stay O
        }
        tag_preds.push_back(std::move(pred));
        tag_gold.push_back(split[i].gold_tags);
      }
      if (word != logits.token_positions.size()) {
        throw InputError("word count mismatch during evaluation");
      }
    }
  }
  return task.kind == TaskKind::kClassification
             ? macro_f1(cls_preds, cls_gold, static_cast<int>(task.classes.size()))
             : span_micro_f1(tag_preds, tag_gold);
}

}  // namespace

RunResult finetune_run(const TrainState& checkpoint, const TaskSpec& task, const Vocab& vocab,
                       uint64_t seed) {
  task.validate();
  const ModelConfig& config = checkpoint.config;
  if (vocab.size() != config.vocab_size) {
    throw ConfigError("vocabulary size does not match the checkpoint");
  }
  if (task.max_seq_len > config.max_seq_len) {
    throw ConfigError("task max_seq_len exceeds the checkpoint's maximum");
  }

  const HeadKind head = task.kind == TaskKind::kNer ? HeadKind::kTokenTag
                        : checkpoint.arch == Arch::kBert ? HeadKind::kClsClassify
                                                         : HeadKind::kElectraPoolClassify;
  const int head_classes = task.kind == TaskKind::kNer
                               ? num_bio_tags(static_cast<int>(task.classes.size()))
                               : static_cast<int>(task.classes.size());

  TensorMap weights = finetune_weights(checkpoint.weights, checkpoint.arch, config, head,
                                       head_classes, mix_seed(seed, 0xeadd));
  Rng rng(mix_seed(seed, 0xf17e));
  EvalSets data = load_prepared(task, vocab);

  const int64_t steps_per_epoch =
      static_cast<int64_t>((data.train.size() + static_cast<size_t>(task.batch_size) - 1) /
                           static_cast<size_t>(task.batch_size));
  const int64_t planned =
      std::min<int64_t>(task.max_train_steps, steps_per_epoch * task.max_epochs);

  OptimizerState opt;
  opt.hp = {0.9, 0.999, 1e-8, 0.0};  // no weight decay during fine-tuning
  for (const auto& [name, tensor] : weights) {
    opt.m.emplace(name, Tensor::zeros(tensor.shape));
    opt.v.emplace(name, Tensor::zeros(tensor.shape));
  }

  RunResult result;
  result.task = task.name;
  result.seed = seed;
  EarlyStopper stopper{task.patience};
  TensorMap best_weights = weights;

  std::vector<size_t> order(data.train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  int64_t epoch_pos = steps_per_epoch;  // force a shuffle before the first step

  for (int64_t step = 1; step <= planned; ++step) {
    if (epoch_pos >= steps_per_epoch) {
      rng.shuffle(order);
      epoch_pos = 0;
    }
    size_t begin = static_cast<size_t>(epoch_pos) * static_cast<size_t>(task.batch_size);
    size_t end = std::min(order.size(), begin + static_cast<size_t>(task.batch_size));
    epoch_pos += 1;

    std::vector<Encoding> encs;
    std::vector<int32_t> cls_labels;
    std::vector<int32_t> word_labels;
    for (size_t i = begin; i < end; ++i) {
      const PreparedExample& ex = data.train[order[i]];
      encs.push_back(ex.encoding);
      if (task.kind == TaskKind::kClassification) {
        cls_labels.push_back(ex.label);
      } else {
        word_labels.insert(word_labels.end(), ex.word_labels.begin(), ex.word_labels.end());
      }
    }
    Batch batch = make_batch(encs, task.max_seq_len);
    uint64_t dropout_seed = rng.next_u64();

    GradResult grads =
        task.kind == TaskKind::kClassification
            ? classify_gradients(weights, config, checkpoint.arch, head, batch, cls_labels, true,
                                 dropout_seed)
            : token_tag_gradients(weights, config, checkpoint.arch, batch, word_labels, true,
                                  dropout_seed);

    // Linear decay without warmup across the planned run.
    double lr = task.lr * static_cast<double>(planned - (step - 1)) /
                static_cast<double>(planned);
    adam_step(opt, weights, grads.grads, lr);
    result.steps_trained = step;

    if (step % task.eval_every_steps == 0 || step == planned) {
      double dev = evaluate_split(data.dev, task, weights, config, checkpoint.arch, head);
      if (stopper.observe(dev)) best_weights = weights;
      if (task.kind == TaskKind::kClassification && stopper.should_stop()) {
        result.stopped_early = true;
        break;
      }
    }
  }

  result.best_dev = std::max(stopper.best, 0.0);
  result.test = evaluate_split(data.test, task, best_weights, config, checkpoint.arch, head);
  return result;
}

}  // namespace lmkit
