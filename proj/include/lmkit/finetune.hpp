#pragma once

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "lmkit/model.hpp"
#include "lmkit/tokenizer.hpp"
#include "lmkit/trainer.hpp"

namespace lmkit {

enum class TaskKind { kClassification, kNer };
enum class TaskMetric { kMacroF1, kSpanMicroF1 };

/// Downstream task definition plus its fine-tuning hyperparameters.
struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::kClassification;
  std::vector<std::string> classes;  // class labels, or entity classes for NER
  int max_epochs = 5;
  int64_t max_train_steps = 705;
  int64_t eval_every_steps = 50;
  double lr = 5e-6;
  int batch_size = 32;
  int max_seq_len = 150;
  TaskMetric metric = TaskMetric::kMacroF1;
  int patience = 5;
  std::string train_path;
  std::string dev_path;
  std::string test_path;

  void validate() const;
};

/// key=value task file, one entry per line; classes comma-separated.
TaskSpec load_task_spec(const std::string& path);

struct ClassificationExample {
  std::string text;
  int32_t label = 0;
};

struct NerExample {
  std::vector<std::string> tokens;
  std::vector<int32_t> tags;  // BIO tag ids, one per token
};

/// TSV `text<TAB>label`, one example per line. Unknown labels raise
/// DataError naming the line.
std::vector<ClassificationExample> load_classification_tsv(const std::string& path,
                                                           const std::vector<std::string>& classes);

/// CoNLL-style `token<TAB>tag` lines with blank lines between sentences.
std::vector<NerExample> load_ner_conll(const std::string& path,
                                       const std::vector<std::string>& classes);

// BIO tag ids: 0 is O, class c maps to B=1+2c and I=2+2c.
inline constexpr int32_t kTagOutside = 0;
inline int32_t tag_begin(int32_t cls) { return 1 + 2 * cls; }
inline int32_t tag_inside(int32_t cls) { return 2 + 2 * cls; }
int32_t parse_bio_tag(const std::string& tag, const std::vector<std::string>& classes);
std::string bio_tag_name(int32_t tag, const std::vector<std::string>& classes);
inline int num_bio_tags(int entity_classes) { return 1 + 2 * entity_classes; }

/// Unweighted mean of per-class F1 over all n_classes classes; a class with
/// no predicted and no gold instances contributes 0.
double macro_f1(const std::vector<int32_t>& predictions, const std::vector<int32_t>& gold,
                int n_classes);

struct Span {
  int32_t cls;
  int32_t start;
  int32_t end;  // half-open
  auto operator<=>(const Span&) const = default;
};

/// Maximal well-formed spans; an I- tag following O or a different class is
/// repaired to B-.
std::vector<Span> decode_bio_spans(const std::vector<int32_t>& tags);

/// Micro-averaged F1 over exact (class, start, end) matches pooled across
/// sentences.
double span_micro_f1(const std::vector<std::vector<int32_t>>& predictions,
                     const std::vector<std::vector<int32_t>>& gold);

/// Best-dev bookkeeping: strict improvement resets the patience counter, so
/// a tie keeps the earlier evaluation's weights.
struct EarlyStopper {
  int patience = 5;
  double best = -1.0;
  int evals_since_best = 0;

  /// Returns true when this evaluation improved on the best so far.
  bool observe(double metric) {
    if (metric > best) {
      best = metric;
      evals_since_best = 0;
      return true;
    }
    ++evals_since_best;
    return false;
  }
  bool should_stop() const { return evals_since_best >= patience; }
};

struct RunResult {
  std::string task;
  uint64_t seed = 0;
  double best_dev = 0.0;
  double test = 0.0;
  int64_t steps_trained = 0;
  bool stopped_early = false;
};

/// One TSV row: task seed best_dev test steps stopped_early.
void write_run_result(std::ostream& out, const RunResult& r);

/// Fine-tunes a pretrained checkpoint on one task with one seed: attaches
/// the head implied by the checkpoint objective (cls_classify for BERT,
/// electra_pool_classify for ELECTRA, token_tag for NER), trains with Adam
/// under a linear-decay schedule, evaluates dev every eval_every_steps,
/// keeps the best-dev weights (ties keep the earlier), early-stops
/// classification runs after `patience` evaluations without improvement,
/// and reports the test metric of the best-dev weights.
RunResult finetune_run(const TrainState& checkpoint, const TaskSpec& task, const Vocab& vocab,
                       uint64_t seed);

}  // namespace lmkit
