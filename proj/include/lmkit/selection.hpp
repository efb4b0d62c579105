#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "lmkit/finetune.hpp"

namespace lmkit {

struct EvalRecord {
  int64_t checkpoint_step = 0;
  std::string task;
  uint64_t seed = 0;
  double f1 = 0.0;  // in [0,1]
};

struct CheckpointScore {
  int64_t step = 0;
  std::map<std::string, double> best_per_task;
  double avg_f1 = 0.0;
};

struct SelectionReport {
  std::vector<EvalRecord> records;
  std::vector<CheckpointScore> scores;  // sorted by step
  int64_t selected_step = 0;
};

/// Fine-tunes and scores one checkpoint on every task: classification tasks
/// run once per seed (early-stopped), NER tasks run once with the first
/// seed. Seeds must be distinct. jobs > 1 runs independent runs on worker
/// threads; record order is fixed regardless.
std::vector<EvalRecord> evaluate_checkpoint(const TrainState& checkpoint,
                                            const std::vector<TaskSpec>& tasks,
                                            const std::vector<uint64_t>& seeds, const Vocab& vocab,
                                            int jobs = 1);

/// Best run per task (max over seeds), unweighted mean across tasks. Every
/// named task needs at least one record.
double aggregate_score(const std::vector<EvalRecord>& records,
                       const std::vector<std::string>& task_names);

/// Argmax of avg_f1; ties go to the smallest step. Throws SelectionError on
/// empty input.
int64_t select_best(const std::vector<CheckpointScore>& scores);

/// Groups records by checkpoint, aggregates and selects.
SelectionReport build_report(const std::vector<EvalRecord>& records,
                             const std::vector<std::string>& task_names);

/// TSV: header step/task/seed/f1 and one row per record, then a summary
/// block (step, avg_f1), then `selected<TAB>step`. Scores are written as
/// percentages with two decimals.
void write_report(std::ostream& out, const SelectionReport& report);

/// Reads the record rows back (summary lines are ignored; aggregation is
/// recomputed from the records).
std::vector<EvalRecord> read_report_records(std::istream& in);

}  // namespace lmkit
