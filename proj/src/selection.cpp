#include "lmkit/selection.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <istream>
#include <map>
#include <mutex>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

namespace lmkit {

std::vector<EvalRecord> evaluate_checkpoint(const TrainState& checkpoint,
                                            const std::vector<TaskSpec>& tasks,
                                            const std::vector<uint64_t>& seeds, const Vocab& vocab,
                                            int jobs) {
  if (tasks.empty()) throw ConfigError("no tasks configured");
  if (seeds.empty()) throw ConfigError("no seeds configured");
  if (std::set<uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  for (const TaskSpec& task : tasks) task.validate();

  // Fixed run list: classification tasks once per seed, NER once.
  struct Planned {
    const TaskSpec* task;
    uint64_t seed;
  };
  std::vector<Planned> planned;
  for (const TaskSpec& task : tasks) {
    if (task.kind == TaskKind::kClassification) {
      for (uint64_t seed : seeds) planned.push_back({&task, seed});
    } else {
      planned.push_back({&task, seeds.front()});
    }
  }

  std::vector<EvalRecord> records(planned.size());
  auto run_one = [&](size_t i) {
    RunResult r = finetune_run(checkpoint, *planned[i].task, vocab, planned[i].seed);
    records[i] = {checkpoint.step, r.task, r.seed, r.test};
  };

  if (jobs <= 1) {
    for (size_t i = 0; i < planned.size(); ++i) run_one(i);
  } else {
    // Independent runs; record slots are preassigned so completion order
    // cannot change the output.
    std::vector<std::thread> workers;
    std::atomic_size_t next{0};
    std::mutex error_mutex;
    std::exception_ptr first_error;
    int n_workers = std::min<int>(jobs, static_cast<int>(planned.size()));
    for (int w = 0; w < n_workers; ++w) {
      workers.emplace_back([&] {
        for (;;) {
          size_t i = next.fetch_add(1);
          if (i >= planned.size()) return;
          try {
            run_one(i);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
            return;
          }
        }
      });
    }
    for (auto& t : workers) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  return records;
}

double aggregate_score(const std::vector<EvalRecord>& records,
                       const std::vector<std::string>& task_names) {
  if (task_names.empty()) throw SelectionError("no tasks to aggregate");
  double sum = 0.0;
  for (const std::string& task : task_names) {
    double best = -1.0;
    for (const EvalRecord& r : records) {
      if (r.task == task) best = std::max(best, r.f1);
    }
    if (best < 0.0) throw SelectionError("no records for task: " + task);
    sum += best;
  }
  return sum / static_cast<double>(task_names.size());
}

int64_t select_best(const std::vector<CheckpointScore>& scores) {
  if (scores.empty()) throw SelectionError("no checkpoints scored");
  const CheckpointScore* best = &scores.front();
  for (const CheckpointScore& s : scores) {
    if (s.avg_f1 > best->avg_f1 || (s.avg_f1 == best->avg_f1 && s.step < best->step)) {
      best = &s;
    }
  }
  return best->step;
}

SelectionReport build_report(const std::vector<EvalRecord>& records,
                             const std::vector<std::string>& task_names) {
  if (records.empty()) throw SelectionError("no evaluation records");
  SelectionReport report;
  report.records = records;

  std::map<int64_t, std::vector<EvalRecord>> by_step;
  for (const EvalRecord& r : records) by_step[r.checkpoint_step].push_back(r);

  for (const auto& [step, step_records] : by_step) {
    CheckpointScore score;
    score.step = step;
    for (const std::string& task : task_names) {
      double best = -1.0;
      for (const EvalRecord& r : step_records) {
        if (r.task == task) best = std::max(best, r.f1);
      }
      if (best < 0.0) {
        throw SelectionError("checkpoint " + std::to_string(step) +
                             " has no records for task: " + task);
      }
      score.best_per_task[task] = best;
    }
    score.avg_f1 = aggregate_score(step_records, task_names);
    report.scores.push_back(std::move(score));
  }
  report.selected_step = select_best(report.scores);
  return report;
}

namespace {

std::string percent(double f1) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * f1);
  return buf;
}

}  // namespace

void write_report(std::ostream& out, const SelectionReport& report) {
  out << "step\ttask\tseed\tf1\n";
  for (const EvalRecord& r : report.records) {
    out << r.checkpoint_step << '\t' << r.task << '\t' << r.seed << '\t' << percent(r.f1) << '\n';
  }
  out << "step\tavg_f1\n";
  for (const CheckpointScore& s : report.scores) {
    out << s.step << '\t' << percent(s.avg_f1) << '\n';
  }
  out << "selected\t" << report.selected_step << '\n';
}

std::vector<EvalRecord> read_report_records(std::istream& in) {
  std::vector<EvalRecord> records;
  std::string line;
  bool in_records = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string field;
    while (std::getline(ls, field, '\t')) fields.push_back(field);
    if (fields.size() == 4 && fields[0] == "step") {
      in_records = true;  // record header
      continue;
    }
    if (fields.size() == 2) {
      in_records = false;  // summary header or summary/selected rows
      continue;
    }
    if (in_records && fields.size() == 4) {
      EvalRecord r;
      try {
        r.checkpoint_step = std::stoll(fields[0]);
        r.task = fields[1];
        r.seed = std::stoull(fields[2]);
        r.f1 = std::stod(fields[3]) / 100.0;
      } catch (const std::exception&) {
        throw DataError("bad report row: " + line);
      }
      records.push_back(std::move(r));
    }
  }
  if (records.empty()) throw DataError("report contains no evaluation records");
  return records;
}

}  // namespace lmkit
