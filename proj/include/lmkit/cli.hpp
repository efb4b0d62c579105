#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace lmkit {

struct BuildVocabArgs {
  std::string corpus_dir;
  std::string out_path;
  std::string blocklist_path;  // optional
  int size = 8192;
};

struct PretrainArgs {
  std::string arch = "bert";
  bool wwm = false;
  std::string corpus_dir;
  std::string vocab_path;
  std::string out_dir;
  std::string config_file;     // optional key=value file; flags override
  std::string blocklist_path;  // optional
  int num_shards = 1;
  // model
  int layers = 2;
  int hidden = 64;
  int heads = 2;
  int ffn_dim = 0;
  int max_seq_len = 128;
  double dropout = 0.1;
  // schedule
  int batch = 16;
  double lr = 1e-4;
  int64_t warmup = 10;
  int64_t steps = 100;
  int64_t checkpoint_every = 50;
  double mask_rate = 0.15;
  double lambda = 50.0;
};

struct FinetuneArgs {
  std::string checkpoint_path;
  std::string task_file;
  std::string vocab_path;
  std::string out_path;  // optional; default stdout
};

struct EvaluateArgs {
  std::string checkpoints_dir;
  std::vector<std::string> task_files;
  std::string vocab_path;
  std::string out_path;
  std::vector<uint64_t> seeds;
  int jobs = 1;
};

struct SelectArgs {
  std::string report_path;
};

/// One parsed and validated invocation.
struct Command {
  std::string name;
  uint64_t seed = 42;
  bool strict = true;

  std::optional<BuildVocabArgs> build_vocab;
  std::optional<PretrainArgs> pretrain;
  std::optional<FinetuneArgs> finetune;
  std::optional<EvaluateArgs> evaluate;
  std::optional<SelectArgs> select;
};

/// Parses argv (without the program name). Throws UsageError on unknown or
/// missing flags and on invalid combinations (e.g. --wwm with --arch
/// electra).
Command parse_args(const std::vector<std::string>& args);

/// Dispatches a parsed command. Returns 0 on success, 1 on runtime error
/// (with a one-line diagnostic naming the failing stage on stderr).
int run(const Command& command);

/// Full entry point: parse + run, mapping UsageError to exit status 2.
int run_cli(int argc, const char* const* argv);

}  // namespace lmkit
