#include "lmkit/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lmkit/corpus.hpp"
#include "lmkit/errors.hpp"
#include "lmkit/finetune.hpp"
#include "lmkit/selection.hpp"
#include "lmkit/tokenizer.hpp"
#include "lmkit/trainer.hpp"

namespace lmkit {

namespace fs = std::filesystem;

namespace {

struct AppState {
  Command cmd;
  BuildVocabArgs build_vocab;
  PretrainArgs pretrain;
  FinetuneArgs finetune;
  EvaluateArgs evaluate;
  SelectArgs select;
  std::string seeds_csv = "1,2,3";
  // pretrain options that a --config file may provide
  std::map<std::string, CLI::Option*> pretrain_opts;
};

std::map<std::string, std::string> read_kv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(path + ": expected key=value: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

void apply_config_file(AppState& state) {
  if (state.pretrain.config_file.empty()) return;
  auto kv = read_kv_file(state.pretrain.config_file);
  PretrainArgs& p = state.pretrain;
  auto unset = [&](const std::string& flag) {
    auto it = state.pretrain_opts.find(flag);
    return it == state.pretrain_opts.end() || it->second->count() == 0;
  };
  for (const auto& [key, value] : kv) {
    try {
      if (key == "arch") {
        if (unset("--arch")) p.arch = value;
      } else if (key == "wwm") {
        if (unset("--wwm")) p.wwm = value == "1" || value == "true";
      } else if (key == "layers") {
        if (unset("--layers")) p.layers = std::stoi(value);
      } else if (key == "hidden") {
        if (unset("--hidden")) p.hidden = std::stoi(value);
      } else if (key == "heads") {
        if (unset("--heads")) p.heads = std::stoi(value);
      } else if (key == "ffn_dim") {
        if (unset("--ffn-dim")) p.ffn_dim = std::stoi(value);
      } else if (key == "max_seq_len") {
        if (unset("--max-seq-len")) p.max_seq_len = std::stoi(value);
      } else if (key == "dropout") {
        if (unset("--dropout")) p.dropout = std::stod(value);
      } else if (key == "batch") {
        if (unset("--batch")) p.batch = std::stoi(value);
      } else if (key == "lr") {
        if (unset("--lr")) p.lr = std::stod(value);
      } else if (key == "warmup") {
        if (unset("--warmup")) p.warmup = std::stoll(value);
      } else if (key == "steps") {
        if (unset("--steps")) p.steps = std::stoll(value);
      } else if (key == "checkpoint_every") {
        if (unset("--checkpoint-every")) p.checkpoint_every = std::stoll(value);
      } else if (key == "mask_rate") {
        if (unset("--mask-rate")) p.mask_rate = std::stod(value);
      } else if (key == "lambda") {
        if (unset("--lambda")) p.lambda = std::stod(value);
      } else if (key == "num_shards") {
        if (unset("--num-shards")) p.num_shards = std::stoi(value);
      } else {
        throw ConfigError("unknown config key: " + key);
      }
    } catch (const std::invalid_argument&) {
      throw ConfigError("bad value for config key " + key + ": " + value);
    }
  }
}

std::unique_ptr<CLI::App> make_app(AppState& state) {
  auto app = std::make_unique<CLI::App>("desk-scale language model pretraining and evaluation");
  app->require_subcommand(1);
  // global flags may appear before or after the subcommand
  app->fallthrough();
  app->add_option("--seed", state.cmd.seed, "base RNG seed")->capture_default_str();
  app->add_flag("--strict,!--no-strict", state.cmd.strict,
                "bitwise-deterministic mode (always honored; kept as a switch)");

  CLI::App* bv = app->add_subcommand("build-vocab", "build a vocabulary from a corpus directory");
  bv->fallthrough();
  bv->add_option("--corpus", state.build_vocab.corpus_dir, "directory of plain-text files")
      ->required();
  bv->add_option("--size", state.build_vocab.size, "maximum vocabulary size")->required();
  bv->add_option("--out", state.build_vocab.out_path, "output vocabulary file")->required();
  bv->add_option("--blocklist", state.build_vocab.blocklist_path,
                 "keyword blocklist, one per line");

  CLI::App* pt = app->add_subcommand("pretrain", "pretrain a model on packed sequences");
  pt->fallthrough();
  auto& po = state.pretrain_opts;
  po["--arch"] = pt->add_option("--arch", state.pretrain.arch, "bert or electra")
                     ->check(CLI::IsMember({"bert", "electra"}));
  po["--wwm"] = pt->add_flag("--wwm", state.pretrain.wwm, "whole word masking (BERT objective)");
  pt->add_option("--corpus", state.pretrain.corpus_dir, "directory of plain-text files")
      ->required();
  pt->add_option("--vocab", state.pretrain.vocab_path, "vocabulary file")->required();
  pt->add_option("--out", state.pretrain.out_dir, "output directory")->required();
  pt->add_option("--config", state.pretrain.config_file,
                 "key=value preset file; explicit flags win");
  pt->add_option("--blocklist", state.pretrain.blocklist_path, "keyword blocklist");
  po["--num-shards"] = pt->add_option("--num-shards", state.pretrain.num_shards);
  po["--layers"] = pt->add_option("--layers", state.pretrain.layers);
  po["--hidden"] = pt->add_option("--hidden", state.pretrain.hidden);
  po["--heads"] = pt->add_option("--heads", state.pretrain.heads);
  po["--ffn-dim"] = pt->add_option("--ffn-dim", state.pretrain.ffn_dim);
  po["--max-seq-len"] = pt->add_option("--max-seq-len", state.pretrain.max_seq_len);
  po["--dropout"] = pt->add_option("--dropout", state.pretrain.dropout);
  po["--batch"] = pt->add_option("--batch", state.pretrain.batch);
  po["--lr"] = pt->add_option("--lr", state.pretrain.lr);
  po["--warmup"] = pt->add_option("--warmup", state.pretrain.warmup);
  po["--steps"] = pt->add_option("--steps", state.pretrain.steps);
  po["--checkpoint-every"] = pt->add_option("--checkpoint-every", state.pretrain.checkpoint_every);
  po["--mask-rate"] = pt->add_option("--mask-rate", state.pretrain.mask_rate);
  po["--lambda"] = pt->add_option("--lambda", state.pretrain.lambda);

  CLI::App* ft = app->add_subcommand("finetune", "fine-tune a checkpoint on one task");
  ft->fallthrough();
  ft->add_option("--checkpoint", state.finetune.checkpoint_path)->required();
  ft->add_option("--task", state.finetune.task_file, "task definition file")->required();
  ft->add_option("--vocab", state.finetune.vocab_path)->required();
  ft->add_option("--out", state.finetune.out_path, "result row file (default stdout)");

  CLI::App* ev = app->add_subcommand("evaluate-checkpoints",
                                     "fine-tune and score every checkpoint in a directory");
  ev->fallthrough();
  ev->add_option("--checkpoints", state.evaluate.checkpoints_dir)->required();
  ev->add_option("--task", state.evaluate.task_files, "task definition file (repeatable)")
      ->required();
  ev->add_option("--vocab", state.evaluate.vocab_path)->required();
  ev->add_option("--out", state.evaluate.out_path, "report file")->required();
  ev->add_option("--seeds", state.seeds_csv, "comma-separated fine-tuning seeds")
      ->capture_default_str();
  ev->add_option("--jobs", state.evaluate.jobs, "parallel fine-tuning runs")
      ->capture_default_str();

  CLI::App* se = app->add_subcommand("select", "pick the best checkpoint from a report");
  se->fallthrough();
  se->add_option("--report", state.select.report_path)->required();

  return app;
}

Command finish_parse(AppState& state, const CLI::App& app) {
  if (app.got_subcommand("build-vocab")) {
    state.cmd.name = "build-vocab";
    if (state.build_vocab.size < kNumSpecials) {
      throw UsageError("--size must be at least " + std::to_string(kNumSpecials));
    }
    state.cmd.build_vocab = state.build_vocab;
  } else if (app.got_subcommand("pretrain")) {
    state.cmd.name = "pretrain";
    apply_config_file(state);
    if (state.pretrain.arch != "bert" && state.pretrain.arch != "electra") {
      throw UsageError("--arch must be bert or electra");
    }
    if (state.pretrain.wwm && state.pretrain.arch != "bert") {
      throw UsageError("--wwm applies to the BERT objective only");
    }
    state.cmd.pretrain = state.pretrain;
  } else if (app.got_subcommand("finetune")) {
    state.cmd.name = "finetune";
    state.cmd.finetune = state.finetune;
  } else if (app.got_subcommand("evaluate-checkpoints")) {
    state.cmd.name = "evaluate-checkpoints";
    state.evaluate.seeds.clear();
    std::istringstream ss(state.seeds_csv);
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (part.empty()) continue;
      try {
        state.evaluate.seeds.push_back(std::stoull(part));
      } catch (const std::exception&) {
        throw UsageError("bad --seeds entry: " + part);
      }
    }
    if (state.evaluate.seeds.empty()) throw UsageError("--seeds must name at least one seed");
    if (state.evaluate.jobs < 1) throw UsageError("--jobs must be positive");
    state.cmd.evaluate = state.evaluate;
  } else if (app.got_subcommand("select")) {
    state.cmd.name = "select";
    state.cmd.select = state.select;
  }
  return state.cmd;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

int run_build_vocab(const Command& cmd) {
  const BuildVocabArgs& args = *cmd.build_vocab;
  std::vector<Document> docs = read_documents_dir(args.corpus_dir);
  if (!args.blocklist_path.empty()) {
    docs = filter_documents(docs, read_blocklist(args.blocklist_path));
  }
  std::vector<std::string> texts;
  texts.reserve(docs.size());
  for (Document& d : docs) texts.push_back(std::move(d.text));
  Vocab vocab = Vocab::build(texts, static_cast<size_t>(args.size));
  vocab.save(args.out_path);
  std::fprintf(stderr, "wrote %d tokens to %s\n", vocab.size(), args.out_path.c_str());
  return 0;
}

int run_pretrain(const Command& cmd) {
  const PretrainArgs& args = *cmd.pretrain;
  Vocab vocab = Vocab::load(args.vocab_path);

  ModelConfig config;
  config.layers = args.layers;
  config.hidden = args.hidden;
  config.heads = args.heads;
  config.ffn_dim = args.ffn_dim;
  config.vocab_size = vocab.size();
  config.max_seq_len = args.max_seq_len;
  config.dropout = args.dropout;
  config.validate();

  PretrainHyperparams hp;
  hp.batch = args.batch;
  hp.base_lr = args.lr;
  hp.warmup = args.warmup;
  hp.total_steps = args.steps;
  hp.checkpoint_every = args.checkpoint_every;
  hp.seed = cmd.seed;
  hp.mask_mode = args.wwm ? MaskMode::kWholeWord : MaskMode::kToken;
  hp.mask_rate = args.mask_rate;
  hp.lambda = args.lambda;
  hp.validate();

  std::vector<std::string> blocklist;
  if (!args.blocklist_path.empty()) blocklist = read_blocklist(args.blocklist_path);

  fs::create_directories(args.out_dir);
  CorpusBuildResult shards_built =
      build_pretrain_shards(args.corpus_dir, vocab, blocklist, config.max_seq_len,
                            args.num_shards, cmd.seed, (fs::path(args.out_dir) / "shards").string());
  std::fprintf(stderr, "packed %llu examples (%llu truncated words)\n",
               static_cast<unsigned long long>(shards_built.stats.examples),
               static_cast<unsigned long long>(shards_built.stats.truncated_words));

  ShardSet shards = load_shards(shards_built.shard_paths);
  PretrainResult result = pretrain(shards, arch_from_string(args.arch), config, hp, args.out_dir);
  std::fprintf(stderr, "wrote %zu checkpoints to %s\n", result.checkpoint_paths.size(),
               args.out_dir.c_str());
  return 0;
}

int run_finetune(const Command& cmd) {
  const FinetuneArgs& args = *cmd.finetune;
  TrainState checkpoint = load_checkpoint(args.checkpoint_path);
  TaskSpec task = load_task_spec(args.task_file);
  Vocab vocab = Vocab::load(args.vocab_path);
  RunResult result = finetune_run(checkpoint, task, vocab, cmd.seed);
  if (args.out_path.empty()) {
    write_run_result(std::cout, result);
  } else {
    std::ofstream out(args.out_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + args.out_path);
    write_run_result(out, result);
  }
  return 0;
}

int run_evaluate(const Command& cmd) {
  const EvaluateArgs& args = *cmd.evaluate;
  std::vector<std::string> checkpoint_files;
  if (!fs::is_directory(args.checkpoints_dir)) {
    throw IoError("not a directory: " + args.checkpoints_dir);
  }
  for (const auto& entry : fs::directory_iterator(args.checkpoints_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".glmc") {
      checkpoint_files.push_back(entry.path().string());
    }
  }
  std::sort(checkpoint_files.begin(), checkpoint_files.end());
  if (checkpoint_files.empty()) {
    throw ConfigError("no .glmc checkpoints in " + args.checkpoints_dir);
  }

  std::vector<TaskSpec> tasks;
  std::vector<std::string> task_names;
  for (const std::string& file : args.task_files) {
    tasks.push_back(load_task_spec(file));
    task_names.push_back(tasks.back().name);
  }
  Vocab vocab = Vocab::load(args.vocab_path);

  std::vector<EvalRecord> records;
  for (const std::string& file : checkpoint_files) {
    TrainState checkpoint = load_checkpoint(file);
    std::fprintf(stderr, "evaluating %s (step %lld)\n", file.c_str(),
                 static_cast<long long>(checkpoint.step));
    std::vector<EvalRecord> r =
        evaluate_checkpoint(checkpoint, tasks, args.seeds, vocab, args.jobs);
    records.insert(records.end(), r.begin(), r.end());
  }

  SelectionReport report = build_report(records, task_names);
  std::ofstream out(args.out_path, std::ios::trunc);
  if (!out) throw IoError("cannot write report: " + args.out_path);
  write_report(out, report);
  std::printf("selected\t%lld\n", static_cast<long long>(report.selected_step));
  return 0;
}

int run_select(const Command& cmd) {
  std::ifstream in(cmd.select->report_path);
  if (!in) throw IoError("cannot open report: " + cmd.select->report_path);
  std::vector<EvalRecord> records = read_report_records(in);
  std::vector<std::string> task_names;
  for (const EvalRecord& r : records) {
    if (std::find(task_names.begin(), task_names.end(), r.task) == task_names.end()) {
      task_names.push_back(r.task);
    }
  }
  SelectionReport report = build_report(records, task_names);
  std::printf("%lld\n", static_cast<long long>(report.selected_step));
  return 0;
}

}  // namespace

Command parse_args(const std::vector<std::string>& args) {
  AppState state;
  auto app = make_app(state);
  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app->parse(reversed);
  } catch (const CLI::ParseError& e) {
    throw UsageError(e.what());
  }
  return finish_parse(state, *app);
}

int run(const Command& cmd) {
  try {
    if (cmd.name == "build-vocab") return run_build_vocab(cmd);
    if (cmd.name == "pretrain") return run_pretrain(cmd);
    if (cmd.name == "finetune") return run_finetune(cmd);
    if (cmd.name == "evaluate-checkpoints") return run_evaluate(cmd);
    if (cmd.name == "select") return run_select(cmd);
    throw UsageError("unknown subcommand: " + cmd.name);
  } catch (const UsageError&) {
    throw;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", cmd.name.c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s: %s\n", cmd.name.c_str(), e.what());
    return 1;
  }
}

int run_cli(int argc, const char* const* argv) {
  AppState state;
  auto app = make_app(state);
  try {
    app->parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app->exit(e);  // prints help, exits 0
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    std::fprintf(stderr, "%s", app->help().c_str());
    return 2;
  }
  Command cmd;
  try {
    cmd = finish_parse(state, *app);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  }
  try {
    return run(cmd);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  }
}

}  // namespace lmkit
