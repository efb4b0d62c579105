#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "lmkit/finetune.hpp"
#include "lmkit/rng.hpp"

#include "metric_oracles.hpp"

using namespace lmkit;
namespace fs = std::filesystem;

TEST_CASE("macro_f1 worked examples") {
  CHECK(macro_f1({0, 1, 0}, {0, 1, 0}, 2) == 1.0);
  // gold [A,A,B], pred [A,B,B] -> per-class 2/3 each -> 0.6667
  CHECK(macro_f1({0, 1, 1}, {0, 0, 1}, 2) == doctest::Approx(2.0 / 3.0));
  // 4 classes, 2 never appear, the rest perfect -> 0.5
  CHECK(macro_f1({0, 1}, {0, 1}, 4) == doctest::Approx(0.5));
  CHECK_THROWS_AS(macro_f1({}, {}, 2), MetricError);
  CHECK_THROWS_AS(macro_f1({0}, {0, 1}, 2), MetricError);
  CHECK_THROWS_AS(macro_f1({5}, {0}, 2), MetricError);
}

TEST_CASE("macro_f1 agrees with the enumeration oracle on 1000 random instances") {
  Rng rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    int classes = 2 + static_cast<int>(rng.uniform_below(9));
    size_t n = 1 + rng.uniform_below(30);
    std::vector<int32_t> pred(n), gold(n);
    for (size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<int32_t>(rng.uniform_below(static_cast<uint64_t>(classes)));
      gold[i] = static_cast<int32_t>(rng.uniform_below(static_cast<uint64_t>(classes)));
    }
    CHECK(macro_f1(pred, gold, classes) ==
          doctest::Approx(oracle::macro_f1(pred, gold, classes)).epsilon(1e-12));
  }
}

TEST_CASE("macro_f1 is invariant under joint permutation") {
  Rng rng(42);
  std::vector<int32_t> pred, gold;
  for (int i = 0; i < 40; ++i) {
    pred.push_back(static_cast<int32_t>(rng.uniform_below(4)));
    gold.push_back(static_cast<int32_t>(rng.uniform_below(4)));
  }
  double base = macro_f1(pred, gold, 4);
  std::vector<size_t> order(pred.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int trial = 0; trial < 20; ++trial) {
    rng.shuffle(order);
    std::vector<int32_t> p2, g2;
    for (size_t i : order) {
      p2.push_back(pred[i]);
      g2.push_back(gold[i]);
    }
    CHECK(macro_f1(p2, g2, 4) == base);
  }
}

TEST_CASE("decode_bio_spans handles the repair rule") {
  auto classes = std::vector<std::string>{"PER", "LOC"};
  auto tags = [&](std::vector<std::string> names) {
    std::vector<int32_t> ids;
    for (const auto& n : names) ids.push_back(parse_bio_tag(n, classes));
    return ids;
  };

  auto s1 = decode_bio_spans(tags({"B-PER", "I-PER", "O"}));
  REQUIRE(s1.size() == 1);
  CHECK(s1[0] == Span{0, 0, 2});

  auto s2 = decode_bio_spans(tags({"O", "I-LOC"}));
  REQUIRE(s2.size() == 1);
  CHECK(s2[0] == Span{1, 1, 2});  // repaired to B-LOC

  auto s3 = decode_bio_spans(tags({"B-PER", "B-PER", "I-PER"}));
  REQUIRE(s3.size() == 2);
  CHECK(s3[0] == Span{0, 0, 1});
  CHECK(s3[1] == Span{0, 1, 3});

  // class switch inside a span starts a new one
  auto s4 = decode_bio_spans(tags({"B-PER", "I-LOC"}));
  REQUIRE(s4.size() == 2);
  CHECK(s4[0] == Span{0, 0, 1});
  CHECK(s4[1] == Span{1, 1, 2});

  CHECK(decode_bio_spans({}).empty());
}

TEST_CASE("span_micro_f1 worked examples") {
  auto classes = std::vector<std::string>{"PER", "LOC"};
  auto tags = [&](std::vector<std::string> names) {
    std::vector<int32_t> ids;
    for (const auto& n : names) ids.push_back(parse_bio_tag(n, classes));
    return ids;
  };
  auto gold = tags({"B-PER", "I-PER", "O", "B-LOC"});

  CHECK(span_micro_f1({gold}, {gold}) == 1.0);
  // one of two gold spans found: P=1, R=0.5 -> 2/3
  auto partial = tags({"B-PER", "I-PER", "O", "O"});
  CHECK(span_micro_f1({partial}, {gold}) == doctest::Approx(2.0 / 3.0));
  // all-O prediction -> 0
  auto none = tags({"O", "O", "O", "O"});
  CHECK(span_micro_f1({none}, {gold}) == 0.0);

  CHECK_THROWS_AS(span_micro_f1({tags({"O"})}, {gold}), DataError);
  CHECK_THROWS_AS(span_micro_f1({}, {}), MetricError);
}

TEST_CASE("span_micro_f1 agrees with the oracle on 1000 random instances") {
  Rng rng(43);
  for (int trial = 0; trial < 1000; ++trial) {
    int classes = 1 + static_cast<int>(rng.uniform_below(10));
    int n_tags = num_bio_tags(classes);
    size_t sentences = 1 + rng.uniform_below(3);
    std::vector<std::vector<int32_t>> pred(sentences), gold(sentences);
    for (size_t s = 0; s < sentences; ++s) {
      size_t n = 1 + rng.uniform_below(30);
      for (size_t i = 0; i < n; ++i) {
        pred[s].push_back(static_cast<int32_t>(rng.uniform_below(static_cast<uint64_t>(n_tags))));
        gold[s].push_back(static_cast<int32_t>(rng.uniform_below(static_cast<uint64_t>(n_tags))));
      }
    }
    CHECK(span_micro_f1(pred, gold) ==
          doctest::Approx(oracle::span_micro_f1(pred, gold)).epsilon(1e-12));
  }
}

TEST_CASE("bio tag names round trip") {
  std::vector<std::string> classes = {"PER", "ORG", "LOC"};
  CHECK(parse_bio_tag("O", classes) == kTagOutside);
  for (int32_t c = 0; c < 3; ++c) {
    CHECK(parse_bio_tag(bio_tag_name(tag_begin(c), classes), classes) == tag_begin(c));
    CHECK(parse_bio_tag(bio_tag_name(tag_inside(c), classes), classes) == tag_inside(c));
  }
  CHECK_THROWS_AS(parse_bio_tag("B-XXX", classes), DataError);
  CHECK_THROWS_AS(parse_bio_tag("banana", classes), DataError);
}

TEST_CASE("early stopping follows the patience rule") {
  // dev metrics 0.60, 0.62, 0.61 x5 with patience 5: stop after the 7th
  EarlyStopper stopper{5};
  std::vector<double> devs = {0.60, 0.62, 0.61, 0.61, 0.61, 0.61, 0.61};
  int stopped_at = -1;
  for (size_t i = 0; i < devs.size(); ++i) {
    stopper.observe(devs[i]);
    if (stopper.should_stop()) {
      stopped_at = static_cast<int>(i) + 1;
      break;
    }
  }
  CHECK(stopped_at == 7);
  CHECK(stopper.best == 0.62);

  // a tie does not count as improvement
  EarlyStopper tie{2};
  CHECK(tie.observe(0.5));
  CHECK(!tie.observe(0.5));
  CHECK(!tie.observe(0.5));
  CHECK(tie.should_stop());
}

// ---------------------------------------------------------------------------
// Data loading
// ---------------------------------------------------------------------------

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& contents) {
  std::ofstream out(p);
  out << contents;
}

}  // namespace

TEST_CASE("classification TSV loader validates labels") {
  TempDir dir("lmkit_cls_data");
  write_file(dir.path / "train.tsv", "good text here\tpos\nmore words\tneg\n");
  auto data = load_classification_tsv((dir.path / "train.tsv").string(), {"pos", "neg"});
  REQUIRE(data.size() == 2);
  CHECK(data[0].text == "good text here");
  CHECK(data[0].label == 0);
  CHECK(data[1].label == 1);

  write_file(dir.path / "bad.tsv", "text\tpos\nother\tmaybe\n");
  try {
    load_classification_tsv((dir.path / "bad.tsv").string(), {"pos", "neg"});
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find(":2") != std::string::npos);  // names the line
  }
}

TEST_CASE("CoNLL loader splits sentences on blank lines") {
  TempDir dir("lmkit_ner_data");
  write_file(dir.path / "train.conll",
             "Anna\tB-PER\nfuhr\tO\n\nBerlin\tB-LOC\nMitte\tI-LOC\n");
  auto data = load_ner_conll((dir.path / "train.conll").string(), {"PER", "LOC"});
  REQUIRE(data.size() == 2);
  CHECK(data[0].tokens == std::vector<std::string>{"Anna", "fuhr"});
  CHECK(data[0].tags[0] == tag_begin(0));
  CHECK(data[0].tags[1] == kTagOutside);
  CHECK(data[1].tags[0] == tag_begin(1));
  CHECK(data[1].tags[1] == tag_inside(1));

  write_file(dir.path / "bad.conll", "Anna\tB-WAT\n");
  CHECK_THROWS_AS(load_ner_conll((dir.path / "bad.conll").string(), {"PER"}), DataError);
}

TEST_CASE("task spec files parse and validate") {
  TempDir dir("lmkit_task_spec");
  write_file(dir.path / "task.cfg",
             "name=coarse\nkind=classification\nclasses=OFFENSE,OTHER\nmax_epochs=5\n"
             "max_train_steps=705\neval_every_steps=50\nlr=5e-6\nbatch_size=32\n"
             "max_seq_len=150\ntrain=a.tsv\ndev=b.tsv\ntest=c.tsv\n");
  TaskSpec task = load_task_spec((dir.path / "task.cfg").string());
  CHECK(task.name == "coarse");
  CHECK(task.kind == TaskKind::kClassification);
  CHECK(task.metric == TaskMetric::kMacroF1);  // defaulted from kind
  CHECK(task.classes.size() == 2);
  CHECK(task.max_train_steps == 705);

  write_file(dir.path / "bad.cfg",
             "name=x\nkind=ner\nclasses=PER\nmetric=macro_f1\ntrain=a\ndev=b\ntest=c\n");
  CHECK_THROWS_AS(load_task_spec((dir.path / "bad.cfg").string()), ConfigError);
}

// ---------------------------------------------------------------------------
// End-to-end fine-tuning mechanics on tiny synthetic tasks
// ---------------------------------------------------------------------------

namespace {

TrainState tiny_checkpoint(const Vocab& vocab, Arch arch) {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.vocab_size = vocab.size();
  cfg.max_seq_len = 24;
  cfg.dropout = 0.1;
  PretrainHyperparams hp;
  hp.batch = 2;
  hp.warmup = 2;
  hp.total_steps = 10;
  hp.seed = 3;
  TrainState state = init_train_state(arch, cfg, hp);
  state.step = 100;  // pretend checkpoint
  return state;
}

TaskSpec tiny_cls_task(const fs::path& dir) {
  TaskSpec task;
  task.name = "toy";
  task.kind = TaskKind::kClassification;
  task.classes = {"pos", "neg"};
  task.max_epochs = 3;
  task.max_train_steps = 8;
  task.eval_every_steps = 2;
  task.lr = 1e-3;
  task.batch_size = 4;
  task.max_seq_len = 16;
  task.metric = TaskMetric::kMacroF1;
  task.train_path = (dir / "train.tsv").string();
  task.dev_path = (dir / "dev.tsv").string();
  task.test_path = (dir / "test.tsv").string();

  std::string rows;
  for (int i = 0; i < 8; ++i) {
    rows += (i % 2 == 0) ? "gut gut schoen\tpos\n" : "schlecht uebel arg\tneg\n";
  }
  write_file(task.train_path, rows);
  write_file(task.dev_path, "gut schoen\tpos\nuebel arg\tneg\n");
  write_file(task.test_path, "gut gut\tpos\nschlecht arg\tneg\n");
  return task;
}

TaskSpec tiny_ner_task(const fs::path& dir) {
  TaskSpec task;
  task.name = "toy-ner";
  task.kind = TaskKind::kNer;
  task.classes = {"ENT"};
  task.max_epochs = 2;
  task.max_train_steps = 6;
  task.eval_every_steps = 3;
  task.lr = 1e-3;
  task.batch_size = 4;
  task.max_seq_len = 16;
  task.metric = TaskMetric::kSpanMicroF1;
  task.train_path = (dir / "train.conll").string();
  task.dev_path = (dir / "dev.conll").string();
  task.test_path = (dir / "test.conll").string();

  std::string rows;
  for (int i = 0; i < 6; ++i) {
    rows += "Anna\tB-ENT\ngeht\tO\nheim\tO\n\n";
  }
  write_file(task.train_path, rows);
  write_file(task.dev_path, "Anna\tB-ENT\ngeht\tO\n\n");
  write_file(task.test_path, "Anna\tB-ENT\nheim\tO\n\n");
  return task;
}

Vocab tiny_vocab() {
  return Vocab::build({"gut schoen schlecht uebel arg Anna geht heim"}, 64);
}

}  // namespace

TEST_CASE("finetune_run is deterministic and respects the step cap") {
  TempDir dir("lmkit_ft_cls");
  Vocab vocab = tiny_vocab();
  TrainState ckpt = tiny_checkpoint(vocab, Arch::kBert);
  TaskSpec task = tiny_cls_task(dir.path);

  RunResult r1 = finetune_run(ckpt, task, vocab, 17);
  RunResult r2 = finetune_run(ckpt, task, vocab, 17);
  CHECK(r1.best_dev == r2.best_dev);
  CHECK(r1.test == r2.test);
  CHECK(r1.steps_trained == r2.steps_trained);
  CHECK(r1.steps_trained <= task.max_train_steps);
  CHECK(r1.best_dev >= 0.0);
  CHECK(r1.best_dev <= 1.0);
  CHECK(r1.test >= 0.0);
  CHECK(r1.test <= 1.0);
  CHECK(r1.task == "toy");
  CHECK(r1.seed == 17);

  // epoch cap binds when smaller: 8 examples, batch 4 -> 2 steps/epoch
  TaskSpec capped = task;
  capped.max_epochs = 1;
  capped.max_train_steps = 100;
  capped.eval_every_steps = 1;
  RunResult r3 = finetune_run(ckpt, capped, vocab, 17);
  CHECK(r3.steps_trained <= 2);
}

TEST_CASE("finetune_run handles the ELECTRA pooling head") {
  TempDir dir("lmkit_ft_electra");
  Vocab vocab = tiny_vocab();
  TrainState ckpt = tiny_checkpoint(vocab, Arch::kElectra);
  TaskSpec task = tiny_cls_task(dir.path);
  RunResult r = finetune_run(ckpt, task, vocab, 5);
  CHECK(r.test >= 0.0);
  CHECK(r.test <= 1.0);
}

TEST_CASE("finetune_run trains a NER head") {
  TempDir dir("lmkit_ft_ner");
  Vocab vocab = tiny_vocab();
  TrainState ckpt = tiny_checkpoint(vocab, Arch::kBert);
  TaskSpec task = tiny_ner_task(dir.path);
  RunResult r = finetune_run(ckpt, task, vocab, 5);
  CHECK(r.test >= 0.0);
  CHECK(r.test <= 1.0);
  CHECK(!r.stopped_early);  // NER never early-stops
}

TEST_CASE("finetune_run validates compatibility") {
  TempDir dir("lmkit_ft_bad");
  Vocab vocab = tiny_vocab();
  TrainState ckpt = tiny_checkpoint(vocab, Arch::kBert);
  TaskSpec task = tiny_cls_task(dir.path);
  task.max_seq_len = 999;  // exceeds checkpoint's max_seq_len
  CHECK_THROWS_AS(finetune_run(ckpt, task, vocab, 1), ConfigError);

  TaskSpec ok = tiny_cls_task(dir.path);
  Vocab other = Vocab::build({"voellig anderes vokabular hier"}, 32);
  CHECK_THROWS_AS(finetune_run(ckpt, ok, other, 1), ConfigError);
}

TEST_CASE("run result row format") {
  RunResult r;
  r.task = "coarse";
  r.seed = 7;
  r.best_dev = 0.71424;
  r.test = 0.68991;
  r.steps_trained = 350;
  r.stopped_early = true;
  std::ostringstream os;
  write_run_result(os, r);
  CHECK(os.str() == "coarse\t7\t71.42\t68.99\t350\t1\n");
}
