#include "lmkit/trainer.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace lmkit {

namespace fs = std::filesystem;

double lr_at(int64_t step, double base_lr, int64_t warmup_steps, int64_t total_steps) {
  if (warmup_steps <= 0 || warmup_steps >= total_steps) {
    throw ConfigError("need 0 < warmup_steps < total_steps");
  }
  if (step <= 0) return 0.0;
  if (step >= total_steps) return 0.0;
  if (step <= warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  return base_lr * static_cast<double>(total_steps - step) /
         static_cast<double>(total_steps - warmup_steps);
}

void adam_step(OptimizerState& state, TensorMap& weights, const TensorMap& grads, double lr) {
  if (!same_names_and_shapes(weights, grads)) {
    throw InputError("gradient map does not match the weights");
  }
  state.t += 1;
  const AdamConfig& hp = state.hp;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.t));

  auto im = state.m.begin();
  auto iv = state.v.begin();
  auto ig = grads.begin();
  for (auto iw = weights.begin(); iw != weights.end(); ++iw, ++im, ++iv, ++ig) {
    const Tensor& g = ig->second;
    if (!g.all_finite()) throw NumericError("non-finite gradient in " + ig->first);
    Tensor& w = iw->second;
    Tensor& m = im->second;
    Tensor& v = iv->second;
    const bool decay = hp.weight_decay > 0.0 && w.rank() >= 2;
    for (size_t i = 0; i < w.data.size(); ++i) {
      double gi = g.data[i];
      m.data[i] = hp.beta1 * m.data[i] + (1.0 - hp.beta1) * gi;
      v.data[i] = hp.beta2 * v.data[i] + (1.0 - hp.beta2) * gi * gi;
      double mhat = m.data[i] / bc1;
      double vhat = v.data[i] / bc2;
      double update = mhat / (std::sqrt(vhat) + hp.eps);
      if (decay) update += hp.weight_decay * w.data[i];
      w.data[i] -= lr * update;
    }
  }
}

double clip_global_norm(TensorMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double x : g.data) sq += x * x;
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    double scale = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& x : g.data) x *= scale;
    }
  }
  return norm;
}

void quantize_to_storage(TensorMap& tensors) {
  for (auto& [name, t] : tensors) {
    for (double& x : t.data) x = static_cast<double>(static_cast<float>(x));
  }
}

void PretrainHyperparams::validate() const {
  if (batch < 1) throw ConfigError("batch must be positive");
  if (total_steps < 1) throw ConfigError("total_steps must be positive");
  if (warmup < 1 || warmup >= total_steps) throw ConfigError("need 0 < warmup < total_steps");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be positive");
  if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mask_rate must be in (0, 1)");
  if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
  if (clip_norm <= 0.0) throw ConfigError("clip_norm must be positive");
}

TrainState init_train_state(Arch arch, const ModelConfig& config,
                            const PretrainHyperparams& hp) {
  config.validate();
  hp.validate();
  TrainState state;
  state.arch = arch;
  state.config = config;
  state.hp = hp;
  state.step = 0;
  state.weights = init_weights(arch, config, mix_seed(hp.seed, 0x1717));
  // Commit to storage precision up front so every later serialization is
  // lossless.
  quantize_to_storage(state.weights);
  for (const auto& [name, tensor] : state.weights) {
    state.opt.m.emplace(name, Tensor::zeros(tensor.shape));
    state.opt.v.emplace(name, Tensor::zeros(tensor.shape));
  }
  state.opt.t = 0;
  state.opt.hp = hp.adam;
  state.rng = Rng(mix_seed(hp.seed, 0x2424));
  state.cursor = {0, 0};
  return state;
}

// --------------------------------------------------------------------------
// Checkpoint serialization
// --------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'G', 'L', 'M', 'C'};
constexpr uint8_t kDtypeF32 = 0;
constexpr uint8_t kDtypeF64 = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw CorruptionError("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    }
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>(buf[pos++])) << (8 * i);
    }
    return v;
  }
  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf[pos++]);
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  bool done() const { return pos == buf.size(); }
};

std::string format_double(double v) {
  char tmp[40];
  std::snprintf(tmp, sizeof(tmp), "%.17g", v);
  return tmp;
}

std::string config_block(const TrainState& state) {
  std::ostringstream os;
  os << "arch=" << to_string(state.arch) << '\n';
  os << "objective=" << (state.arch == Arch::kBert ? "mlm" : "rtd") << '\n';
  os << "wwm=" << (state.hp.mask_mode == MaskMode::kWholeWord ? 1 : 0) << '\n';
  os << "step=" << state.step << '\n';
  os << "layers=" << state.config.layers << '\n';
  os << "hidden=" << state.config.hidden << '\n';
  os << "heads=" << state.config.heads << '\n';
  os << "ffn_dim=" << state.config.ffn_dim << '\n';
  os << "vocab_size=" << state.config.vocab_size << '\n';
  os << "max_seq_len=" << state.config.max_seq_len << '\n';
  os << "dropout=" << format_double(state.config.dropout) << '\n';
  os << "batch=" << state.hp.batch << '\n';
  os << "base_lr=" << format_double(state.hp.base_lr) << '\n';
  os << "warmup=" << state.hp.warmup << '\n';
  os << "total_steps=" << state.hp.total_steps << '\n';
  os << "checkpoint_every=" << state.hp.checkpoint_every << '\n';
  os << "seed=" << state.hp.seed << '\n';
  os << "mask_rate=" << format_double(state.hp.mask_rate) << '\n';
  os << "lambda=" << format_double(state.hp.lambda) << '\n';
  os << "clip_norm=" << format_double(state.hp.clip_norm) << '\n';
  os << "beta1=" << format_double(state.opt.hp.beta1) << '\n';
  os << "beta2=" << format_double(state.opt.hp.beta2) << '\n';
  os << "eps=" << format_double(state.opt.hp.eps) << '\n';
  os << "weight_decay=" << format_double(state.opt.hp.weight_decay) << '\n';
  os << "adam_t=" << state.opt.t << '\n';
  return os.str();
}

std::map<std::string, std::string> parse_config_block(const std::string& block) {
  std::map<std::string, std::string> kv;
  std::istringstream is(block);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw CorruptionError("bad config line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

const std::string& config_get(const std::map<std::string, std::string>& kv,
                              const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CorruptionError("checkpoint config missing key: " + key);
  return it->second;
}

void append_tensor(std::string& out, const std::string& name, const Tensor& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out += name;
  out.push_back(static_cast<char>(kDtypeF32));
  out.push_back(static_cast<char>(t.rank()));
  for (int64_t d : t.shape) put_u64(out, static_cast<uint64_t>(d));
  for (double x : t.data) put_f32(out, static_cast<float>(x));
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kCheckpointVersion);

  std::string config = config_block(state);
  put_u32(out, static_cast<uint32_t>(config.size()));
  out += config;

  put_u32(out, static_cast<uint32_t>(3 * state.weights.size()));
  for (const auto& [name, t] : state.opt.m) append_tensor(out, "m." + name, t);
  for (const auto& [name, t] : state.opt.v) append_tensor(out, "v." + name, t);
  for (const auto& [name, t] : state.weights) append_tensor(out, "w." + name, t);

  std::string rng = state.rng.serialize();
  put_u32(out, static_cast<uint32_t>(rng.size()));
  out += rng;
  put_u32(out, state.cursor.shard);
  put_u64(out, state.cursor.record);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  f.flush();
  if (!f) throw IoError("short write to checkpoint: " + path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  Reader r{buf};
  std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw FormatError("not a checkpoint file (bad magic): " + path);
  }
  uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionError("unsupported checkpoint version " + std::to_string(version));
  }

  uint32_t config_len = r.u32();
  auto kv = parse_config_block(r.bytes(config_len));

  TrainState state;
  state.arch = arch_from_string(config_get(kv, "arch"));
  state.hp.mask_mode =
      config_get(kv, "wwm") == "1" ? MaskMode::kWholeWord : MaskMode::kToken;
  state.step = std::stoll(config_get(kv, "step"));
  state.config.layers = std::stoi(config_get(kv, "layers"));
  state.config.hidden = std::stoi(config_get(kv, "hidden"));
  state.config.heads = std::stoi(config_get(kv, "heads"));
  state.config.ffn_dim = std::stoi(config_get(kv, "ffn_dim"));
  state.config.vocab_size = std::stoi(config_get(kv, "vocab_size"));
  state.config.max_seq_len = std::stoi(config_get(kv, "max_seq_len"));
  state.config.dropout = std::stod(config_get(kv, "dropout"));
  state.hp.batch = std::stoi(config_get(kv, "batch"));
  state.hp.base_lr = std::stod(config_get(kv, "base_lr"));
  state.hp.warmup = std::stoll(config_get(kv, "warmup"));
  state.hp.total_steps = std::stoll(config_get(kv, "total_steps"));
  state.hp.checkpoint_every = std::stoll(config_get(kv, "checkpoint_every"));
  state.hp.seed = std::stoull(config_get(kv, "seed"));
  state.hp.mask_rate = std::stod(config_get(kv, "mask_rate"));
  state.hp.lambda = std::stod(config_get(kv, "lambda"));
  state.hp.clip_norm = std::stod(config_get(kv, "clip_norm"));
  state.opt.hp.beta1 = std::stod(config_get(kv, "beta1"));
  state.opt.hp.beta2 = std::stod(config_get(kv, "beta2"));
  state.opt.hp.eps = std::stod(config_get(kv, "eps"));
  state.opt.hp.weight_decay = std::stod(config_get(kv, "weight_decay"));
  state.opt.t = std::stoll(config_get(kv, "adam_t"));
  state.hp.adam = state.opt.hp;

  uint32_t tensor_count = r.u32();
  for (uint32_t i = 0; i < tensor_count; ++i) {
    uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    uint8_t dtype = r.u8();
    uint8_t rank = r.u8();
    if (rank > 4) throw CorruptionError("implausible tensor rank in " + name);
    Tensor t;
    for (int d = 0; d < rank; ++d) {
      uint64_t dim = r.u64();
      if (dim == 0 || dim > (1ull << 32)) throw CorruptionError("bad dimension in " + name);
      t.shape.push_back(static_cast<int64_t>(dim));
    }
    int64_t numel = Tensor::numel_of(t.shape);
    t.data.resize(static_cast<size_t>(numel));
    if (dtype == kDtypeF32) {
      for (int64_t j = 0; j < numel; ++j) {
        uint32_t bits = r.u32();
        float f;
        std::memcpy(&f, &bits, 4);
        t.data[static_cast<size_t>(j)] = static_cast<double>(f);
      }
    } else if (dtype == kDtypeF64) {
      for (int64_t j = 0; j < numel; ++j) {
        uint64_t bits = r.u64();
        double d;
        std::memcpy(&d, &bits, 8);
        t.data[static_cast<size_t>(j)] = d;
      }
    } else {
      throw CorruptionError("unknown dtype code in " + name);
    }
    if (name.rfind("m.", 0) == 0) {
      state.opt.m.emplace(name.substr(2), std::move(t));
    } else if (name.rfind("v.", 0) == 0) {
      state.opt.v.emplace(name.substr(2), std::move(t));
    } else if (name.rfind("w.", 0) == 0) {
      state.weights.emplace(name.substr(2), std::move(t));
    } else {
      throw CorruptionError("unknown tensor section for " + name);
    }
  }
  if (!same_names_and_shapes(state.weights, state.opt.m) ||
      !same_names_and_shapes(state.weights, state.opt.v)) {
    throw CorruptionError("weights and optimizer moments disagree in " + path);
  }

  uint32_t rng_len = r.u32();
  state.rng = Rng::deserialize(r.bytes(rng_len));
  state.cursor.shard = r.u32();
  state.cursor.record = r.u64();
  if (!r.done()) throw CorruptionError("trailing bytes in checkpoint: " + path);
  return state;
}

// --------------------------------------------------------------------------
// Training loop
// --------------------------------------------------------------------------

uint64_t ShardSet::total_examples() const {
  uint64_t n = 0;
  for (const auto& shard : shards) n += shard.size();
  return n;
}

ShardSet load_shards(const std::vector<std::string>& paths) {
  ShardSet set;
  for (const std::string& path : paths) set.shards.push_back(read_shard(path));
  return set;
}

namespace {

const PretrainExample& next_example(const ShardSet& shards, DataCursor& cursor) {
  const uint32_t n_shards = static_cast<uint32_t>(shards.shards.size());
  if (cursor.shard >= n_shards) cursor = {0, 0};
  // Skip empty shards (and wrap) until we land on a record.
  for (uint32_t hops = 0; hops <= n_shards; ++hops) {
    const auto& shard = shards.shards[cursor.shard];
    if (cursor.record < shard.size()) break;
    cursor.shard = (cursor.shard + 1) % n_shards;
    cursor.record = 0;
  }
  const auto& shard = shards.shards[cursor.shard];
  if (cursor.record >= shard.size()) throw InputError("no examples in any shard");
  const PretrainExample& ex = shard[cursor.record];
  cursor.record += 1;
  if (cursor.record >= shard.size()) {
    cursor.shard = (cursor.shard + 1) % n_shards;
    cursor.record = 0;
  }
  return ex;
}

}  // namespace

TrainStats train_steps(TrainState& state, const ShardSet& shards, int64_t n_steps,
                       const StepSink& sink) {
  if (shards.shards.empty() || shards.empty()) throw InputError("no training shards");
  TrainStats stats;
  uint64_t consecutive_skips = 0;

  for (int64_t done = 0; done < n_steps;) {
    std::vector<Encoding> encs;
    encs.reserve(static_cast<size_t>(state.hp.batch));
    for (int i = 0; i < state.hp.batch; ++i) {
      encs.push_back(next_example(shards, state.cursor).encoding);
    }

    std::vector<MaskingPlan> plans;
    plans.reserve(encs.size());
    size_t planned = 0;
    for (const Encoding& enc : encs) {
      plans.push_back(plan_masking(enc, state.hp.mask_mode, state.hp.mask_rate, state.rng));
      planned += plans.back().size();
    }
    if (planned == 0) {
      stats.skipped_batches += 1;
      if (++consecutive_skips > 10000) {
        throw InputError("training data yields no maskable positions");
      }
      continue;
    }
    consecutive_skips = 0;

    uint64_t dropout_seed = state.rng.next_u64();
    GradResult result;
    if (state.arch == Arch::kBert) {
      std::vector<Encoding> masked;
      masked.reserve(encs.size());
      std::vector<int32_t> labels;
      for (size_t e = 0; e < encs.size(); ++e) {
        MaskedEncoding me = apply_masking(encs[e], plans[e], state.config.vocab_size, state.rng);
        masked.push_back(std::move(me.corrupted));
        labels.insert(labels.end(), me.labels.begin(), me.labels.end());
      }
      Batch batch = make_batch(masked, state.config.max_seq_len);
      result = mlm_gradients(state.weights, state.config, batch, labels, true, dropout_seed);
    } else {
      std::vector<RTDBatch> rtd = rtd_corrupt_batch(encs, plans, state.weights, state.config,
                                                    state.rng, dropout_seed, true);
      ElectraStep step = make_electra_step(encs, rtd, state.config.max_seq_len);
      result = electra_gradients(state.weights, state.config, step, state.hp.lambda, true,
                                 dropout_seed);
    }

    clip_global_norm(result.grads, state.hp.clip_norm);
    double lr = lr_at(state.step + 1, state.hp.base_lr, state.hp.warmup, state.hp.total_steps);
    adam_step(state.opt, state.weights, result.grads, lr);
    quantize_to_storage(state.weights);
    quantize_to_storage(state.opt.m);
    quantize_to_storage(state.opt.v);

    state.step += 1;
    done += 1;
    if (sink) {
      sink({state.step, result.loss, lr, result.gen_loss, result.disc_bce});
    }
  }
  return stats;
}

PretrainResult pretrain(const ShardSet& shards, Arch arch, const ModelConfig& config,
                        const PretrainHyperparams& hp, const std::string& out_dir, bool quiet) {
  config.validate();
  hp.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  std::ofstream log(fs::path(out_dir) / "train.log", std::ios::trunc);
  if (!log) throw IoError("output directory not writable: " + out_dir);

  TrainState state = init_train_state(arch, config, hp);

  std::vector<int64_t> checkpoint_steps;
  for (int64_t s = hp.checkpoint_every; s <= hp.total_steps; s += hp.checkpoint_every) {
    checkpoint_steps.push_back(s);
  }
  if (checkpoint_steps.empty() || checkpoint_steps.back() != hp.total_steps) {
    checkpoint_steps.push_back(hp.total_steps);
  }

  PretrainResult result;
  StepSink sink = [&](const StepLog& entry) {
    char line[128];
    std::snprintf(line, sizeof(line), "%" PRId64 "\t%.6f\t%.8g", entry.step, entry.loss,
                  entry.lr);
    log << line << '\n';
    if (!quiet) std::printf("%s\n", line);
    result.log.push_back(entry);
  };

  for (int64_t target : checkpoint_steps) {
    TrainStats stats = train_steps(state, shards, target - state.step, sink);
    result.skipped_batches += stats.skipped_batches;
    char name[48];
    std::snprintf(name, sizeof(name), "checkpoint-%07" PRId64 ".glmc", state.step);
    std::string path = (fs::path(out_dir) / name).string();
    save_checkpoint(state, path);
    result.checkpoint_paths.push_back(path);
  }
  log.flush();
  if (!log) throw IoError("short write to training log in " + out_dir);
  return result;
}

}  // namespace lmkit
