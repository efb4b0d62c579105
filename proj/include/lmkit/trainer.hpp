#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lmkit/corpus.hpp"
#include "lmkit/model.hpp"
#include "lmkit/objectives.hpp"
#include "lmkit/rng.hpp"
#include "lmkit/tensor.hpp"

namespace lmkit {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Adam first/second moments plus the step counter. Shapes mirror the
/// weights exactly.
struct OptimizerState {
  TensorMap m;
  TensorMap v;
  int64_t t = 0;
  AdamConfig hp;
};

/// Linear ramp 0 -> base_lr over [0, warmup_steps], then linear decay back
/// to 0 at total_steps; 0 beyond. Requires 0 < warmup_steps < total_steps.
double lr_at(int64_t step, double base_lr, int64_t warmup_steps, int64_t total_steps);

/// Bias-corrected Adam with decoupled weight decay on every tensor of rank
/// >= 2 (matrices; biases and layer-norm vectors are exempt). Throws
/// NumericError naming the tensor on a non-finite gradient.
void adam_step(OptimizerState& state, TensorMap& weights, const TensorMap& grads, double lr);

/// Scales gradients so their global L2 norm is at most max_norm. Returns
/// the pre-clip norm.
double clip_global_norm(TensorMap& grads, double max_norm);

/// Rounds every element to its nearest float value. Training arithmetic is
/// 64-bit, storage is 32-bit; committing tensors to storage precision after
/// every update makes checkpoint serialization lossless, which the
/// interrupted-vs-uninterrupted equivalence depends on.
void quantize_to_storage(TensorMap& tensors);

struct PretrainHyperparams {
  int batch = 16;
  double base_lr = 1e-4;
  int64_t warmup = 10;
  int64_t total_steps = 100;
  int64_t checkpoint_every = 50;
  uint64_t seed = 42;
  MaskMode mask_mode = MaskMode::kToken;
  double mask_rate = 0.15;
  double lambda = 50.0;
  double clip_norm = 1.0;
  AdamConfig adam;

  void validate() const;
};

struct DataCursor {
  uint32_t shard = 0;
  uint64_t record = 0;
};

/// Complete training state: everything needed to continue a run exactly
/// where it stopped.
struct TrainState {
  Arch arch = Arch::kBert;
  ModelConfig config;
  PretrainHyperparams hp;
  int64_t step = 0;
  TensorMap weights;
  OptimizerState opt;
  Rng rng;
  DataCursor cursor;
};

TrainState init_train_state(Arch arch, const ModelConfig& config, const PretrainHyperparams& hp);

inline constexpr uint32_t kCheckpointVersion = 1;

/// Binary checkpoint: magic "GLMC", u32 version, length-prefixed key=value
/// config block, u32 tensor count, named tensors (little-endian), then the
/// RNG/cursor block. save->load->save is byte-identical.
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

/// All shards resident in memory, in path order.
struct ShardSet {
  std::vector<std::vector<PretrainExample>> shards;

  uint64_t total_examples() const;
  bool empty() const { return total_examples() == 0; }
};

ShardSet load_shards(const std::vector<std::string>& paths);

struct StepLog {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double gen_loss = 0.0;  // ELECTRA only
  double disc_bce = 0.0;  // ELECTRA only
};

using StepSink = std::function<void(const StepLog&)>;

/// Runs n_steps optimization steps in place, cycling the shards from the
/// state's cursor. Deterministic given the state.
struct TrainStats {
  uint64_t skipped_batches = 0;
};
TrainStats train_steps(TrainState& state, const ShardSet& shards, int64_t n_steps,
                       const StepSink& sink);

struct PretrainResult {
  std::vector<std::string> checkpoint_paths;
  std::vector<StepLog> log;
  uint64_t skipped_batches = 0;
};

/// Full pretraining run: writes a checkpoint at every multiple of
/// checkpoint_every and at total_steps, and a TSV training log
/// (step<TAB>loss<TAB>lr) to out_dir/train.log and stdout.
PretrainResult pretrain(const ShardSet& shards, Arch arch, const ModelConfig& config,
                        const PretrainHyperparams& hp, const std::string& out_dir,
                        bool quiet = false);

}  // namespace lmkit
