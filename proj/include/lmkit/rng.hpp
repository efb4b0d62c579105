#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace lmkit {

/// Deterministic random source. All sampling goes through explicit helpers
/// built on the raw mt19937_64 output stream, never through std::
/// distributions, so that a serialized engine state fully determines every
/// future draw and checkpointed training can resume bit-exactly.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1), 53 bits of randomness.
  double uniform();

  /// Unbiased uniform integer in [0, n). n must be positive.
  uint64_t uniform_below(uint64_t n);

  /// Standard normal via Box-Muller (one fresh pair per call, second value
  /// discarded so the engine state is the only state).
  double normal();

  /// N(0, sigma^2) conditioned on |x| <= clip, by rejection.
  double truncated_normal(double sigma, double clip);

  /// Fisher-Yates shuffle driven by uniform_below.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Engine state as text (round-trips exactly through deserialize).
  std::string serialize() const;
  static Rng deserialize(const std::string& text);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

/// splitmix64-style combiner for deriving independent stream seeds from a
/// base seed and a stream index.
uint64_t mix_seed(uint64_t seed, uint64_t stream);

}  // namespace lmkit
