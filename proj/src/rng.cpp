#include "lmkit/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "lmkit/errors.hpp"

namespace lmkit {

double Rng::uniform() {
  // 53 random bits into [0, 1).
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

uint64_t Rng::uniform_below(uint64_t n) {
  if (n == 0) throw InputError("uniform_below: n must be positive");
  // Rejection sampling to avoid modulo bias.
  const uint64_t threshold = (0 - n) % n;  // 2^64 mod n
  for (;;) {
    uint64_t r = next_u64();
    if (r >= threshold) return r % n;
  }
}

double Rng::normal() {
  // Box-Muller; 1-u keeps the log argument strictly positive.
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::truncated_normal(double sigma, double clip) {
  for (;;) {
    double x = normal() * sigma;
    if (std::abs(x) <= clip) return x;
  }
}

std::string Rng::serialize() const {
  std::ostringstream os;
  os << engine_;
  return os.str();
}

Rng Rng::deserialize(const std::string& text) {
  Rng rng;
  std::istringstream is(text);
  is >> rng.engine_;
  if (is.fail()) throw CorruptionError("invalid RNG state");
  return rng;
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  // splitmix64 finalizer over the combined value.
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace lmkit
