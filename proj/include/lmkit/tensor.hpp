#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "lmkit/errors.hpp"

namespace lmkit {

/// Dense row-major tensor of 64-bit reals. Rank 1 and 2 cover every
/// parameter in this codebase; activations live in Eigen matrices inside
/// the model implementation and never appear in this map.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape) {
    Tensor t;
    t.shape = std::move(shape);
    t.data.assign(static_cast<size_t>(numel_of(t.shape)), 0.0);
    return t;
  }

  static Tensor full(std::vector<int64_t> shape, double value) {
    Tensor t = zeros(std::move(shape));
    for (double& x : t.data) x = value;
    return t;
  }

  static int64_t numel_of(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t d : shape) n *= d;
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }

  int64_t rows() const { return shape.empty() ? 0 : shape[0]; }
  int64_t cols() const { return rank() == 2 ? shape[1] : 1; }

  double& at(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
  double at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (double x : data) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }
};

/// Named parameter set. std::map keeps iteration order deterministic, which
/// the optimizer and the checkpoint writer rely on.
using TensorMap = std::map<std::string, Tensor>;

inline bool same_names_and_shapes(const TensorMap& a, const TensorMap& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->first != ib->first || !ia->second.same_shape(ib->second)) return false;
  }
  return true;
}

}  // namespace lmkit
