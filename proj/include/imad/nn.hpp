// SPDX-License-Identifier: Apache-2.0
//
// Seeded randomness, parameter bookkeeping and the small dense building
// blocks shared by the transformer levels and the classifier.

#pragma once

#include "imad/tensor.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace imad {

/// Deterministic PRNG. Conversions to floating point are done by hand so that
/// the stream of values does not depend on the standard library's
/// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[index(i)]);
  }

  /// Derives an independent stream, e.g. one per corpus section.
  Rng fork(std::uint64_t salt) { return Rng(next() ^ (salt * 0x9E3779B97F4A7C15ull)); }

 private:
  std::mt19937_64 engine_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedTensor>;

inline std::string join_name(std::string_view prefix, std::string_view name) {
  if (prefix.empty()) return std::string(name);
  return std::string(prefix) + "." + std::string(name);
}

/// Uniform in +-sqrt(6 / (fan_in + fan_out)) over a rows x cols matrix.
Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng);

void zero_grads(const ParameterList& params);
std::size_t parameter_count(const ParameterList& params);
/// Copies of the parameter values, in list order.
std::vector<std::vector<double>> snapshot(const ParameterList& params);
void restore(const ParameterList& params, const std::vector<std::vector<double>>& values);
void set_requires_grad(const ParameterList& params, bool flag);

/// Affine map x W + b for row-vector inputs.
struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // 1 x out

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng);
  /// All-zero weights and bias.
  static Linear zeros(std::size_t in, std::size_t out);

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }
  Tensor operator()(const Tensor& x) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

struct LayerNorm {
  Tensor gain;  // 1 x d, ones
  Tensor bias;  // 1 x d, zeros
  double eps = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

/// Position-wise max(0, x W1 + b1) W2 + b2.
struct FeedForward {
  Linear inner;
  Linear outer;

  FeedForward() = default;
  FeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(std::string_view prefix, ParameterList& out) const;
};

}  // namespace imad
