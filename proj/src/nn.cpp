// SPDX-License-Identifier: Apache-2.0

#include "imad/nn.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace imad {

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index: empty range");
  // Lemire-style rejection keeps the result unbiased.
  const std::uint64_t bound = n;
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t x = engine_();
    if (x >= threshold) return static_cast<std::size_t>(x % bound);
  }
}

double Rng::normal() {
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Tensor xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::vector<double> values(rows * cols);
  for (double& v : values) v = rng.uniform(-bound, bound);
  return Tensor::from_data({rows, cols}, std::move(values), true);
}

void zero_grads(const ParameterList& params) {
  for (const auto& p : params) Tensor(p.tensor).zero_grad();
}

std::size_t parameter_count(const ParameterList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

std::vector<std::vector<double>> snapshot(const ParameterList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void restore(const ParameterList& params, const std::vector<std::vector<double>>& values) {
  if (values.size() != params.size())
    throw std::invalid_argument("restore: snapshot has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    if (values[i].size() != t.size())
      throw std::invalid_argument("restore: size mismatch for " + params[i].name);
    std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
  }
}

void set_requires_grad(const ParameterList& params, bool flag) {
  for (const auto& p : params) Tensor(p.tensor).set_requires_grad(flag);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(xavier_uniform(in, out, rng)), bias(Tensor::zeros({1, out}, true)) {}

Linear Linear::zeros(std::size_t in, std::size_t out) {
  Linear l;
  l.weight = Tensor::zeros({in, out}, true);
  l.bias = Tensor::zeros({1, out}, true);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  return ops::add(ops::matmul(x, weight), bias);
}

void Linear::collect(std::string_view prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "weight"), weight});
  out.push_back({join_name(prefix, "bias"), bias});
}

LayerNorm::LayerNorm(std::size_t width)
    : gain(Tensor::full({1, width}, 1.0, true)), bias(Tensor::zeros({1, width}, true)) {}

Tensor LayerNorm::operator()(const Tensor& x) const {
  return ops::layer_norm(x, gain, bias, eps);
}

void LayerNorm::collect(std::string_view prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "gain"), gain});
  out.push_back({join_name(prefix, "bias"), bias});
}

FeedForward::FeedForward(std::size_t d_model, std::size_t d_ff, Rng& rng)
    : inner(d_model, d_ff, rng), outer(d_ff, d_model, rng) {}

Tensor FeedForward::operator()(const Tensor& x) const {
  return outer(ops::relu(inner(x)));
}

void FeedForward::collect(std::string_view prefix, ParameterList& out) const {
  inner.collect(join_name(prefix, "inner"), out);
  outer.collect(join_name(prefix, "outer"), out);
}

}  // namespace imad
