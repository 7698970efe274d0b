// SPDX-License-Identifier: Apache-2.0
//
// Scalar-loop IFFNN evaluation and a brute-force logistic-regression
// optimum, used as oracles.

#pragma once

#include "imad/iffnn.hpp"

#include <cmath>
#include <limits>
#include <vector>

namespace naive {

struct IffnnResult {
  double logit = 0;
  double y = 0;
  std::vector<double> w;
};

inline std::vector<double> affine(const imad::Linear& l, const std::vector<double>& x) {
  const std::size_t in = l.weight.rows(), out = l.weight.cols();
  std::vector<double> y(out);
  for (std::size_t o = 0; o < out; ++o) {
    double s = l.bias.data()[o];
    for (std::size_t i = 0; i < in; ++i) s += x[i] * l.weight.at(i, o);
    y[o] = s;
  }
  return y;
}

inline IffnnResult iffnn(const imad::Iffnn& model, const std::vector<double>& x) {
  std::vector<double> v = x;
  for (const auto& layer : model.layers) {
    v = affine(layer, v);
    for (double& e : v) e = std::tanh(e);
  }
  IffnnResult r;
  r.w = affine(model.weight_generator, v);
  r.logit = model.bias.item();
  for (std::size_t j = 0; j < x.size(); ++j) r.logit += r.w[j] * x[j];
  r.y = 1.0 / (1.0 + std::exp(-r.logit));
  return r;
}

/// Mean cross-entropy of sigmoid(w . x + b).
inline double lr_loss(const std::vector<std::vector<double>>& xs, const std::vector<double>& ys,
                      const std::vector<double>& w, double b) {
  double total = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double z = b;
    for (std::size_t j = 0; j < w.size(); ++j) z += w[j] * xs[i][j];
    // log(1 + e^z) - y z, stable in both tails
    total += std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - ys[i] * z;
  }
  return total / static_cast<double>(xs.size());
}

/// Minimum of the two-feature logistic-regression loss over a grid on
/// [-range, range]^3.
inline double lr_grid_minimum(const std::vector<std::vector<double>>& xs,
                              const std::vector<double>& ys, double range = 8.0,
                              double step = 0.1) {
  double best = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(std::lround(range / step));
  for (int a = -n; a <= n; ++a)
    for (int c = -n; c <= n; ++c)
      for (int d = -n; d <= n; ++d)
        best = std::min(best, lr_loss(xs, ys, {a * step, c * step}, d * step));
  return best;
}

}  // namespace naive
