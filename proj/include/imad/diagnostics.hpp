// SPDX-License-Identifier: Apache-2.0
//
// Self-checks that run outside the unit tests: the finite-difference suite
// over every trainable layer type and the cost probe of one Star-Plus layer.

#pragma once

#include "imad/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace imad {

struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

/// Satellite update, relay update, encoder stack, masked-instruction head,
/// clone cosine loss and the classifier, each on small random inputs drawn
/// from `seed`.
std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 1, double h = 1e-5);

struct LinearFit {
  double slope = 0;
  double intercept = 0;
  double r_squared = 0;
};
/// Ordinary least squares of y on x.
LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

struct ComplexityProbe {
  std::vector<std::size_t> lengths;
  std::vector<double> flops;    // forward pass of one layer
  std::vector<double> seconds;  // best of `repeats` forward passes
  LinearFit flop_fit;
};

/// Counts floating point operations and times one Star-Plus layer forward
/// pass at each sequence length.
ComplexityProbe probe_layer_complexity(const std::vector<std::size_t>& lengths,
                                       std::size_t d_model = 96, std::size_t heads = 4,
                                       std::size_t repeats = 20, std::uint64_t seed = 1);

}  // namespace imad
