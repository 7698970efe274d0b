// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks of reverse-mode gradients. The error of
// one coordinate is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

#pragma once

#include "imad/nn.hpp"

#include <functional>
#include <string>

namespace imad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<parameter>[<index>]" of the worst coordinate
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

double relative_error(double analytic, double numeric);

/// Checks d f(x) / dx for a scalar-valued f. `x` is not modified.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-5);

/// Checks d loss() / d p for each listed parameter. With
/// `max_coords_per_param` > 0 only that many coordinates per parameter are
/// probed, chosen by a PRNG seeded with `seed`.
GradCheckResult grad_check_parameters(const std::function<Tensor()>& loss,
                                      const ParameterList& params, double h = 1e-5,
                                      std::size_t max_coords_per_param = 0,
                                      std::uint64_t seed = 0);

}  // namespace imad
