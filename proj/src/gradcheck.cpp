// SPDX-License-Identifier: Apache-2.0

#include "imad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace imad {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const std::function<Tensor()>& loss) {
  NoGradGuard no_grad;
  Tensor value = loss();
  if (value.size() != 1)
    throw GraphError("grad_check: function is not scalar-valued, got " +
                     shape_string(value.shape()));
  return value.item();
}

}  // namespace

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (h <= 0) throw std::invalid_argument("grad_check: step must be positive");
  Tensor probe = x.detach();
  probe.set_requires_grad(true);
  ParameterList params{{"x", probe}};
  return grad_check_parameters([&] { return f(probe); }, params, h).max_rel_error;
}

GradCheckResult grad_check_parameters(const std::function<Tensor()>& loss,
                                      const ParameterList& params, double h,
                                      std::size_t max_coords_per_param, std::uint64_t seed) {
  if (h <= 0) throw std::invalid_argument("grad_check: step must be positive");
  zero_grads(params);
  Tensor value = loss();
  if (value.size() != 1)
    throw GraphError("grad_check: function is not scalar-valued, got " +
                     shape_string(value.shape()));
  backward(value);

  GradCheckResult result;
  Rng rng(seed);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const std::vector<double> analytic = t.grad();
    std::vector<std::size_t> coords(t.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords_per_param > 0 && coords.size() > max_coords_per_param) {
      rng.shuffle(coords);
      coords.resize(max_coords_per_param);
    }
    for (std::size_t i : coords) {
      double& slot = t.mutable_data()[i];
      const double original = slot;
      slot = original + h;
      const double plus = evaluate(loss);
      slot = original - h;
      const double minus = evaluate(loss);
      slot = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = relative_error(analytic[i], numeric);
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        result.worst = p.name + "[" + std::to_string(i) + "]";
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  zero_grads(params);
  return result;
}

}  // namespace imad
