// SPDX-License-Identifier: Apache-2.0

#include "imad/optim.hpp"

#include <cmath>

namespace imad {

void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
               const AdamConfig& config, std::uint64_t step) {
  if (grad.size() != param.size())
    throw ShapeError("adam_step: gradient has " + std::to_string(grad.size()) +
                     " values for a parameter of " + std::to_string(param.size()));
  if (step == 0) throw std::invalid_argument("adam_step: step index is 1-based");
  if (moments.m.empty()) {
    moments.m.assign(param.size(), 0.0);
    moments.v.assign(param.size(), 0.0);
  }
  if (moments.m.size() != param.size())
    throw ShapeError("adam_step: moment size does not match parameter");
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    moments.m[i] = config.beta1 * moments.m[i] + (1.0 - config.beta1) * g;
    moments.v[i] = config.beta2 * moments.v[i] + (1.0 - config.beta2) * g * g;
    const double m_hat = moments.m[i] / c1;
    const double v_hat = moments.v[i] / c2;
    param[i] -= config.lr * m_hat / (std::sqrt(v_hat) + config.eps);
  }
}

Adam::Adam(ParameterList params, AdamConfig config)
    : params_(std::move(params)), config_(config), moments_(params_.size()) {}

void Adam::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor p = params_[i].tensor;
    if (!p.requires_grad()) continue;
    const std::vector<double> g = p.grad();
    adam_step(p.mutable_data(), g, moments_[i], config_, t_);
  }
}

bool EarlyStopping::update(double validation_loss) {
  const bool improved = validation_loss < best_;
  if (improved) {
    best_ = validation_loss;
    best_epoch_ = epoch_;
    wait_ = 0;
  } else {
    ++wait_;
  }
  ++epoch_;
  return improved;
}

}  // namespace imad
