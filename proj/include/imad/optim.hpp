// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "imad/nn.hpp"

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

namespace imad {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First and second moment estimates of one parameter.
struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

/// One bias-corrected Adam update of `param` in place. `step` is the 1-based
/// index of this update.
void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& moments,
               const AdamConfig& config, std::uint64_t step);

class Adam {
 public:
  Adam(ParameterList params, AdamConfig config = {});

  /// Applies one update from the accumulated gradients; parameters without a
  /// gradient buffer are treated as having zero gradient.
  void step();
  void zero_grad() const { zero_grads(params_); }

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return config_; }
  const ParameterList& parameters() const { return params_; }
  const AdamMoments& moments(std::size_t index) const { return moments_.at(index); }

 private:
  ParameterList params_;
  AdamConfig config_;
  std::vector<AdamMoments> moments_;
  std::uint64_t t_ = 0;
};

/// Patience-based stopping on a validation loss (lower is better).
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience = 5) : patience_(patience) {}

  /// Records an epoch's validation loss. Returns true when it is a new best.
  bool update(double validation_loss);
  bool should_stop() const { return wait_ >= patience_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = -1;
  int wait_ = 0;
  int epoch_ = 0;
};

}  // namespace imad
