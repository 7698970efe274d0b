// SPDX-License-Identifier: Apache-2.0
//
// Interpretable feed-forward network: a logistic regression whose weight
// vector is produced from the input,
//
//   v_0 = x,  v_i = tanh(W_1^i v_{i-1} + b_1^i),  w(x) = W_2 v_l + b_2,
//   y = sigmoid(w(x) . x + b),
//
// so that w(x)_j x_j is the additive impact of feature j on the logit.

#pragma once

#include "imad/features.hpp"
#include "imad/nn.hpp"
#include "imad/optim.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace imad {

class Iffnn {
 public:
  Iffnn() = default;
  Iffnn(std::size_t input_width, std::vector<std::size_t> hidden, Rng& rng);

  /// Two hidden layers of width max(64, m / 4).
  static std::vector<std::size_t> default_hidden(std::size_t input_width);

  struct Output {
    Tensor logit;    // n x 1
    Tensor weights;  // n x m, w(x) per row
  };
  /// Rows of `x` are inputs.
  Output forward(const Tensor& x) const;
  /// Mean binary cross-entropy against labels in {0, 1}.
  Tensor loss(const Tensor& x, const std::vector<double>& labels) const;

  struct Evaluation {
    double confidence = 0;  // y, probability of the malicious class
    double logit = 0;
    std::vector<double> weights;
  };
  /// Single input, no graph.
  Evaluation evaluate(std::span<const double> x) const;

  std::size_t input_width() const { return input_width_; }
  const std::vector<std::size_t>& hidden() const { return hidden_; }
  double bias_value() const { return bias.item(); }

  void collect(std::string_view prefix, ParameterList& out) const;
  ParameterList parameters() const;
  nlohmann::json metadata() const;
  /// Same shapes as recorded by metadata(); values are initial and are
  /// meant to be overwritten from a checkpoint.
  static Iffnn from_metadata(const nlohmann::json& j);

  std::vector<Linear> layers;  // W_1^i, b_1^i
  Linear weight_generator;     // W_2, b_2
  Tensor bias;                 // b, 1 x 1

 private:
  std::size_t input_width_ = 0;
  std::vector<std::size_t> hidden_;
};

struct TrainConfig {
  double lr = 1e-4;
  std::size_t max_epochs = 50;
  std::size_t batch_size = 32;
  int patience = 5;
  std::uint64_t seed = 1;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0;
  double validation_loss = 0;
  double validation_accuracy = 0;
};

struct TrainHistory {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;
  double best_validation_loss = 0;
  bool stopped_early = false;
};

struct Dataset {
  std::vector<std::vector<double>> rows;
  std::vector<double> labels;
  std::size_t size() const { return rows.size(); }
};

/// Mean loss and accuracy (threshold 0.5) without a graph.
std::pair<double, double> evaluate_iffnn(const Iffnn& model, const Dataset& data);

/// Adam on the cross-entropy with per-epoch validation and early stopping;
/// the best-validation parameters are restored before returning. With an
/// empty validation set the training loss drives early stopping.
TrainHistory train_iffnn(Iffnn& model, const Dataset& train, const Dataset& validation,
                         const TrainConfig& config);

// ---------------------------------------------------------------------------
// Attribution

struct Factor {
  std::string description;
  std::size_t index = 0;  // first feature index; the code group uses its first index
  bool group = false;     // the summed "Assembly code" impact
  double value = 0;       // model input (standardised)
  std::optional<double> raw_value;
  double impact = 0;
};

struct FunctionInfluence {
  std::size_t index = 0;
  std::string name;
  double weight = 0;  // relay attention summed over heads
};

struct AttributionReport {
  std::string file;
  bool malicious = false;
  double confidence = 0;  // y
  double logit = 0;
  double bias = 0;
  std::vector<double> impacts;  // w(x)_j x_j for every feature
  double code_impact = 0;
  /// Grouped impacts: the code group first, then each non-code feature.
  std::vector<Factor> candidates;
  std::vector<Factor> factors;  // top-k of the candidates for the predicted class
  std::vector<FunctionInfluence> functions;  // ranked
  std::vector<std::vector<double>> relay_weights;  // per function, per head

  /// Probability of the predicted class.
  double prediction_confidence() const { return malicious ? confidence : 1.0 - confidence; }
};

struct AttributionInput {
  std::string file;
  const SegmentedFeatureVector* features = nullptr;  // model inputs
  std::vector<double> raw_values;                    // optional, same width
  Tensor relay_weights;                              // functions x heads, may be undefined
  std::vector<std::string> function_names;           // optional
  std::size_t top_k = 5;
};

AttributionReport attribute(const Iffnn& model, const AttributionInput& input);

/// Indices into `candidates` ordered for the predicted class: decreasing
/// impact when malicious, increasing when benign, ties by feature index.
std::vector<std::size_t> rank_factors(const std::vector<Factor>& candidates, bool malicious);

nlohmann::json report_to_json(const AttributionReport& report);
/// Plain-text layout: file, prediction, confidence, factor rows and
/// influential functions. At most `max_functions` functions are listed.
std::string report_to_table(const AttributionReport& report, std::size_t max_functions = 5);

/// Four significant digits, e.g. "99.97%".
std::string format_percent(double probability);

}  // namespace imad
