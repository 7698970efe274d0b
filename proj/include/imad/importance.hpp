// SPDX-License-Identifier: Apache-2.0
//
// Global feature rankings used to check attribution against classical
// importance measures: information gain over quantile bins, Gini importance
// from a random forest, and how often a feature is among the top factors of
// the per-sample reports.

#pragma once

#include "imad/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <vector>

namespace imad {

/// 1-based ranks in increasing order of value; ties share their mean rank.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson correlation of the average ranks. Throws for fewer than two
/// values or when either side is constant.
double spearman(std::span<const double> a, std::span<const double> b);

/// Entropy in bits of a label distribution given as counts.
double entropy_bits(std::span<const double> counts);

/// Bin index per value: distinct values when there are at most `bins`,
/// otherwise cut points at the k/bins empirical quantiles.
std::vector<std::size_t> quantile_bins(std::span<const double> values, std::size_t bins = 16);

/// H(Y) - H(Y | bin(X)) in bits, for labels in {0, 1}.
double information_gain(std::span<const double> values, std::span<const int> labels,
                        std::size_t bins = 16);

struct ForestConfig {
  std::size_t trees = 25;
  std::size_t max_depth = 8;
  std::size_t min_samples_split = 2;
  std::size_t features_per_split = 0;  // 0 selects round(sqrt(p))
  std::uint64_t seed = 1;
};

/// Mean decrease in Gini impurity per feature over a bootstrap forest of
/// CART trees, normalised to sum to 1 (all zeros when no split was made).
std::vector<double> gini_importance(const std::vector<std::vector<double>>& rows,
                                    std::span<const int> labels, const ForestConfig& config);

/// Occurrences of each feature index among the listed factors of `reports`.
/// Grouped factors are skipped.
std::vector<double> attribution_frequency(const std::vector<AttributionReport>& reports,
                                          std::size_t width);

struct ImportanceConfig {
  std::size_t bins = 16;
  std::size_t top_k = 5;
  ForestConfig forest;
};

struct FeatureImportance {
  std::size_t index = 0;  // position in the classifier input
  std::string name;
  double information_gain = 0;
  double gini = 0;
  double attribution_frequency = 0;
};

struct ImportanceAnalysis {
  std::vector<FeatureImportance> features;  // non-constant static features
  std::vector<std::string> excluded;        // constant over the dataset
  double rho_attribution_ig = 0;
  double rho_attribution_gini = 0;
  double rho_ig_gini = 0;
  std::size_t samples = 0;
};

/// Ranks the static features of a full-mode pipeline over labelled samples.
/// The code group has no single raw value and is left out of every ranking.
ImportanceAnalysis feature_importance_analysis(const Pipeline& pipeline,
                                               const std::vector<SampleRecord>& samples,
                                               const ImportanceConfig& config = {});

nlohmann::json importance_to_json(const ImportanceAnalysis& analysis);

}  // namespace imad
