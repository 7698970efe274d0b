// SPDX-License-Identifier: Apache-2.0

#include "imad/importance.hpp"

#include "imad/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace imad {

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double mean_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("spearman: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("spearman: need at least two values");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) throw std::domain_error("spearman: constant ranking");
  return sab / std::sqrt(saa * sbb);
}

double entropy_bits(std::span<const double> counts) {
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  if (total <= 0) return 0.0;
  double h = 0;
  for (double c : counts)
    if (c > 0) h -= c / total * std::log2(c / total);
  return h;
}

std::vector<std::size_t> quantile_bins(std::span<const double> values, std::size_t bins) {
  if (bins < 2) throw std::invalid_argument("quantile_bins: need at least two bins");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> distinct = sorted;
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::vector<double> cuts;
  if (distinct.size() <= bins) {
    // One bin per distinct value: cut above every value but the largest.
    cuts.assign(distinct.begin(), distinct.empty() ? distinct.end() : distinct.end() - 1);
  } else {
    for (std::size_t k = 1; k < bins; ++k)
      cuts.push_back(sorted[k * sorted.size() / bins]);
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  }
  std::vector<std::size_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    // Values equal to a cut belong to the bin below it in the distinct case.
    const auto it = distinct.size() <= bins
                        ? std::lower_bound(cuts.begin(), cuts.end(), values[i])
                        : std::upper_bound(cuts.begin(), cuts.end(), values[i]);
    out[i] = static_cast<std::size_t>(it - cuts.begin());
  }
  return out;
}

double information_gain(std::span<const double> values, std::span<const int> labels,
                        std::size_t bins) {
  if (values.size() != labels.size()) throw std::invalid_argument("information_gain: length mismatch");
  if (values.empty()) return 0.0;
  const auto bin = quantile_bins(values, bins);
  std::map<std::size_t, std::array<double, 2>> table;
  std::array<double, 2> overall{0, 0};
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("information_gain: labels must be 0 or 1");
    table[bin[i]][static_cast<std::size_t>(labels[i])] += 1;
    overall[static_cast<std::size_t>(labels[i])] += 1;
  }
  const double n = static_cast<double>(values.size());
  double conditional = 0;
  for (const auto& [_, counts] : table)
    conditional += (counts[0] + counts[1]) / n * entropy_bits(counts);
  return std::max(0.0, entropy_bits(overall) - conditional);
}

// ---------------------------------------------------------------------------
// Random forest

namespace {

double gini(double n0, double n1) {
  const double n = n0 + n1;
  if (n == 0) return 0;
  const double p0 = n0 / n, p1 = n1 / n;
  return 1.0 - p0 * p0 - p1 * p1;
}

struct TreeBuilder {
  const std::vector<std::vector<double>>& rows;
  std::span<const int> labels;
  const ForestConfig& config;
  std::size_t mtry;
  double total;  // bootstrap size, for weighting
  Rng& rng;
  std::vector<double>& importance;

  void grow(std::vector<std::size_t>& idx, std::size_t depth) {
    double n1 = 0;
    for (std::size_t i : idx) n1 += labels[i];
    const double n = static_cast<double>(idx.size());
    const double n0 = n - n1;
    if (depth >= config.max_depth || idx.size() < config.min_samples_split || n0 == 0 || n1 == 0) return;
    const double parent = gini(n0, n1);

    const std::size_t p = rows.front().size();
    std::vector<std::size_t> features(p);
    std::iota(features.begin(), features.end(), 0);
    rng.shuffle(features);
    features.resize(mtry);

    double best_gain = 0;
    std::size_t best_feature = p;
    double best_threshold = 0;
    std::vector<std::size_t> sorted = idx;
    for (std::size_t f : features) {
      std::stable_sort(sorted.begin(), sorted.end(),
                       [&](std::size_t a, std::size_t b) { return rows[a][f] < rows[b][f]; });
      double l0 = 0, l1 = 0;
      for (std::size_t k = 0; k + 1 < sorted.size(); ++k) {
        (labels[sorted[k]] ? l1 : l0) += 1;
        const double v = rows[sorted[k]][f], next = rows[sorted[k + 1]][f];
        if (v == next) continue;
        const double nl = l0 + l1, nr = n - nl;
        const double gain = parent - nl / n * gini(l0, l1) - nr / n * gini(n0 - l0, n1 - l1);
        if (gain > best_gain) {
          best_gain = gain;
          best_feature = f;
          best_threshold = 0.5 * (v + next);
        }
      }
    }
    if (best_feature == p) return;
    importance[best_feature] += n / total * best_gain;
    std::vector<std::size_t> left, right;
    for (std::size_t i : idx) (rows[i][best_feature] <= best_threshold ? left : right).push_back(i);
    idx.clear();
    idx.shrink_to_fit();
    grow(left, depth + 1);
    grow(right, depth + 1);
  }
};

}  // namespace

std::vector<double> gini_importance(const std::vector<std::vector<double>>& rows,
                                    std::span<const int> labels, const ForestConfig& config) {
  if (rows.size() != labels.size()) throw std::invalid_argument("gini_importance: length mismatch");
  if (rows.empty()) throw std::invalid_argument("gini_importance: no rows");
  const std::size_t p = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != p) throw std::invalid_argument("gini_importance: ragged rows");
  for (int y : labels)
    if (y != 0 && y != 1) throw std::invalid_argument("gini_importance: labels must be 0 or 1");
  std::size_t mtry = config.features_per_split;
  if (mtry == 0) mtry = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(p))));
  mtry = std::clamp<std::size_t>(mtry, 1, p);

  std::vector<double> importance(p, 0.0);
  Rng rng(config.seed);
  for (std::size_t t = 0; t < config.trees; ++t) {
    std::vector<std::size_t> sample(rows.size());
    for (auto& i : sample) i = rng.index(rows.size());
    TreeBuilder builder{rows, labels, config, mtry, static_cast<double>(sample.size()), rng, importance};
    builder.grow(sample, 0);
  }
  const double sum = std::accumulate(importance.begin(), importance.end(), 0.0);
  if (sum > 0)
    for (double& v : importance) v /= sum;
  return importance;
}

std::vector<double> attribution_frequency(const std::vector<AttributionReport>& reports,
                                          std::size_t width) {
  std::vector<double> counts(width, 0.0);
  for (const auto& r : reports)
    for (const auto& f : r.factors)
      if (!f.group) counts.at(f.index) += 1;
  return counts;
}

// ---------------------------------------------------------------------------
// Analysis

namespace {

double spearman_or_nan(std::span<const double> a, std::span<const double> b) {
  try {
    return spearman(a, b);
  } catch (const std::domain_error&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

ImportanceAnalysis feature_importance_analysis(const Pipeline& pipeline,
                                               const std::vector<SampleRecord>& samples,
                                               const ImportanceConfig& config) {
  if (!pipeline.has(Stage::toplevel_full) || pipeline.mode != ToplevelMode::full)
    throw StageError(Stage::toplevel_full, Stage::toplevel_full);
  if (samples.empty()) throw std::invalid_argument("importance analysis: no samples");

  std::vector<int> labels;
  for (const auto& s : samples) {
    if (!s.label) throw std::invalid_argument("importance analysis: sample '" + s.id + "' has no label");
    labels.push_back(*s.label);
  }
  std::vector<std::vector<double>> raw(samples.size());
  std::vector<AttributionReport> reports(samples.size());
  parallel_for(samples.size(), pipeline.config().workers, [&](std::size_t i) {
    raw[i] = pipeline.schema.static_features(samples[i]);
    reports[i] = pipeline.detect(samples[i], config.top_k);
  });

  const std::size_t offset = pipeline.schema.code_width;
  const auto names = pipeline.schema.static_names();
  const auto frequency = attribution_frequency(reports, pipeline.schema.width());

  ImportanceAnalysis out;
  out.samples = samples.size();
  std::vector<std::size_t> kept;
  for (std::size_t j = 0; j < names.size(); ++j) {
    bool constant = true;
    for (const auto& r : raw) constant = constant && r[j] == raw.front()[j];
    (constant ? out.excluded.push_back(names[j]) : kept.push_back(j));
  }

  std::vector<std::vector<double>> columns(kept.size());
  std::vector<std::vector<double>> forest_rows(samples.size(), std::vector<double>(kept.size()));
  for (std::size_t k = 0; k < kept.size(); ++k)
    for (std::size_t i = 0; i < samples.size(); ++i) {
      columns[k].push_back(raw[i][kept[k]]);
      forest_rows[i][k] = raw[i][kept[k]];
    }
  const auto gi = kept.empty() ? std::vector<double>{} : gini_importance(forest_rows, labels, config.forest);

  std::vector<double> ig_v, gi_v, fr_v;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    FeatureImportance f;
    f.index = offset + kept[k];
    f.name = names[kept[k]];
    f.information_gain = information_gain(columns[k], labels, config.bins);
    f.gini = gi[k];
    f.attribution_frequency = frequency[f.index];
    ig_v.push_back(f.information_gain);
    gi_v.push_back(f.gini);
    fr_v.push_back(f.attribution_frequency);
    out.features.push_back(std::move(f));
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  out.rho_attribution_ig = kept.size() >= 2 ? spearman_or_nan(fr_v, ig_v) : nan;
  out.rho_attribution_gini = kept.size() >= 2 ? spearman_or_nan(fr_v, gi_v) : nan;
  out.rho_ig_gini = kept.size() >= 2 ? spearman_or_nan(ig_v, gi_v) : nan;
  return out;
}

nlohmann::json importance_to_json(const ImportanceAnalysis& a) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  nlohmann::json features = nlohmann::json::array();
  for (const auto& f : a.features)
    features.push_back({{"index", f.index},
                        {"name", f.name},
                        {"information_gain", f.information_gain},
                        {"gini_importance", f.gini},
                        {"attribution_frequency", f.attribution_frequency}});
  return {{"samples", a.samples},
          {"features", features},
          {"excluded_constant", a.excluded},
          {"spearman",
           {{"attribution_vs_information_gain", num(a.rho_attribution_ig)},
            {"attribution_vs_gini", num(a.rho_attribution_gini)},
            {"information_gain_vs_gini", num(a.rho_ig_gini)}}}};
}

}  // namespace imad
