// SPDX-License-Identifier: Apache-2.0

#include "imad/iffnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace imad {

Iffnn::Iffnn(std::size_t input_width, std::vector<std::size_t> hidden, Rng& rng)
    : input_width_(input_width), hidden_(std::move(hidden)) {
  if (input_width == 0) throw std::invalid_argument("iffnn: input width is 0");
  std::size_t in = input_width;
  for (std::size_t width : hidden_) {
    if (width == 0) throw std::invalid_argument("iffnn: hidden layer of width 0");
    layers.emplace_back(in, width, rng);
    in = width;
  }
  weight_generator = Linear(in, input_width, rng);
  bias = Tensor::zeros({1, 1}, true);
}

std::vector<std::size_t> Iffnn::default_hidden(std::size_t input_width) {
  const std::size_t w = std::max<std::size_t>(64, input_width / 4);
  return {w, w};
}

Iffnn::Output Iffnn::forward(const Tensor& x) const {
  if (x.cols() != input_width_)
    throw ShapeError("iffnn: input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(input_width_));
  Tensor v = x;
  for (const auto& layer : layers) v = ops::tanh(layer(v));
  Output out;
  out.weights = weight_generator(v);
  out.logit = ops::add(ops::sum(ops::mul(out.weights, x), 1), bias);
  return out;
}

Tensor Iffnn::loss(const Tensor& x, const std::vector<double>& labels) const {
  Output out = forward(x);
  return ops::binary_cross_entropy_with_logits(out.logit, labels);
}

Iffnn::Evaluation Iffnn::evaluate(std::span<const double> x) const {
  NoGradGuard guard;
  Output out = forward(Tensor::from_data({1, x.size()}, std::vector<double>(x.begin(), x.end())));
  Evaluation e;
  e.logit = out.logit.item();
  e.confidence = 1.0 / (1.0 + std::exp(-e.logit));
  e.weights.assign(out.weights.data().begin(), out.weights.data().end());
  return e;
}

void Iffnn::collect(std::string_view prefix, ParameterList& out) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(join_name(prefix, "hidden" + std::to_string(i)), out);
  weight_generator.collect(join_name(prefix, "weight_generator"), out);
  out.push_back({join_name(prefix, "bias"), bias});
}

ParameterList Iffnn::parameters() const {
  ParameterList out;
  collect("iffnn", out);
  return out;
}

nlohmann::json Iffnn::metadata() const {
  return {{"input_width", input_width_}, {"hidden", hidden_}};
}

Iffnn Iffnn::from_metadata(const nlohmann::json& j) {
  Rng rng(0);
  return Iffnn(j.at("input_width").get<std::size_t>(),
               j.at("hidden").get<std::vector<std::size_t>>(), rng);
}

// ---------------------------------------------------------------------------
// Training

namespace {

Tensor stack_rows(const std::vector<std::vector<double>>& rows,
                  std::span<const std::size_t> indices) {
  const std::size_t m = rows.at(indices.front()).size();
  std::vector<double> data;
  data.reserve(indices.size() * m);
  for (std::size_t i : indices) data.insert(data.end(), rows[i].begin(), rows[i].end());
  return Tensor::from_data({indices.size(), m}, std::move(data));
}

}  // namespace

std::pair<double, double> evaluate_iffnn(const Iffnn& model, const Dataset& data) {
  if (data.size() == 0) return {0.0, 0.0};
  NoGradGuard guard;
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const Tensor x = stack_rows(data.rows, all);
  const Iffnn::Output out = model.forward(x);
  const double loss = ops::binary_cross_entropy_with_logits(out.logit, data.labels).item();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    correct += (out.logit.at(i, 0) >= 0) == (data.labels[i] >= 0.5);
  return {loss, static_cast<double>(correct) / static_cast<double>(data.size())};
}

TrainHistory train_iffnn(Iffnn& model, const Dataset& train, const Dataset& validation,
                         const TrainConfig& config) {
  if (train.size() == 0) throw std::invalid_argument("train_iffnn: empty dataset");
  if (train.labels.size() != train.size() || validation.labels.size() != validation.size())
    throw std::invalid_argument("train_iffnn: rows and labels differ in count");
  for (double y : train.labels)
    if (y != 0.0 && y != 1.0) throw std::invalid_argument("train_iffnn: labels must be 0 or 1");

  const ParameterList params = model.parameters();
  Adam adam(params, {.lr = config.lr});
  EarlyStopping stopper(config.patience);
  Rng rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  auto best = snapshot(params);
  TrainHistory history;

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const std::span<const std::size_t> batch(order.data() + start, n);
      std::vector<double> labels;
      for (std::size_t i : batch) labels.push_back(train.labels[i]);
      adam.zero_grad();
      Tensor loss = model.loss(stack_rows(train.rows, batch), labels);
      total += loss.item() * static_cast<double>(n);
      backward(loss);
      adam.step();
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = total / static_cast<double>(train.size());
    if (validation.size() > 0) {
      std::tie(m.validation_loss, m.validation_accuracy) = evaluate_iffnn(model, validation);
    } else {
      std::tie(m.validation_loss, m.validation_accuracy) = evaluate_iffnn(model, train);
    }
    history.epochs.push_back(m);
    if (stopper.update(m.validation_loss)) best = snapshot(params);
    if (stopper.should_stop()) {
      history.stopped_early = true;
      break;
    }
  }
  restore(params, best);
  history.best_epoch = static_cast<std::size_t>(stopper.best_epoch());
  history.best_validation_loss = stopper.best();
  return history;
}

// ---------------------------------------------------------------------------
// Attribution

std::vector<std::size_t> rank_factors(const std::vector<Factor>& candidates, bool malicious) {
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double ia = candidates[a].impact, ib = candidates[b].impact;
    if (ia != ib) return malicious ? ia > ib : ia < ib;
    return candidates[a].index < candidates[b].index;
  });
  return order;
}

AttributionReport attribute(const Iffnn& model, const AttributionInput& input) {
  if (input.features == nullptr) throw std::invalid_argument("attribute: no feature vector");
  const SegmentedFeatureVector& v = *input.features;
  if (v.segments.empty()) throw std::invalid_argument("attribute: segment map missing");
  if (v.names.size() != v.values.size())
    throw std::invalid_argument("attribute: feature names do not cover every value");
  if (!input.raw_values.empty() && input.raw_values.size() != v.values.size())
    throw std::invalid_argument("attribute: raw values have a different width");

  const Iffnn::Evaluation e = model.evaluate(v.values);
  AttributionReport r;
  r.file = input.file;
  r.logit = e.logit;
  r.confidence = e.confidence;
  r.bias = model.bias_value();
  r.malicious = e.logit >= 0;
  r.impacts.resize(v.values.size());
  for (std::size_t j = 0; j < v.values.size(); ++j) r.impacts[j] = e.weights[j] * v.values[j];

  const Segment& code = v.segment("code");
  if (code.width() > 0) {
    for (std::size_t j = code.begin; j < code.end; ++j) r.code_impact += r.impacts[j];
    Factor f;
    f.description = kCodeFeatureName;
    f.index = code.begin;
    f.group = true;
    f.impact = r.code_impact;
    r.candidates.push_back(f);
  }
  for (std::size_t j = 0; j < v.values.size(); ++j) {
    if (j >= code.begin && j < code.end) continue;
    Factor f;
    f.description = v.names[j];
    f.index = j;
    f.value = v.values[j];
    if (!input.raw_values.empty()) f.raw_value = input.raw_values[j];
    f.impact = r.impacts[j];
    r.candidates.push_back(f);
  }
  const auto order = rank_factors(r.candidates, r.malicious);
  for (std::size_t i = 0; i < std::min(input.top_k, order.size()); ++i)
    r.factors.push_back(r.candidates[order[i]]);

  if (input.relay_weights.defined()) {
    const Tensor& w = input.relay_weights;
    for (std::size_t i = 0; i < w.rows(); ++i) {
      FunctionInfluence fi;
      fi.index = i;
      fi.name = i < input.function_names.size() ? input.function_names[i]
                                                : "function_" + std::to_string(i);
      std::vector<double> heads(w.cols());
      for (std::size_t h = 0; h < w.cols(); ++h) {
        heads[h] = w.at(i, h);
        fi.weight += heads[h];
      }
      r.relay_weights.push_back(std::move(heads));
      r.functions.push_back(std::move(fi));
    }
    std::stable_sort(r.functions.begin(), r.functions.end(),
                     [](const auto& a, const auto& b) { return a.weight > b.weight; });
  }
  return r;
}

std::string format_percent(double probability) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g%%", 100.0 * probability);
  return buf;
}

namespace {

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string format_impact(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

nlohmann::json factor_json(const Factor& f) {
  nlohmann::json j = {{"description", f.description},
                      {"index", f.index},
                      {"group", f.group},
                      {"impact", f.impact}};
  if (f.group) {
    j["value"] = nullptr;
  } else {
    j["value"] = f.value;
    j["raw_value"] = f.raw_value ? nlohmann::json(*f.raw_value) : nlohmann::json(nullptr);
  }
  return j;
}

}  // namespace

nlohmann::json report_to_json(const AttributionReport& r) {
  nlohmann::json factors = nlohmann::json::array();
  for (const auto& f : r.factors) factors.push_back(factor_json(f));
  nlohmann::json functions = nlohmann::json::array();
  for (const auto& f : r.functions)
    functions.push_back({{"index", f.index},
                         {"name", f.name},
                         {"weight", f.weight},
                         {"head_weights", r.relay_weights.at(f.index)}});
  return {{"file", r.file},
          {"prediction", r.malicious ? "malicious" : "benign"},
          {"confidence", r.confidence},
          {"logit", r.logit},
          {"bias", r.bias},
          {"code_impact", r.code_impact},
          {"impacts", r.impacts},
          {"factors", factors},
          {"functions", functions}};
}

std::string report_to_table(const AttributionReport& r, std::size_t max_functions) {
  const std::string cls = r.malicious ? "malicious" : "benign";
  const std::vector<std::string> head = {"Feature description", "Feature value", "Standardized",
                                         "Impact"};
  std::vector<std::vector<std::string>> rows;
  for (const auto& f : r.factors) {
    if (f.group) {
      rows.push_back({f.description, "N/A", "N/A", format_impact(f.impact)});
    } else {
      rows.push_back({f.description, f.raw_value ? format_number(*f.raw_value) : "N/A",
                      format_number(f.value), format_impact(f.impact)});
    }
  }
  std::vector<std::size_t> width(head.size());
  for (std::size_t c = 0; c < head.size(); ++c) {
    width[c] = head[c].size();
    for (const auto& row : rows) width[c] = std::max(width[c], row[c].size());
  }
  std::size_t total = 3 * (head.size() - 1);
  for (auto w : width) total += w;
  const std::string rule(total, '-');

  std::ostringstream out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (c > 0) out << " | ";
      out << cells[c] << std::string(width[c] - cells[c].size(), ' ');
    }
    out << '\n';
  };
  out << "File: " << r.file << '\n'
      << "Prediction: " << cls << '\n'
      << "Confidence: " << format_percent(r.prediction_confidence()) << '\n'
      << rule << '\n'
      << "Primary factors leading to the prediction of " << cls << '\n';
  line(head);
  out << rule << '\n';
  for (const auto& row : rows) line(row);
  out << rule << '\n' << "Most influential assembly functions\n";
  if (r.functions.empty()) out << "(none)\n";
  for (std::size_t i = 0; i < std::min(max_functions, r.functions.size()); ++i)
    out << r.functions[i].name << "  (" << format_number(r.functions[i].weight) << ")\n";
  return out.str();
}

}  // namespace imad
