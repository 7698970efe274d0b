// SPDX-License-Identifier: Apache-2.0

#include "imad/attention.hpp"

#include <cmath>
#include <string>

namespace imad {

std::vector<double> positional_encoding(std::size_t position, std::size_t d_model) {
  std::vector<double> pe(d_model);
  const double pos = static_cast<double>(position);
  for (std::size_t j = 0; j < d_model; ++j) {
    const double k2 = static_cast<double>(j - j % 2);
    const double angle = pos / std::pow(10000.0, k2 / static_cast<double>(d_model));
    pe[j] = j % 2 == 0 ? std::sin(angle) : std::cos(angle);
  }
  return pe;
}

Tensor positional_encodings(std::size_t n, std::size_t d_model) {
  std::vector<double> data;
  data.reserve(n * d_model);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = positional_encoding(i, d_model);
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor::from_data({n, d_model}, std::move(data));
}

// ---------------------------------------------------------------------------
// MultiHeadAttention

MultiHeadAttention::MultiHeadAttention(std::size_t d_model, std::size_t heads, Rng& rng,
                                       bool scale_by_d_model)
    : d_model_(d_model), heads_(heads) {
  if (heads == 0 || d_model % heads != 0)
    throw std::invalid_argument("attention: d_model " + std::to_string(d_model) +
                                " is not divisible by " + std::to_string(heads) + " heads");
  wq = xavier_uniform(d_model, d_model, rng);
  wk = xavier_uniform(d_model, d_model, rng);
  wv = xavier_uniform(d_model, d_model, rng);
  wo = xavier_uniform(d_model, d_model, rng);
  init_constants(scale_by_d_model);
}

MultiHeadAttention MultiHeadAttention::from_weights(Tensor wq, Tensor wk, Tensor wv, Tensor wo,
                                                    std::size_t heads, bool scale_by_d_model) {
  MultiHeadAttention m;
  m.d_model_ = wq.rows();
  m.heads_ = heads;
  for (const Tensor* w : {&wq, &wk, &wv, &wo})
    if (w->rows() != m.d_model_ || w->cols() != m.d_model_)
      throw ShapeError("attention: projection " + shape_string(w->shape()) +
                       " is not d_model x d_model");
  if (heads == 0 || m.d_model_ % heads != 0)
    throw std::invalid_argument("attention: d_model not divisible by heads");
  m.wq = std::move(wq);
  m.wk = std::move(wk);
  m.wv = std::move(wv);
  m.wo = std::move(wo);
  m.init_constants(scale_by_d_model);
  return m;
}

void MultiHeadAttention::init_constants(bool scale_by_d_model) {
  const std::size_t dk = d_model_ / heads_;
  std::vector<double> sum(d_model_ * heads_, 0.0), spread(heads_ * d_model_, 0.0);
  for (std::size_t j = 0; j < d_model_; ++j) {
    sum[j * heads_ + j / dk] = 1.0;
    spread[(j / dk) * d_model_ + j] = 1.0;
  }
  head_sum_ = Tensor::from_data({d_model_, heads_}, std::move(sum));
  head_spread_ = Tensor::from_data({heads_, d_model_}, std::move(spread));
  scale_ = std::sqrt(static_cast<double>(scale_by_d_model ? d_model_ : dk));
}

void MultiHeadAttention::check_width(const char* what, const Tensor& t) const {
  if (t.cols() != d_model_)
    throw ShapeError(std::string("multi_head_attention: ") + what + " width " +
                     std::to_string(t.cols()) + " != d_model " + std::to_string(d_model_));
}

AttentionOutput MultiHeadAttention::attend(const Tensor& query, const Tensor& items) const {
  check_width("query", query);
  check_width("items", items);
  if (query.rows() != 1)
    throw ShapeError("multi_head_attention: expected a single query row, got " +
                     shape_string(query.shape()));
  const Tensor q = ops::matmul(query, wq);
  const Tensor keys = ops::matmul(items, wk);
  const Tensor values = ops::matmul(items, wv);
  const Tensor scores = ops::scale(ops::matmul(ops::mul(keys, q), head_sum_), 1.0 / scale_);
  Tensor weights = ops::softmax(scores, 0);
  const Tensor mixed =
      ops::sum(ops::mul(ops::matmul(weights, head_spread_), values), 0);
  return {ops::matmul(mixed, wo), std::move(weights)};
}

AttentionOutput MultiHeadAttention::attend_local(const Tensor& queries,
                                                 std::span<const LocalContext> context,
                                                 PadMode pad) const {
  check_width("queries", queries);
  if (context.empty()) throw ShapeError("multi_head_attention: empty context");
  const std::size_t n = queries.rows();

  struct Projection {
    const void* id;
    Tensor keys, values;
  };
  std::vector<Projection> cache;
  std::vector<Tensor> scores, values;
  const Tensor q = ops::matmul(queries, wq);
  for (const auto& entry : context) {
    check_width("context", entry.source);
    if (entry.broadcast ? entry.source.rows() != 1 : entry.source.rows() != n)
      throw ShapeError("multi_head_attention: context rows " +
                       std::to_string(entry.source.rows()) + " do not match " +
                       std::to_string(n) + " queries");
    const Projection* proj = nullptr;
    for (const auto& p : cache)
      if (p.id == entry.source.id()) proj = &p;
    if (proj == nullptr) {
      cache.push_back({entry.source.id(), ops::matmul(entry.source, wk),
                       ops::matmul(entry.source, wv)});
      proj = &cache.back();
    }
    Tensor k = proj->keys;
    Tensor v = proj->values;
    if (!entry.broadcast && entry.shift != 0) {
      k = ops::shift_rows(k, entry.shift, pad);
      v = ops::shift_rows(v, entry.shift, pad);
    }
    const Tensor s = ops::scale(ops::matmul(ops::mul(q, k), head_sum_), 1.0 / scale_);
    scores.push_back(ops::reshape(s, {n * heads_, 1}));
    values.push_back(std::move(v));
  }

  Tensor weights = ops::softmax(ops::concat(scores, 1), 1);
  Tensor mixed;
  for (std::size_t j = 0; j < values.size(); ++j) {
    const Tensor a = ops::reshape(ops::slice(weights, 1, j, 1), {n, heads_});
    const Tensor term = ops::mul(ops::matmul(a, head_spread_), values[j]);
    mixed = mixed.defined() ? ops::add(mixed, term) : term;
  }
  return {ops::matmul(mixed, wo), std::move(weights)};
}

void MultiHeadAttention::collect(std::string_view prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "wq"), wq});
  out.push_back({join_name(prefix, "wk"), wk});
  out.push_back({join_name(prefix, "wv"), wv});
  out.push_back({join_name(prefix, "wo"), wo});
}

// ---------------------------------------------------------------------------
// Layers

void StarConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0)
    throw std::invalid_argument("star config: d_model " + std::to_string(d_model) +
                                " must be a positive multiple of heads " +
                                std::to_string(heads));
  if (d_ff == 0) throw std::invalid_argument("star config: d_ff must be positive");
  if (layers == 0) throw std::invalid_argument("star config: at least one layer required");
}

StarPlusLayer::StarPlusLayer(const StarConfig& config, Rng& rng)
    : satellite_attention(config.d_model, config.heads, rng, config.scale_by_d_model),
      relay_attention(config.d_model, config.heads, rng, config.scale_by_d_model),
      ffn(config.d_model, config.d_ff, rng),
      satellite_attention_norm(config.d_model),
      satellite_ffn_norm(config.d_model),
      relay_attention_norm(config.d_model),
      relay_ffn_norm(config.d_model),
      pad(config.pad) {}

Tensor StarPlusLayer::update_satellites(const Tensor& hidden, const Tensor& relay) const {
  const LocalContext context[] = {
      {hidden, 1, false}, {hidden, 0, false}, {hidden, -1, false}, {relay, 0, true}};
  const auto att = satellite_attention.attend_local(hidden, context, pad);
  const Tensor mid = satellite_attention_norm(ops::relu(att.output));
  return satellite_ffn_norm(ops::relu(ffn(mid)));
}

std::pair<Tensor, Tensor> StarPlusLayer::update_relay(const Tensor& relay,
                                                      const Tensor& hidden) const {
  auto att = relay_attention.attend(relay, hidden);
  const Tensor mid = relay_attention_norm(ops::relu(att.output));
  return {relay_ffn_norm(ops::relu(ffn(mid))), std::move(att.weights)};
}

LayerOutput StarPlusLayer::forward(const Tensor& hidden, const Tensor& relay) const {
  if (hidden.rows() == 0) throw ShapeError("star_plus_layer: empty sequence");
  Tensor next_hidden = update_satellites(hidden, relay);
  auto [next_relay, weights] = update_relay(relay, next_hidden);
  return {std::move(next_hidden), std::move(next_relay), std::move(weights)};
}

void StarPlusLayer::collect(std::string_view prefix, ParameterList& out) const {
  satellite_attention.collect(join_name(prefix, "satellite_attention"), out);
  relay_attention.collect(join_name(prefix, "relay_attention"), out);
  ffn.collect(join_name(prefix, "ffn"), out);
  satellite_attention_norm.collect(join_name(prefix, "satellite_attention_norm"), out);
  satellite_ffn_norm.collect(join_name(prefix, "satellite_ffn_norm"), out);
  relay_attention_norm.collect(join_name(prefix, "relay_attention_norm"), out);
  relay_ffn_norm.collect(join_name(prefix, "relay_ffn_norm"), out);
}

StarLayer::StarLayer(const StarConfig& config, Rng& rng)
    : satellite_attention(config.d_model, config.heads, rng, config.scale_by_d_model),
      relay_attention(config.d_model, config.heads, rng, config.scale_by_d_model),
      satellite_norm(config.d_model),
      relay_norm(config.d_model),
      pad(config.pad) {}

LayerOutput StarLayer::forward(const Tensor& hidden, const Tensor& relay,
                               const Tensor& embeddings) const {
  if (!embeddings.defined())
    throw std::invalid_argument("star_layer: embeddings are required");
  if (embeddings.rows() != hidden.rows())
    throw ShapeError("star_layer: embeddings have " + std::to_string(embeddings.rows()) +
                     " rows, hidden state has " + std::to_string(hidden.rows()));
  const LocalContext context[] = {{hidden, 1, false},
                                  {hidden, 0, false},
                                  {hidden, -1, false},
                                  {embeddings, 0, false},
                                  {relay, 0, true}};
  const auto att = satellite_attention.attend_local(hidden, context, pad);
  Tensor next_hidden = satellite_norm(ops::relu(att.output));
  auto relay_att = relay_attention.attend(relay, next_hidden);
  Tensor next_relay = relay_norm(ops::relu(relay_att.output));
  return {std::move(next_hidden), std::move(next_relay), std::move(relay_att.weights)};
}

void StarLayer::collect(std::string_view prefix, ParameterList& out) const {
  satellite_attention.collect(join_name(prefix, "satellite_attention"), out);
  relay_attention.collect(join_name(prefix, "relay_attention"), out);
  satellite_norm.collect(join_name(prefix, "satellite_norm"), out);
  relay_norm.collect(join_name(prefix, "relay_norm"), out);
}

// ---------------------------------------------------------------------------
// Encoders

StarPlusEncoder::StarPlusEncoder(const StarConfig& config, Rng& rng) : config_(config) {
  config.validate();
  for (std::size_t t = 0; t < config.layers; ++t) layers.emplace_back(config, rng);
}

EncoderOutput StarPlusEncoder::run(const Tensor& inputs) const {
  if (!inputs.defined() || inputs.size() == 0)
    throw ShapeError("run_star_plus: empty sequence");
  Tensor hidden = inputs;
  Tensor relay = ops::mean(inputs, 0);
  Tensor weights;
  for (const auto& layer : layers) {
    auto out = layer.forward(hidden, relay);
    hidden = std::move(out.hidden);
    relay = std::move(out.relay);
    weights = std::move(out.relay_weights);
  }
  return {std::move(relay), std::move(hidden), std::move(weights)};
}

void StarPlusEncoder::collect(std::string_view prefix, ParameterList& out) const {
  for (std::size_t t = 0; t < layers.size(); ++t)
    layers[t].collect(join_name(prefix, "layer" + std::to_string(t)), out);
}

StarEncoder::StarEncoder(const StarConfig& config, Rng& rng) : config_(config) {
  config.validate();
  for (std::size_t t = 0; t < config.layers; ++t) layers.emplace_back(config, rng);
}

EncoderOutput StarEncoder::run(const Tensor& embeddings) const {
  if (!embeddings.defined() || embeddings.size() == 0)
    throw ShapeError("star_layer: empty sequence");
  Tensor hidden = embeddings;
  Tensor relay = ops::mean(embeddings, 0);
  Tensor weights;
  for (const auto& layer : layers) {
    auto out = layer.forward(hidden, relay, embeddings);
    hidden = std::move(out.hidden);
    relay = std::move(out.relay);
    weights = std::move(out.relay_weights);
  }
  return {std::move(relay), std::move(hidden), std::move(weights)};
}

void StarEncoder::collect(std::string_view prefix, ParameterList& out) const {
  for (std::size_t t = 0; t < layers.size(); ++t)
    layers[t].collect(join_name(prefix, "layer" + std::to_string(t)), out);
}

}  // namespace imad
