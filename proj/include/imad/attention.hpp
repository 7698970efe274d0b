// SPDX-License-Identifier: Apache-2.0
//
// Multi-head attention and the star-topology transformer layers.
//
// In a star layer every item (satellite) attends only to its two neighbours,
// itself and a shared relay node, and the relay attends to all items, so one
// layer costs O(n) in the sequence length. Two layer flavours exist:
//
//  * StarLayer      context [h_{i-1}; h_i; h_{i+1}; e_i; s], no feed-forward
//                   block. Kept for ablations.
//  * StarPlusLayer  context [h_{i-1}; h_i; h_{i+1}; s]; each attention is
//                   followed by ReLU + LayerNorm, then a position-wise FFN,
//                   ReLU and LayerNorm. Used by every level of the model.

#pragma once

#include "imad/nn.hpp"

#include <span>
#include <vector>

namespace imad {

/// Sinusoidal encoding: [2k] = sin(i / 10000^(2k/d)), [2k+1] = cos(...).
std::vector<double> positional_encoding(std::size_t position, std::size_t d_model);
/// Rows 0..n-1 of the encoding as a constant n x d tensor.
Tensor positional_encodings(std::size_t n, std::size_t d_model);

/// One entry of a per-item attention context. For item i the attended row is
/// `source[i - shift]` (padded per PadMode), or the single row of `source`
/// when `broadcast` is set.
struct LocalContext {
  Tensor source;
  int shift = 0;
  bool broadcast = false;
};

struct AttentionOutput {
  Tensor output;
  /// attend():       n x heads, each column a distribution over the n items.
  /// attend_local(): (n * heads) x k, row i * heads + head a distribution
  ///                 over the k context entries of item i.
  Tensor weights;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t d_model, std::size_t heads, Rng& rng,
                     bool scale_by_d_model = true);
  /// Wraps explicit d x d projection matrices (head i owns columns
  /// [i*d/h, (i+1)*d/h) of wq, wk, wv and the matching rows of wo).
  static MultiHeadAttention from_weights(Tensor wq, Tensor wk, Tensor wv, Tensor wo,
                                         std::size_t heads, bool scale_by_d_model = true);

  /// A single query row attending over the rows of `items`.
  AttentionOutput attend(const Tensor& query, const Tensor& items) const;
  /// Each row of `queries` attends over its own context rows.
  AttentionOutput attend_local(const Tensor& queries, std::span<const LocalContext> context,
                               PadMode pad) const;

  std::size_t d_model() const { return d_model_; }
  std::size_t heads() const { return heads_; }
  std::size_t head_dim() const { return d_model_ / heads_; }
  /// Softmax temperature; sqrt(d_model) by default, sqrt(d_k) otherwise.
  double score_scale() const { return scale_; }

  void collect(std::string_view prefix, ParameterList& out) const;

  Tensor wq, wk, wv, wo;

 private:
  void init_constants(bool scale_by_d_model);
  void check_width(const char* what, const Tensor& t) const;

  std::size_t d_model_ = 0;
  std::size_t heads_ = 1;
  double scale_ = 1.0;
  Tensor head_sum_;     // d x h indicator, sums a row's columns per head
  Tensor head_spread_;  // h x d, copies a per-head value over its columns
};

struct StarConfig {
  std::size_t d_model = 96;
  std::size_t heads = 4;
  std::size_t d_ff = 384;
  std::size_t layers = 2;
  PadMode pad = PadMode::zero;
  bool scale_by_d_model = true;

  void validate() const;
};

struct LayerOutput {
  Tensor hidden;          // n x d
  Tensor relay;           // 1 x d
  Tensor relay_weights;   // n x heads
};

class StarPlusLayer {
 public:
  StarPlusLayer() = default;
  StarPlusLayer(const StarConfig& config, Rng& rng);

  /// h_i' = LN(ReLU(MultiAtt(h_i, [h_{i-1}; h_i; h_{i+1}; s])))
  /// h_i  = LN(ReLU(FFN(h_i')))
  Tensor update_satellites(const Tensor& hidden, const Tensor& relay) const;
  /// s' = LN(ReLU(MultiAtt(s, H))), s = LN(ReLU(FFN(s'))); also returns the
  /// relay attention weights.
  std::pair<Tensor, Tensor> update_relay(const Tensor& relay, const Tensor& hidden) const;
  LayerOutput forward(const Tensor& hidden, const Tensor& relay) const;

  void collect(std::string_view prefix, ParameterList& out) const;

  MultiHeadAttention satellite_attention;
  MultiHeadAttention relay_attention;
  FeedForward ffn;
  LayerNorm satellite_attention_norm, satellite_ffn_norm;
  LayerNorm relay_attention_norm, relay_ffn_norm;
  PadMode pad = PadMode::zero;
};

class StarLayer {
 public:
  StarLayer() = default;
  StarLayer(const StarConfig& config, Rng& rng);

  LayerOutput forward(const Tensor& hidden, const Tensor& relay,
                      const Tensor& embeddings) const;
  void collect(std::string_view prefix, ParameterList& out) const;

  MultiHeadAttention satellite_attention;
  MultiHeadAttention relay_attention;
  LayerNorm satellite_norm, relay_norm;
  PadMode pad = PadMode::zero;
};

struct EncoderOutput {
  Tensor relay;          // s^T, 1 x d
  Tensor hidden;         // H^T, n x d
  Tensor relay_weights;  // top layer relay attention, n x heads
};

/// T stacked Star-Plus layers with independent parameters. The sequence is
/// represented by the top relay state.
class StarPlusEncoder {
 public:
  StarPlusEncoder() = default;
  StarPlusEncoder(const StarConfig& config, Rng& rng);

  /// H^0 = inputs, s^0 = mean of the input rows.
  EncoderOutput run(const Tensor& inputs) const;
  void collect(std::string_view prefix, ParameterList& out) const;

  const StarConfig& config() const { return config_; }
  std::vector<StarPlusLayer> layers;

 private:
  StarConfig config_;
};

/// The original star transformer stack; embeddings stay in every context.
class StarEncoder {
 public:
  StarEncoder() = default;
  StarEncoder(const StarConfig& config, Rng& rng);

  EncoderOutput run(const Tensor& embeddings) const;
  void collect(std::string_view prefix, ParameterList& out) const;

  std::vector<StarLayer> layers;

 private:
  StarConfig config_;
};

}  // namespace imad
