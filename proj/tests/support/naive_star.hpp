// SPDX-License-Identifier: Apache-2.0
//
// Scalar-loop reference implementation of multi-head attention and the star
// layers. It shares nothing with the library beyond reading parameter
// values, so it can serve as an oracle for the vectorised code.

#pragma once

#include "imad/attention.hpp"

#include <cmath>
#include <vector>

namespace naive {

using Vec = std::vector<double>;
using Mat = std::vector<Vec>;

inline Mat to_mat(const imad::Tensor& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline Vec to_vec(const imad::Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

// y = x W for a row vector x.
inline Vec vecmat(const Vec& x, const Mat& w) {
  Vec y(w[0].size(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[i] * w[i][j];
  return y;
}

struct Attention {
  Mat wq, wk, wv, wo;
  std::size_t heads = 1;
  double scale = 1.0;

  explicit Attention(const imad::MultiHeadAttention& m)
      : wq(to_mat(m.wq)), wk(to_mat(m.wk)), wv(to_mat(m.wv)), wo(to_mat(m.wo)),
        heads(m.heads()), scale(m.score_scale()) {}

  // Returns the attended vector; weights[h][j] receives the softmax weights.
  Vec operator()(const Vec& query, const Mat& items, Mat* weights = nullptr) const {
    const std::size_t d = wq.size();
    const std::size_t dk = d / heads;
    const std::size_t n = items.size();
    Vec concat(d, 0.0);
    if (weights) weights->assign(heads, Vec(n, 0.0));
    for (std::size_t h = 0; h < heads; ++h) {
      Vec q(dk, 0.0);
      for (std::size_t c = 0; c < dk; ++c)
        for (std::size_t r = 0; r < d; ++r) q[c] += query[r] * wq[r][h * dk + c];
      Vec score(n, 0.0);
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < dk; ++c) {
          double k = 0.0;
          for (std::size_t r = 0; r < d; ++r) k += items[j][r] * wk[r][h * dk + c];
          score[j] += q[c] * k;
        }
        score[j] /= scale;
      }
      double peak = score[0];
      for (double s : score) peak = std::max(peak, s);
      double z = 0.0;
      for (double& s : score) z += (s = std::exp(s - peak));
      for (std::size_t j = 0; j < n; ++j) {
        const double a = score[j] / z;
        if (weights) (*weights)[h][j] = a;
        for (std::size_t c = 0; c < dk; ++c) {
          double v = 0.0;
          for (std::size_t r = 0; r < d; ++r) v += items[j][r] * wv[r][h * dk + c];
          concat[h * dk + c] += a * v;
        }
      }
    }
    return vecmat(concat, wo);
  }
};

inline Vec relu(Vec x) {
  for (double& v : x) v = v > 0.0 ? v : 0.0;
  return x;
}

inline Vec layer_norm(const Vec& x, const imad::LayerNorm& ln) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= n;
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= n;
  Vec y(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    y[j] = (x[j] - mu) / std::sqrt(var + ln.eps) * ln.gain.data()[j] + ln.bias.data()[j];
  return y;
}

inline Vec linear(const Vec& x, const imad::Linear& l) {
  Vec y = vecmat(x, to_mat(l.weight));
  for (std::size_t j = 0; j < y.size(); ++j) y[j] += l.bias.data()[j];
  return y;
}

inline Vec ffn(const Vec& x, const imad::FeedForward& f) {
  return linear(relu(linear(x, f.inner)), f.outer);
}

// Row i - 1 (offset -1) or i + 1 (offset +1) with zero or ring padding.
inline Vec neighbour(const Mat& h, std::size_t i, int offset, imad::PadMode pad) {
  const long n = static_cast<long>(h.size());
  long j = static_cast<long>(i) + offset;
  if (j < 0 || j >= n) {
    if (pad == imad::PadMode::zero) return Vec(h[0].size(), 0.0);
    j = (j + n) % n;
  }
  return h[static_cast<std::size_t>(j)];
}

struct State {
  Mat hidden;
  Vec relay;
  Mat relay_weights;  // heads x n
};

inline State star_plus_layer(const imad::StarPlusLayer& layer, const Mat& h, const Vec& s) {
  const Attention sat(layer.satellite_attention);
  const Attention rel(layer.relay_attention);
  State out;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const Mat context = {neighbour(h, i, -1, layer.pad), h[i], neighbour(h, i, +1, layer.pad), s};
    const Vec mid = layer_norm(relu(sat(h[i], context)), layer.satellite_attention_norm);
    out.hidden.push_back(layer_norm(relu(ffn(mid, layer.ffn)), layer.satellite_ffn_norm));
  }
  const Vec mid = layer_norm(relu(rel(s, out.hidden, &out.relay_weights)),
                             layer.relay_attention_norm);
  out.relay = layer_norm(relu(ffn(mid, layer.ffn)), layer.relay_ffn_norm);
  return out;
}

inline State star_layer(const imad::StarLayer& layer, const Mat& h, const Vec& s, const Mat& e) {
  const Attention sat(layer.satellite_attention);
  const Attention rel(layer.relay_attention);
  State out;
  for (std::size_t i = 0; i < h.size(); ++i) {
    const Mat context = {neighbour(h, i, -1, layer.pad), h[i], neighbour(h, i, +1, layer.pad),
                         e[i], s};
    out.hidden.push_back(layer_norm(relu(sat(h[i], context)), layer.satellite_norm));
  }
  out.relay = layer_norm(relu(rel(s, out.hidden, &out.relay_weights)), layer.relay_norm);
  return out;
}

inline Vec column_mean(const Mat& m) {
  Vec mu(m[0].size(), 0.0);
  for (const Vec& row : m)
    for (std::size_t j = 0; j < row.size(); ++j) mu[j] += row[j];
  for (double& v : mu) v /= static_cast<double>(m.size());
  return mu;
}

inline State run_star_plus(const imad::StarPlusEncoder& encoder, const Mat& inputs) {
  State state{inputs, column_mean(inputs), {}};
  for (const auto& layer : encoder.layers) state = star_plus_layer(layer, state.hidden, state.relay);
  return state;
}

inline double max_abs_diff(const Mat& a, const imad::Tensor& b) {
  double worst = 0.0;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t c = 0; c < a[r].size(); ++c)
      worst = std::max(worst, std::abs(a[r][c] - b.at(r, c)));
  return worst;
}

inline double max_abs_diff(const Vec& a, const imad::Tensor& b) {
  return max_abs_diff(Mat{a}, b);
}

}  // namespace naive
