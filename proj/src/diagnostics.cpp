// SPDX-License-Identifier: Apache-2.0

#include "imad/diagnostics.hpp"

#include "imad/attention.hpp"
#include "imad/galaxy.hpp"
#include "imad/iffnn.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <stdexcept>

namespace imad {

namespace {

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng) {
  std::vector<double> v(r * c);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return Tensor::from_data({r, c}, std::move(v));
}

// Unit gains and zero biases would hide normalisation mistakes.
void perturb(const ParameterList& params, Rng& rng) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v += rng.uniform(-0.5, 0.5);
  }
}

// At width 6 the final ReLU often leaves one unit alive; LayerNorm of a
// one-hot-like vector is almost scale invariant, so the true gradients drop
// to ~1e-8 and under the finite-difference noise floor. Width 12 avoids that.
StarConfig small_star(std::size_t layers) {
  StarConfig c;
  c.d_model = 12;
  c.heads = 2;
  c.d_ff = 24;
  c.layers = layers;
  return c;
}

GalaxyConfig small_galaxy() {
  GalaxyConfig c;
  c.d_model = 12;
  c.heads = 2;
  c.d_ff = 24;
  c.block_layers = 1;
  c.function_layers = 1;
  c.executable_layers = 1;
  c.max_block_length = 16;
  return c;
}

CodeVocabulary small_vocabulary() {
  CodeVocabulary v;
  for (const char* op : {"mov", "add", "xor", "push", "pop", "ret"}) v.opcodes.add(op);
  for (const char* r : {"eax", "ebx", "ecx", "1", "0"}) v.operands.add(r);
  return v;
}

BasicBlock random_block(Rng& rng, const CodeVocabulary& v, std::size_t n) {
  auto pick = [&](const TokenVocabulary& t) { return kReservedTokens + rng.index(t.size() - kReservedTokens); };
  BasicBlock b;
  for (std::size_t i = 0; i < n; ++i)
    b.instructions.push_back({pick(v.opcodes), pick(v.operands),
                              rng.bernoulli(0.5) ? kEmptyId : pick(v.operands)});
  return b;
}

AssemblyFunction random_function(Rng& rng, const CodeVocabulary& v, std::size_t blocks) {
  AssemblyFunction f;
  for (std::size_t i = 0; i < blocks; ++i) f.blocks.push_back(random_block(rng, v, 2 + rng.index(4)));
  return f;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed, double h) {
  std::vector<GradCheckCase> out;
  Rng root(seed);

  {
    Rng rng = root.fork(1);
    StarPlusLayer layer(small_star(1), rng);
    ParameterList params;
    layer.collect("layer", params);
    perturb(params, rng);
    Tensor hidden = random_matrix(3, 12, rng);
    Tensor relay = random_matrix(1, 12, rng);
    hidden.set_requires_grad(true);
    relay.set_requires_grad(true);
    params.push_back({"hidden", hidden});
    params.push_back({"relay", relay});
    const Tensor p_hidden = random_matrix(3, 12, rng);
    const Tensor p_relay = random_matrix(1, 12, rng);
    out.push_back({"star-plus satellite update",
                   grad_check_parameters(
                       [&] { return ops::sum(ops::mul(layer.update_satellites(hidden, relay), p_hidden)); },
                       params, h)});
    out.push_back({"star-plus relay update",
                   grad_check_parameters(
                       [&] { return ops::sum(ops::mul(layer.update_relay(relay, hidden).first, p_relay)); },
                       params, h)});
  }
  {
    Rng rng = root.fork(2);
    StarPlusEncoder encoder(small_star(2), rng);
    ParameterList params;
    encoder.collect("encoder", params);
    perturb(params, rng);
    Tensor x = random_matrix(4, 12, rng);
    x.set_requires_grad(true);
    params.push_back({"input", x});
    const Tensor projection = random_matrix(1, 12, rng);
    out.push_back({"star-plus encoder stack",
                   grad_check_parameters(
                       [&] { return ops::sum(ops::mul(encoder.run(x).relay, projection)); }, params, h)});
  }
  {
    Rng rng = root.fork(3);
    GalaxyModel m(small_galaxy(), small_vocabulary(), rng.next());
    BasicBlock b = random_block(rng, m.vocabulary(), 4);
    const Instruction target = b.instructions[1];
    b.instructions[1] = mask_instruction();
    out.push_back({"masked instruction head",
                   grad_check_parameters([&] { return m.mam_loss(b, 1, target); },
                                         m.level_parameters("mam_head"), h)});
  }
  {
    Rng rng = root.fork(4);
    GalaxyModel m(small_galaxy(), small_vocabulary(), rng.next());
    const AssemblyFunction f = random_function(rng, m.vocabulary(), 2);
    const AssemblyFunction g = random_function(rng, m.vocabulary(), 3);
    out.push_back({"clone cosine loss",
                   grad_check_parameters([&] { return m.clone_loss(f, g, -1.0); },
                                         m.level_parameters("planet_star"), h)});
  }
  {
    Rng rng = root.fork(5);
    Iffnn m(5, {4, 3}, rng);
    for (auto& l : m.layers)
      for (double& b : l.bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
    for (double& b : m.weight_generator.bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
    m.bias.mutable_data()[0] = rng.uniform(-0.5, 0.5);
    const Tensor x = random_matrix(6, 5, rng);
    const std::vector<double> labels = {0, 1, 1, 0, 1, 0};
    out.push_back({"interpretable classifier",
                   grad_check_parameters([&] { return m.loss(x, labels); }, m.parameters(), h)});
  }
  return out;
}

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("fit_line: need two or more points");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i] / n;
    my += y[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0) throw std::invalid_argument("fit_line: constant x");
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  double residual = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - (f.slope * x[i] + f.intercept);
    residual += e * e;
  }
  f.r_squared = syy == 0 ? 1.0 : 1.0 - residual / syy;
  return f;
}

ComplexityProbe probe_layer_complexity(const std::vector<std::size_t>& lengths, std::size_t d_model,
                                       std::size_t heads, std::size_t repeats, std::uint64_t seed) {
  Rng rng(seed);
  StarConfig config;
  config.d_model = d_model;
  config.heads = heads;
  config.d_ff = 4 * d_model;
  config.layers = 1;
  StarPlusLayer layer(config, rng);
  ComplexityProbe probe;
  probe.lengths = lengths;
  NoGradGuard no_grad;
  for (std::size_t n : lengths) {
    const Tensor x = random_matrix(n, d_model, rng);
    const Tensor s = ops::mean(x, 0);
    flops::reset();
    layer.forward(x, s);
    probe.flops.push_back(static_cast<double>(flops::count()));
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < std::max<std::size_t>(repeats, 1); ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      layer.forward(x, s);
      best = std::min(best, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    probe.seconds.push_back(best);
  }
  std::vector<double> xs(lengths.begin(), lengths.end());
  probe.flop_fit = fit_line(xs, probe.flops);
  return probe;
}

}  // namespace imad
