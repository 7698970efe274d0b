// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Every criterion prints one PASS or FAIL line
// and the exit status is nonzero when any of them fails. Arguments select
// criteria by number ("imad_acceptance 3 4 5"); no arguments runs all twelve.
//
// Criteria 6, 7, 8, 10 and 11 share one desk-scale pipeline trained on the
// default corpus sizes; 12 repeats a reduced four-stage run twice.

#include "imad/attention.hpp"
#include "imad/checkpoint.hpp"
#include "imad/corpus.hpp"
#include "imad/diagnostics.hpp"
#include "imad/features.hpp"
#include "imad/iffnn.hpp"
#include "imad/importance.hpp"
#include "imad/pipeline.hpp"

#include "support/naive_features.hpp"
#include "support/naive_iffnn.hpp"
#include "support/naive_star.hpp"

#include <boost/math/distributions/binomial.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace imad {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  std::vector<double> v(r * c);
  for (double& x : v) x = scale * rng.uniform(-1.0, 1.0);
  return Tensor::from_data({r, c}, std::move(v));
}

void perturb(const ParameterList& params, Rng& rng) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    for (double& v : t.mutable_data()) v += rng.uniform(-0.5, 0.5);
  }
}

// ---------------------------------------------------------------------------
// Desk-scale pipeline shared by the learning criteria

PipelineConfig desk_config() {
  PipelineConfig c;
  c.seed = 1;
  c.galaxy.d_model = 24;
  c.galaxy.heads = 4;
  c.galaxy.d_ff = 48;
  c.galaxy.block_layers = 1;
  c.galaxy.function_layers = 1;
  c.galaxy.executable_layers = 1;
  c.string_threshold = 20;
  c.import_threshold = 20;
  c.clone.lr = 3e-4;
  c.clone.patience = 8;
  c.toplevel.lr = 1e-3;
  return c;
}

const fs::path& scratch() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "imad_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Desk {
  SyntheticCorpus train = generate_corpus({20000, 4000, 2000}, 7);
  SyntheticCorpus held_out = generate_corpus({2000, 1000, 1000}, 8);
  std::optional<Pipeline> pipeline;
  StageResult mam;
  double mam_seconds = 0;
  StageResult clone;
  fs::path clone_checkpoint = scratch() / "desk_clone.ckpt";
  bool full = false;
};

Desk& desk() {
  static Desk d;
  return d;
}

Desk& desk_after_mam() {
  Desk& d = desk();
  if (!d.pipeline) {
    d.pipeline.emplace(desk_config(), CodeVocabulary::build(corpus_functions(d.train)));
    const auto start = Clock::now();
    d.mam = d.pipeline->train_mam(d.train.mam_blocks);
    d.mam_seconds = seconds_since(start);
  }
  return d;
}

Desk& desk_after_clone() {
  Desk& d = desk_after_mam();
  if (!d.pipeline->has(Stage::clone)) {
    d.clone = d.pipeline->train_clone(d.train.clone_pairs);
    d.pipeline->save(d.clone_checkpoint);
  }
  return d;
}

Desk& desk_after_full() {
  Desk& d = desk_after_clone();
  if (!d.full) {
    d.pipeline->train_toplevel(d.train.executables, ToplevelMode::code_only);
    d.pipeline->train_toplevel(d.train.executables, ToplevelMode::full);
    d.full = true;
  }
  return d;
}

// ---------------------------------------------------------------------------
// Criteria

Outcome gradient_integrity() {
  const auto start = Clock::now();
  const auto cases = run_gradcheck_suite(1, 1e-5);
  const double elapsed = seconds_since(start);
  double worst = 0;
  std::string where;
  for (const auto& c : cases) {
    if (c.result.max_rel_error >= worst) {
      worst = c.result.max_rel_error;
      where = c.name;
    }
  }
  return {worst < 1e-4 && elapsed < 120 && cases.size() >= 5,
          fmt("%zu layer types, max relative error %.3g (%s), %.1f s", cases.size(), worst, where.c_str(),
              elapsed)};
}

Outcome linear_complexity() {
  const auto probe = probe_layer_complexity({32, 64, 128});
  const double ratio = probe.seconds[2] / probe.seconds[1];
  return {probe.flop_fit.r_squared > 0.999 && ratio <= 2.5,
          fmt("flop fit R^2 %.6f, wall ratio 128/64 %.3f", probe.flop_fit.r_squared, ratio)};
}

Outcome star_plus_oracle() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(5000 + seed);
    StarConfig config;
    config.d_model = 6;
    config.heads = 2;
    config.d_ff = 12;
    config.layers = 1 + seed % 2;
    config.pad = seed % 3 == 0 ? PadMode::ring : PadMode::zero;
    StarPlusEncoder encoder(config, rng);
    ParameterList params;
    encoder.collect("", params);
    perturb(params, rng);
    const std::size_t n = 1 + rng.index(8);
    const Tensor x = random_matrix(n, 6, rng, 2.0);
    const auto out = encoder.run(x);
    const auto expect = naive::run_star_plus(encoder, naive::to_mat(x));
    worst = std::max({worst, naive::max_abs_diff(expect.relay, out.relay),
                      naive::max_abs_diff(expect.hidden, out.hidden)});
  }
  return {worst <= 1e-10, fmt("100 seeds, max abs difference %.3g", worst)};
}

Outcome iffnn_identity() {
  Rng rng(8);
  Iffnn m(12, {16, 16}, rng);
  for (auto& l : m.layers)
    for (double& b : l.bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
  for (double& b : m.weight_generator.bias.mutable_data()) b = rng.uniform(-0.5, 0.5);
  m.bias.mutable_data()[0] = rng.uniform(-0.5, 0.5);

  std::vector<double> x(12);
  double identity = 0, oracle = 0;
  for (int t = 0; t < 10000; ++t) {
    for (double& v : x) v = rng.uniform(-2.0, 2.0);
    const auto e = m.evaluate(x);
    double s = 0;
    for (std::size_t j = 0; j < x.size(); ++j) s += e.weights[j] * x[j];
    identity = std::max(identity, std::abs(std::log(e.confidence / (1.0 - e.confidence)) - m.bias_value() - s));
    const auto n = naive::iffnn(m, x);
    oracle = std::max(oracle, std::abs(n.logit - e.logit));
  }

  // W_2 = 0: the generated weights are the constant bias vector.
  std::fill(m.weight_generator.weight.mutable_data().begin(), m.weight_generator.weight.mutable_data().end(), 0.0);
  const auto w = m.weight_generator.bias.data();
  std::size_t mismatches = 0;
  for (int t = 0; t < 10000; ++t) {
    for (double& v : x) v = rng.uniform(-3.0, 3.0);
    double z = 0;
    for (std::size_t j = 0; j < x.size(); ++j) z += w[j] * x[j];
    z += m.bias_value();
    const auto e = m.evaluate(x);
    if (e.logit != z || e.confidence != 1.0 / (1.0 + std::exp(-z))) ++mismatches;
  }
  return {identity <= 1e-9 && oracle <= 1e-9 && mismatches == 0,
          fmt("10^4 inputs, identity error %.3g, oracle logit error %.3g, %zu logistic-regression mismatches",
              identity, oracle, mismatches)};
}

Outcome xor_advantage() {
  const Dataset d{{{0, 0}, {0, 1}, {1, 0}, {1, 1}}, {0, 1, 1, 0}};
  const double lr_best = naive::lr_grid_minimum(d.rows, d.labels, 4.0, 0.1);
  Rng rng(12);
  Iffnn m(2, {8, 8}, rng);
  TrainConfig c;
  c.lr = 0.01;
  c.max_epochs = 3000;
  c.batch_size = 4;
  c.patience = 3000;
  train_iffnn(m, d, {}, c);
  const double loss = evaluate_iffnn(m, d).first;
  return {loss < 0.01 && lr_best >= std::log(2.0) - 0.01,
          fmt("IFFNN loss %.4g, logistic-regression optimum %.6f (ln 2 = %.6f)", loss, lr_best, std::log(2.0))};
}

Outcome mam_learnability() {
  Desk& d = desk_after_mam();
  const auto eval = d.pipeline->evaluate_mam(d.held_out.mam_blocks, 99);
  const double initial = d.mam.summary["initial_validation_loss"];
  const double uniform = d.mam.summary["uniform_loss"];
  const double gap = eval.opcode_accuracy - eval.majority_accuracy;
  const double rel = std::abs(initial - uniform) / uniform;
  return {gap >= 0.20 && rel <= 0.05 && d.mam_seconds < 1800,
          fmt("opcode top-1 %.3f vs majority %.3f (+%.1f points), initial loss %.4f vs uniform %.4f (%.2f%%), "
              "%.0f s",
              eval.opcode_accuracy, eval.majority_accuracy, 100 * gap, initial, uniform, 100 * rel,
              d.mam_seconds)};
}

Outcome clone_detection() {
  Desk& d = desk_after_clone();
  const auto eval = d.pipeline->evaluate_clone(d.held_out.clone_pairs);
  return {eval.accuracy >= 0.85, fmt("held-out pair accuracy %.3f over %zu pairs", eval.accuracy,
                                     d.held_out.clone_pairs.size())};
}

double sign_test_p(const std::vector<double>& gaps) {
  std::size_t positive = 0, nonzero = 0;
  for (double g : gaps) {
    positive += g > 0;
    nonzero += g != 0;
  }
  if (positive == 0) return 1.0;
  const boost::math::binomial b(static_cast<double>(nonzero), 0.5);
  return boost::math::cdf(boost::math::complement(b, static_cast<double>(positive - 1)));
}

Outcome ablation_direction() {
  Desk& d = desk_after_clone();
  std::vector<double> full, no_code, code_only;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto train = generate_corpus({1, 1, 2000}, 100 + seed).executables;
    const auto test = generate_corpus({1, 1, 1000}, 200 + seed).executables;
    Pipeline p = Pipeline::load(d.clone_checkpoint);
    p.train_toplevel(train, ToplevelMode::code_only);
    code_only.push_back(p.evaluate_detection(test).accuracy);
    p.train_toplevel(train, ToplevelMode::full);
    full.push_back(p.evaluate_detection(test).accuracy);
    p.train_toplevel(train, ToplevelMode::no_code);
    no_code.push_back(p.evaluate_detection(test).accuracy);
  }
  std::vector<double> vs_no_code, vs_code_only;
  for (std::size_t i = 0; i < full.size(); ++i) {
    vs_no_code.push_back(full[i] - no_code[i]);
    vs_code_only.push_back(full[i] - code_only[i]);
  }
  const auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); };
  const auto all_nonnegative = [](const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double g) { return g >= 0; });
  };
  const double p1 = sign_test_p(vs_no_code), p2 = sign_test_p(vs_code_only);
  const bool pass = mean(full) >= mean(no_code) && mean(full) >= mean(code_only) && all_nonnegative(vs_no_code) &&
                    all_nonnegative(vs_code_only) && p1 <= 0.05 && p2 <= 0.05;
  return {pass, fmt("mean accuracy full %.3f, no_code %.3f, code_only %.3f; sign test p %.4f and %.4f",
                    mean(full), mean(no_code), mean(code_only), p1, p2)};
}

std::vector<std::uint8_t> random_blob(Rng& rng) {
  std::vector<std::uint8_t> blob(rng.index(64));
  for (auto& b : blob) {
    const double u = rng.uniform();
    if (u < 0.7)
      b = static_cast<std::uint8_t>(0x20 + rng.index(0x5F));
    else if (u < 0.85)
      b = 0;
    else
      b = static_cast<std::uint8_t>(rng.index(256));
  }
  return blob;
}

Outcome string_oracle() {
  const auto bytes = [](const std::string& s) { return std::vector<std::uint8_t>(s.begin(), s.end()); };
  const std::vector<std::pair<std::string, std::vector<std::string>>> fixtures = {
      {std::string("ABCD\0", 5), {}},
      {std::string("ABCDE\0", 6), {"ABCDE"}},
      {"ABCDEFGH", {}},
      {std::string("ABC\x80" "DEFGHI\0", 11), {"DEFGHI"}},
      {std::string("\xe9t\xe9" "ABCDE\0", 9), {"ABCDE"}},
      {std::string("ABCDE\0\0FGHIJ\0", 13), {"ABCDE", "FGHIJ"}},
      {std::string("", 0), {}},
  };
  std::size_t fixture_failures = 0;
  for (const auto& [input, expected] : fixtures) {
    const auto got = extract_printable_strings(bytes(input));
    fixture_failures += got != expected || got != naive::printable_strings(bytes(input));
  }
  Rng rng(2024);
  std::size_t blob_failures = 0;
  for (int t = 0; t < 10000; ++t) {
    const auto blob = random_blob(rng);
    blob_failures += extract_printable_strings(blob) != naive::printable_strings(blob);
  }
  return {fixture_failures == 0 && blob_failures == 0,
          fmt("%zu/%zu fixtures and %zu/10000 random blobs disagree", fixture_failures, fixtures.size(),
              blob_failures)};
}

Outcome attribution_report() {
  Desk& d = desk_after_full();
  const Pipeline& p = *d.pipeline;
  const std::size_t code_width = p.model.config().d_model, top_k = 5;
  std::size_t weight_failures = 0, section_failures = 0, topk_failures = 0, detected = 0;
  double worst_sum = 0;
  for (const auto& s : d.held_out.executables) {
    const auto r = p.detect(s, top_k);
    ++detected;
    for (std::size_t h = 0; h < p.model.config().heads && !r.relay_weights.empty(); ++h) {
      double sum = 0;
      for (const auto& f : r.relay_weights) sum += f.at(h);
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
      weight_failures += std::abs(sum - 1.0) > 1e-9;
    }

    const std::string cls = r.malicious ? "malicious" : "benign";
    const std::string table = report_to_table(r);
    for (const std::string& section :
         {"File: " + s.id, "Prediction: " + cls, std::string("Confidence: "),
          "Primary factors leading to the prediction of " + cls, std::string("Feature description"),
          std::string("Feature value"), std::string("Impact"), std::string("Most influential assembly functions")})
      section_failures += table.find(section) == std::string::npos;

    // Candidates rebuilt from the raw impact array: the summed code group, then
    // every other feature.
    std::vector<std::pair<double, std::size_t>> order;
    order.emplace_back(std::accumulate(r.impacts.begin(), r.impacts.begin() + code_width, 0.0), 0);
    for (std::size_t j = code_width; j < r.impacts.size(); ++j) order.emplace_back(r.impacts[j], j);
    for (auto& [impact, index] : order) impact = r.malicious ? -impact : impact;
    std::stable_sort(order.begin(), order.end());
    bool ok = r.factors.size() == std::min(top_k, order.size());
    for (std::size_t i = 0; ok && i < r.factors.size(); ++i) {
      ok = r.factors[i].index == order[i].second &&
           std::abs(r.factors[i].impact - (r.malicious ? -order[i].first : order[i].first)) <= 1e-12;
    }
    topk_failures += !ok;
  }
  return {detected > 0 && weight_failures == 0 && section_failures == 0 && topk_failures == 0,
          fmt("%zu reports: worst head-sum error %.3g, %zu missing sections, %zu top-k mismatches", detected,
              worst_sum, section_failures, topk_failures)};
}

Outcome importance_analysis() {
  // Closed forms first: identical and reversed rankings, and the no-ties
  // formula 1 - 6 sum d^2 / (n (n^2 - 1)) on a shuffled ranking.
  std::vector<double> a(20), rev(20);
  std::iota(a.begin(), a.end(), 1.0);
  std::reverse_copy(a.begin(), a.end(), rev.begin());
  const double same = spearman(a, a), opposite = spearman(a, rev);
  std::vector<double> shuffled = a;
  Rng rng(3);
  rng.shuffle(shuffled);
  double d2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d2 += (a[i] - shuffled[i]) * (a[i] - shuffled[i]);
  const double n = static_cast<double>(a.size());
  const double formula = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  const bool extremes = std::abs(same - 1.0) <= 1e-12 && std::abs(opposite + 1.0) <= 1e-12 &&
                        std::abs(spearman(a, shuffled) - formula) <= 1e-12;

  Desk& d = desk_after_full();
  const auto analysis = feature_importance_analysis(*d.pipeline, d.held_out.executables);
  return {extremes && analysis.rho_attribution_ig > 0,
          fmt("rho(attribution, IG) %.3f over %zu features; extremes %.3f / %.3f, formula check %s",
              analysis.rho_attribution_ig, analysis.features.size(), same, opposite, extremes ? "ok" : "off")};
}

struct RunArtifacts {
  std::vector<std::string> checkpoint_hashes;
  std::vector<std::string> metrics;
};

RunArtifacts determinism_run(const fs::path& dir) {
  fs::create_directories(dir);
  const auto corpus = generate_corpus({1500, 300, 200}, 11);
  PipelineConfig c = desk_config();
  c.seed = 5;
  c.galaxy.d_model = 12;
  c.galaxy.heads = 2;
  c.galaxy.d_ff = 24;
  c.string_threshold = c.import_threshold = 2;
  c.mam.max_epochs = c.clone.max_epochs = 3;
  c.toplevel.max_epochs = 5;
  Pipeline p(c, CodeVocabulary::build(corpus_functions(corpus)));
  RunArtifacts out;
  const auto record = [&](const std::string& name, const StageResult& r) {
    const fs::path ckpt = dir / (name + ".ckpt");
    p.save(ckpt);
    out.checkpoint_hashes.push_back(file_sha256(ckpt));
    out.metrics.push_back(metrics_csv(r.history));
  };
  record("mam", p.train_mam(corpus.mam_blocks));
  record("clone", p.train_clone(corpus.clone_pairs));
  record("toplevel_code_only", p.train_toplevel(corpus.executables, ToplevelMode::code_only));
  record("toplevel_full", p.train_toplevel(corpus.executables, ToplevelMode::full));
  return out;
}

Outcome determinism() {
  const auto a = determinism_run(scratch() / "run_a");
  const auto b = determinism_run(scratch() / "run_b");
  return {a.checkpoint_hashes == b.checkpoint_hashes && a.metrics == b.metrics,
          fmt("4 stages twice: checkpoint hashes %s, metrics %s, final %.12s",
              a.checkpoint_hashes == b.checkpoint_hashes ? "identical" : "differ",
              a.metrics == b.metrics ? "identical" : "differ", a.checkpoint_hashes.back().c_str())};
}

struct Criterion {
  int number;
  const char* name;
  std::function<Outcome()> check;
};

}  // namespace
}  // namespace imad

int main(int argc, char** argv) {
  using namespace imad;
  const std::vector<Criterion> criteria = {
      {1, "gradient integrity", gradient_integrity},
      {2, "linear complexity", linear_complexity},
      {3, "star-plus oracle", star_plus_oracle},
      {4, "iffnn identity", iffnn_identity},
      {5, "xor advantage", xor_advantage},
      {6, "mam learnability", mam_learnability},
      {7, "clone detection", clone_detection},
      {8, "ablation direction", ablation_direction},
      {9, "string extractor oracle", string_oracle},
      {10, "attribution report", attribution_report},
      {11, "importance analysis", importance_analysis},
      {12, "determinism", determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.number)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2d %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.number, c.name, o.detail.c_str(),
                seconds_since(start));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
