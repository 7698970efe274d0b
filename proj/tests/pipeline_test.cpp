// SPDX-License-Identifier: Apache-2.0

#include "imad/checkpoint.hpp"
#include "imad/pipeline.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

namespace imad {
namespace {

namespace fs = std::filesystem;

PipelineConfig tiny_config(std::uint64_t seed = 5) {
  PipelineConfig c;
  c.seed = seed;
  c.galaxy.d_model = 12;
  c.galaxy.heads = 2;
  c.galaxy.d_ff = 24;
  c.galaxy.block_layers = 1;
  c.galaxy.function_layers = 1;
  c.galaxy.executable_layers = 1;
  c.string_threshold = 2;
  c.import_threshold = 2;
  for (StageSettings* s : {&c.mam, &c.clone, &c.toplevel}) {
    s->max_epochs = 3;
    s->batch_size = 16;
    s->patience = 5;
  }
  c.toplevel.lr = 1e-3;
  c.hidden = {8};
  return c;
}

const SyntheticCorpus& tiny_corpus() {
  static const SyntheticCorpus c = generate_corpus({240, 80, 60}, 17);
  return c;
}

struct TinyRun {
  Pipeline pipeline;
  std::map<Stage, StageResult> results;
  StageResult code_only;
};

TinyRun run_tiny(std::uint64_t seed = 5) {
  const auto& c = tiny_corpus();
  TinyRun r{Pipeline(tiny_config(seed), CodeVocabulary::build(corpus_functions(c))), {}, {}};
  r.results[Stage::mam] = r.pipeline.train_mam(c.mam_blocks);
  r.results[Stage::clone] = r.pipeline.train_clone(c.clone_pairs);
  r.code_only = r.pipeline.train_toplevel(c.executables, ToplevelMode::code_only);
  r.results[Stage::toplevel_full] = r.pipeline.train_toplevel(c.executables, ToplevelMode::full);
  return r;
}

TinyRun& shared_run() {
  static TinyRun r = run_tiny();
  return r;
}

fs::path scratch(const std::string& name) {
  return fs::temp_directory_path() / ("imad_pipeline_" + name);
}

TEST(Stages, NamesOrderAndParsing) {
  const auto& order = stage_order();
  ASSERT_EQ(order.size(), 4u);
  EXPECT_EQ(order.front(), Stage::mam);
  EXPECT_EQ(order.back(), Stage::toplevel_full);
  for (Stage s : order) EXPECT_EQ(parse_stage(stage_name(s)), s);
  EXPECT_EQ(parse_stage("toplevel-code-only"), Stage::toplevel_code_only);
  EXPECT_THROW(parse_stage("pretrain"), std::invalid_argument);
}

TEST(Stages, OutOfOrderStagesNameTheMissingStage) {
  const auto& c = tiny_corpus();
  Pipeline p(tiny_config(), CodeVocabulary::build(corpus_functions(c)));
  try {
    p.train_clone(c.clone_pairs);
    FAIL() << "clone before mam";
  } catch (const StageError& e) {
    EXPECT_EQ(e.attempted(), Stage::clone);
    EXPECT_EQ(e.required(), Stage::mam);
    EXPECT_NE(std::string(e.what()).find("mam"), std::string::npos);
  }
  EXPECT_THROW(p.train_toplevel(c.executables, ToplevelMode::full), StageError);
  EXPECT_THROW(p.detect(c.executables[0]), StageError);
  EXPECT_THROW(p.evaluate_detection(c.executables), StageError);
  EXPECT_TRUE(p.completed().empty());
}

TEST(Settings, JsonRoundTripAndOverlay) {
  PipelineConfig c = tiny_config(42);
  c.clone.lr = 3e-4;
  const auto back = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());

  const auto overlaid = PipelineConfig::from_json({{"seed", 9}, {"clone", {{"patience", 2}}}}, c);
  EXPECT_EQ(overlaid.seed, 9u);
  EXPECT_EQ(overlaid.clone.patience, 2);
  EXPECT_EQ(overlaid.clone.lr, 3e-4);
  EXPECT_EQ(overlaid.galaxy.d_model, 12u);

  EXPECT_THROW(PipelineConfig::from_json({{"sed", 1}}), FormatError);
  EXPECT_THROW(PipelineConfig::from_json({{"mam", {{"lr", -1}}}}), FormatError);
  EXPECT_THROW(PipelineConfig::from_json({{"validation_fraction", 1.0}}), FormatError);
}

TEST(Split, StratifiedDisjointAndDeterministic) {
  std::vector<int> labels;
  for (int i = 0; i < 300; ++i) labels.push_back(i % 3 == 0 ? 1 : 0);
  const auto [train, held] = stratified_split(labels, 0.1, 4);
  EXPECT_EQ(train.size() + held.size(), labels.size());
  std::set<std::size_t> all(train.begin(), train.end());
  for (std::size_t i : held) EXPECT_TRUE(all.insert(i).second);
  EXPECT_EQ(all.size(), labels.size());
  const auto positives = std::count_if(held.begin(), held.end(), [&](std::size_t i) { return labels[i] == 1; });
  EXPECT_EQ(positives, 10);
  EXPECT_EQ(held.size(), 30u);
  EXPECT_EQ(stratified_split(labels, 0.1, 4).second, held);
  EXPECT_NE(stratified_split(labels, 0.1, 5).second, held);
}

TEST(Metrics, CsvLayout) {
  TrainHistory h;
  h.epochs.push_back({0, 1.5, 1.25, 0.5});
  h.epochs.push_back({1, 1.0, 0.75, 0.625});
  EXPECT_EQ(metrics_csv(h),
            "epoch,train_loss,validation_loss,validation_accuracy\n"
            "0,1.5,1.25,0.5\n"
            "1,1,0.75,0.625\n");
}

TEST(Mam, MaskBlockAndUniformBaseline) {
  CodeVocabulary v = CodeVocabulary::build(corpus_functions(tiny_corpus()));
  Rng rng(2);
  const BasicBlock b = v.encode(tiny_corpus().mam_blocks[0]);
  const auto ex = mask_block(b, rng);
  EXPECT_EQ(ex.block.instructions[ex.position], mask_instruction());
  EXPECT_EQ(ex.target, b.instructions[ex.position]);
  EXPECT_THROW(mask_block(BasicBlock{}, rng), std::invalid_argument);
  EXPECT_DOUBLE_EQ(mam_uniform_loss(v), std::log(double(v.opcodes.size())) +
                                            2 * std::log(double(v.operands.size())));
}

// Opcodes follow from their neighbours: every block is one of a few fixed
// three-instruction patterns, so the masked opcode is computable by rule.
TEST(Mam, LearnsForcedOpcodes) {
  const std::vector<std::vector<std::string>> patterns = {
      {"push", "call", "pop"}, {"cmp", "jne", "ret"}, {"mul", "div", "xor"}, {"lea", "shl", "or"}};
  Rng rng(8);
  std::vector<TextBlock> blocks;
  for (int i = 0; i < 600; ++i) {
    TextBlock b;
    for (const auto& op : patterns[rng.index(patterns.size())]) b.push_back({op, "eax"});
    blocks.push_back(b);
  }
  PipelineConfig c = tiny_config();
  c.galaxy.d_model = 18;
  c.galaxy.heads = 2;
  c.galaxy.d_ff = 36;
  c.mam.lr = 3e-3;
  c.mam.max_epochs = 12;
  Pipeline p(c, CodeVocabulary::build({std::vector<TextBlock>(blocks.begin(), blocks.end())}));
  p.train_mam(blocks);

  // Held-out blocks; the two unmasked opcodes identify the pattern.
  int correct = 0, total = 0;
  for (int i = 0; i < 200; ++i) {
    const auto& pat = patterns[rng.index(patterns.size())];
    TextBlock t;
    for (const auto& op : pat) t.push_back({op, "eax"});
    BasicBlock b = p.model.vocabulary().encode(t);
    const std::size_t pos = rng.index(3);
    const std::size_t want = b.instructions[pos].opcode;
    b.instructions[pos] = mask_instruction();
    NoGradGuard no_grad;
    const auto pred = p.model.mam_predict(b, pos);
    const auto top = std::max_element(pred.opcode.begin(), pred.opcode.end()) - pred.opcode.begin();
    correct += static_cast<std::size_t>(top) == want;
    ++total;
  }
  EXPECT_GE(double(correct) / total, 0.95);
}

TEST(Pipeline, MamStartsNearUniformAndDescends) {
  const auto& r = shared_run().results.at(Stage::mam);
  const double initial = r.summary["initial_validation_loss"];
  const double uniform = r.summary["uniform_loss"];
  EXPECT_LT(std::abs(initial - uniform) / uniform, 0.05);
  ASSERT_GE(r.history.epochs.size(), 3u);
  for (std::size_t e = 1; e < 3; ++e)
    EXPECT_LE(r.history.epochs[e].train_loss, r.history.epochs[e - 1].train_loss);
}

TEST(Pipeline, StagesCompleteInOrderWithinBudget) {
  auto& run = shared_run();
  EXPECT_EQ(run.pipeline.completed(), stage_order());
  for (const auto& [stage, r] : run.results) EXPECT_LE(r.history.epochs.size(), 3u);
  EXPECT_LE(run.code_only.history.epochs.size(), 3u);
  EXPECT_EQ(run.code_only.mode, "code_only");
  EXPECT_EQ(run.pipeline.classifier.input_width(), run.pipeline.schema.width());
  EXPECT_GT(run.pipeline.schema.width(), run.pipeline.model.config().d_model);
}

TEST(Pipeline, TopLevelLeavesLowerLevelsFrozen) {
  const auto& c = tiny_corpus();
  Pipeline p(tiny_config(6), CodeVocabulary::build(corpus_functions(c)));
  p.train_mam(c.mam_blocks);
  p.train_clone(c.clone_pairs);
  const std::string before = p.lower_level_hash();
  const auto sg = parameter_hash(p.model.level_parameters("star_galaxy"));
  p.train_toplevel(c.executables, ToplevelMode::code_only);
  EXPECT_EQ(p.classifier.input_width(), p.model.config().d_model);
  EXPECT_EQ(p.lower_level_hash(), before);
  EXPECT_NE(parameter_hash(p.model.level_parameters("star_galaxy")), sg);
  p.train_toplevel(c.executables, ToplevelMode::no_code);
  EXPECT_FALSE(p.has(Stage::toplevel_full));
  EXPECT_EQ(p.lower_level_hash(), before);
}

TEST(Pipeline, CloneLossClosedForms) {
  auto& run = shared_run();
  const auto functions = corpus_functions(tiny_corpus());
  // Identical functions score cosine 1: a perfect model on clone-only pairs.
  std::vector<ClonePair> same;
  for (std::size_t i = 0; i < 10; ++i) same.push_back({tiny_corpus().clone_pairs[i].a, tiny_corpus().clone_pairs[i].a, 1});
  EXPECT_NEAR(run.pipeline.evaluate_clone(same).loss, 0.0, 1e-12);

  // A model whose function vectors are constant scores cosine 1 everywhere.
  Pipeline constant = Pipeline::load([&] {
    const auto path = scratch("constant.ckpt");
    run.pipeline.save(path);
    return path;
  }());
  for (auto& p : constant.model.level_parameters("planet_star")) {
    if (p.name.ends_with("layer0.relay_ffn_norm.gain")) std::ranges::fill(p.tensor.mutable_data(), 0.0);
    if (p.name.ends_with("layer0.relay_ffn_norm.bias")) std::ranges::fill(p.tensor.mutable_data(), 1.0);
  }
  const auto e = constant.evaluate_clone(tiny_corpus().clone_pairs);
  EXPECT_NEAR(e.loss, 2.0, 1e-12);
  EXPECT_DOUBLE_EQ(e.accuracy, 0.5);
  fs::remove(scratch("constant.ckpt"));
}

TEST(Pipeline, DetectReport) {
  auto& run = shared_run();
  for (std::size_t i = 0; i < 10; ++i) {
    const auto& s = tiny_corpus().executables[i];
    const auto report = run.pipeline.detect(s, 3);
    EXPECT_LE(report.factors.size(), 3u);
    EXPECT_EQ(report.relay_weights.size(), s.functions.size());
    for (const auto& heads : report.relay_weights) {
      ASSERT_EQ(heads.size(), run.pipeline.model.config().heads);
    }
    for (std::size_t h = 0; h < run.pipeline.model.config().heads && !s.functions.empty(); ++h) {
      double sum = 0;
      for (const auto& f : report.relay_weights) sum += f[h];
      EXPECT_NEAR(sum, 1.0, 1e-9);
    }
    EXPECT_NEAR(std::log(report.confidence / (1 - report.confidence)), report.logit, 1e-9);
    const double total = std::accumulate(report.impacts.begin(), report.impacts.end(), report.bias);
    EXPECT_NEAR(total, report.logit, 1e-9);
  }
}

TEST(Pipeline, CheckpointRoundTrip) {
  auto& run = shared_run();
  const auto path = scratch("rt.ckpt");
  run.pipeline.save(path);
  const Pipeline back = Pipeline::load(path);
  EXPECT_EQ(back.completed(), run.pipeline.completed());
  EXPECT_EQ(back.lower_level_hash(), run.pipeline.lower_level_hash());
  EXPECT_EQ(back.checkpoint_config(), run.pipeline.checkpoint_config());
  const auto& s = tiny_corpus().executables[1];
  EXPECT_EQ(back.detect(s).logit, run.pipeline.detect(s).logit);
  const auto again = scratch("rt2.ckpt");
  back.save(again);
  EXPECT_EQ(file_sha256(path), file_sha256(again));
  fs::remove(path);
  fs::remove(again);
}

TEST(Pipeline, ReconfigureKeepsArchitectureAndSeed) {
  auto& run = shared_run();
  PipelineConfig c = run.pipeline.config();
  c.toplevel.lr = 5e-4;
  EXPECT_NO_THROW(run.pipeline.reconfigure(c));
  c.seed += 1;
  EXPECT_THROW(run.pipeline.reconfigure(c), std::invalid_argument);
  c = run.pipeline.config();
  c.galaxy.d_model = 16;
  EXPECT_THROW(run.pipeline.reconfigure(c), std::invalid_argument);
}

TEST(Pipeline, SameSeedSameCheckpointAndMetrics) {
  const auto path_a = scratch("det_a.ckpt"), path_b = scratch("det_b.ckpt");
  auto a = run_tiny(7);
  auto b = run_tiny(7);
  a.pipeline.save(path_a);
  b.pipeline.save(path_b);
  EXPECT_EQ(file_sha256(path_a), file_sha256(path_b));
  for (Stage s : {Stage::mam, Stage::clone, Stage::toplevel_full})
    EXPECT_EQ(metrics_csv(a.results.at(s).history), metrics_csv(b.results.at(s).history));
  auto c = run_tiny(8);
  EXPECT_NE(c.pipeline.lower_level_hash(), a.pipeline.lower_level_hash());
  fs::remove(path_a);
  fs::remove(path_b);
}

}  // namespace
}  // namespace imad
