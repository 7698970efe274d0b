// SPDX-License-Identifier: Apache-2.0
//
// imad: corpus generation, feature extraction, staged training, detection
// and importance analysis from the command line.
//
// Failures print exactly one line to stderr:
//
//   imad: error: <kind>: <message>
//
// with kind one of usage, stage-order, io, format, parse, checkpoint,
// gradcheck or internal, and exit nonzero (2 for usage, 1 otherwise).

#include "imad/checkpoint.hpp"
#include "imad/corpus.hpp"
#include "imad/diagnostics.hpp"
#include "imad/importance.hpp"
#include "imad/jsonl.hpp"
#include "imad/parallel.hpp"
#include "imad/pe.hpp"
#include "imad/pipeline.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace imad;

namespace {

struct CliError : std::runtime_error {
  CliError(std::string kind, const std::string& message)
      : std::runtime_error(message), kind(std::move(kind)) {}
  std::string kind;
};

[[noreturn]] void fail(const std::string& kind, const std::string& message) { throw CliError(kind, message); }

json read_config(const std::string& path) {
  if (path.empty()) return json::object();
  if (!fs::exists(path)) fail("io", "config file '" + path + "' does not exist");
  json j = read_json(path);
  if (!j.is_object()) fail("format", "config file '" + path + "' must hold a JSON object");
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("io", "cannot write '" + path + "'");
  out << text;
  if (!out) fail("io", "cannot write '" + path + "'");
}

bool is_jsonl(const fs::path& p) { return p.extension() == ".jsonl" || p.extension() == ".json"; }

// One input file: sample records from JSON lines, or one PE image.
struct LoadedInput {
  std::string file;
  std::vector<SampleRecord> samples;
  std::optional<json> error;
};

LoadedInput load_input(const std::string& file) {
  LoadedInput in{file, {}, std::nullopt};
  try {
    if (!fs::exists(file)) throw std::runtime_error("no such file");
    if (is_jsonl(file)) {
      in.samples = read_samples(file);
    } else {
      const std::string bytes = read_file(file);
      const auto* data = reinterpret_cast<const std::uint8_t*>(bytes.data());
      in.samples.push_back(sample_from_pe(fs::path(file).filename().string(), {data, bytes.size()}));
    }
  } catch (const ParseError& e) {
    in.error = json{{"file", file}, {"error", e.what()}, {"structure", e.structure()}, {"offset", e.offset()}};
  } catch (const std::exception& e) {
    in.error = json{{"file", file}, {"error", e.what()}};
  }
  return in;
}

std::vector<LoadedInput> load_inputs(const std::vector<std::string>& files, std::size_t workers) {
  std::vector<LoadedInput> out(files.size());
  parallel_for(files.size(), workers, [&](std::size_t i) { out[i] = load_input(files[i]); });
  return out;
}

Pipeline load_pipeline(const std::string& path) {
  if (!fs::exists(path)) fail("io", "checkpoint '" + path + "' does not exist");
  return Pipeline::load(path);
}

// ---------------------------------------------------------------------------
// gen-corpus

struct GenOptions {
  std::string out, config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> mam_blocks, clone_pairs, executables;
};

int cmd_gen_corpus(const GenOptions& o) {
  const json file = read_config(o.config);
  for (const auto& [key, value] : file.items())
    if (key != "seed" && key != "mam_blocks" && key != "clone_pairs" && key != "executables")
      fail("format", "gen-corpus config: unknown key '" + key + "'");
  std::uint64_t seed = file.value("seed", std::uint64_t{1});
  CorpusSizes sizes;
  sizes.mam_blocks = file.value("mam_blocks", sizes.mam_blocks);
  sizes.clone_pairs = file.value("clone_pairs", sizes.clone_pairs);
  sizes.executables = file.value("executables", sizes.executables);
  if (o.seed) seed = *o.seed;
  if (o.mam_blocks) sizes.mam_blocks = *o.mam_blocks;
  if (o.clone_pairs) sizes.clone_pairs = *o.clone_pairs;
  if (o.executables) sizes.executables = *o.executables;
  if (!sizes.mam_blocks || !sizes.clone_pairs || !sizes.executables)
    fail("usage", "corpus sizes must be positive");

  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec || !fs::is_directory(o.out)) fail("io", "cannot create output directory '" + o.out + "'");
  const json effective = {{"seed", seed},
                          {"mam_blocks", sizes.mam_blocks},
                          {"clone_pairs", sizes.clone_pairs},
                          {"executables", sizes.executables}};
  write_corpus(o.out, generate_corpus(sizes, seed), effective);
  std::cout << file_sha256(fs::path(o.out) / "manifest.json") << "  "
            << (fs::path(o.out) / "manifest.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// extract

struct ExtractOptions {
  std::vector<std::string> inputs;
  std::string out = "-", schema, fit;
  std::size_t string_threshold = 1000, import_threshold = 1000, workers = 1;
  bool strict = false;
};

int cmd_extract(const ExtractOptions& o) {
  if (o.schema.empty() == o.fit.empty()) fail("usage", "give exactly one of --schema and --fit");
  if (!o.schema.empty() && !fs::exists(o.schema)) fail("io", "schema '" + o.schema + "' does not exist");
  const auto loaded = load_inputs(o.inputs, o.workers);

  FeatureSchema schema;
  if (!o.fit.empty()) {
    std::vector<SampleRecord> training;
    for (const auto& in : loaded) training.insert(training.end(), in.samples.begin(), in.samples.end());
    schema = FeatureSchema::fit(training, o.string_threshold, o.import_threshold, 0);
    write_json(o.fit, schema.to_json());
  } else {
    schema = FeatureSchema::from_json(read_json(o.schema));
  }

  std::vector<json> records;
  std::size_t errors = 0;
  for (const auto& in : loaded) {
    if (in.error) {
      records.push_back(*in.error);
      ++errors;
      continue;
    }
    for (const auto& s : in.samples) {
      json r = feature_record(s, schema);
      r["file"] = in.file;
      records.push_back(std::move(r));
    }
  }
  write_text(o.out, to_jsonl(records));
  if (errors && o.strict) fail("parse", std::to_string(errors) + " input file(s) could not be read");
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string stage, corpus, run_dir, config;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<std::size_t> max_epochs, batch_size, workers;
  std::optional<int> patience;
};

Stage previous_stage(Stage s) {
  const auto& order = stage_order();
  const auto it = std::find(order.begin(), order.end(), s);
  return *(it - 1);
}

fs::path stage_checkpoint(const std::string& dir, Stage s) {
  return fs::path(dir) / (std::string(stage_name(s)) + ".ckpt");
}

int cmd_train(const TrainOptions& o) {
  Stage stage;
  try {
    stage = parse_stage(o.stage);
  } catch (const std::invalid_argument& e) {
    fail("usage", e.what());
  }
  if (!fs::is_directory(o.corpus)) fail("io", "corpus directory '" + o.corpus + "' does not exist");

  std::optional<Pipeline> pipeline;
  PipelineConfig config;
  if (stage != Stage::mam) {
    const Stage required = previous_stage(stage);
    const fs::path prior = stage_checkpoint(o.run_dir, required);
    if (!fs::exists(prior))
      fail("stage-order", std::string("stage '") + stage_name(stage) + "' requires stage '" +
                              stage_name(required) + "' (missing " + prior.string() + ")");
    pipeline = Pipeline::load(prior);
    config = pipeline->config();
  }

  // Precedence: flags > config file > checkpoint or built-in defaults.
  config = PipelineConfig::from_json(read_config(o.config), config);
  StageSettings& settings = stage == Stage::mam     ? config.mam
                            : stage == Stage::clone ? config.clone
                                                    : config.toplevel;
  if (o.seed) config.seed = *o.seed;
  if (o.lr) settings.lr = *o.lr;
  if (o.max_epochs) settings.max_epochs = *o.max_epochs;
  if (o.batch_size) settings.batch_size = *o.batch_size;
  if (o.patience) settings.patience = *o.patience;
  if (o.workers) config.workers = *o.workers;
  config = PipelineConfig::from_json(config.to_json());  // validates the overrides

  const json corpus_manifest = read_json(fs::path(o.corpus) / "manifest.json");
  StageResult result;
  if (stage == Stage::mam) {
    pipeline.emplace(config, CodeVocabulary::load(fs::path(o.corpus) / "vocab.json"));
    std::vector<TextBlock> blocks;
    for (const auto& r : read_jsonl(fs::path(o.corpus) / "mam_blocks.jsonl"))
      blocks.push_back(r.at("block").get<TextBlock>());
    result = pipeline->train_mam(blocks);
  } else {
    try {
      pipeline->reconfigure(config);
    } catch (const std::invalid_argument& e) {
      fail("usage", e.what());
    }
    const SyntheticCorpus corpus = read_corpus(o.corpus);
    if (stage == Stage::clone)
      result = pipeline->train_clone(corpus.clone_pairs);
    else
      result = pipeline->train_toplevel(corpus.executables, stage == Stage::toplevel_full
                                                                ? ToplevelMode::full
                                                                : ToplevelMode::code_only);
  }

  std::error_code ec;
  fs::create_directories(o.run_dir, ec);
  const fs::path ckpt = stage_checkpoint(o.run_dir, stage);
  pipeline->save(ckpt);
  const std::string name = stage_name(stage);
  const fs::path metrics = fs::path(o.run_dir) / (name + "_metrics.csv");
  write_file(metrics, metrics_csv(result.history));

  json epochs = json::array();
  for (const auto& e : result.history.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"validation_loss", e.validation_loss},
                      {"validation_accuracy", e.validation_accuracy}});
  const json manifest = {
      {"stage", name},
      {"seed", config.seed},
      {"config", config.to_json()},
      {"corpus", {{"directory", o.corpus}, {"files", corpus_manifest.value("files", json::object())}}},
      {"epochs", epochs},
      {"outcome",
       {{"best_epoch", result.history.best_epoch},
        {"best_validation_loss", result.history.best_validation_loss},
        {"stopped_early", result.history.stopped_early},
        {"summary", result.summary}}},
      {"checkpoint", {{"path", ckpt.string()}, {"sha256", file_sha256(ckpt)}}},
      {"metrics", metrics.string()}};
  write_json(fs::path(o.run_dir) / (name + "_manifest.json"), manifest);
  std::cout << file_sha256(ckpt) << "  " << ckpt.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// detect

struct DetectOptions {
  std::vector<std::string> inputs;
  std::string checkpoint, format = "json", out = "-";
  std::size_t top_k = 5, workers = 1, functions = 5;
};

int cmd_detect(const DetectOptions& o) {
  const Pipeline pipeline = load_pipeline(o.checkpoint);
  if (!pipeline.has(Stage::toplevel_full) || pipeline.mode != ToplevelMode::full)
    fail("checkpoint", "'" + o.checkpoint + "' is not a full-mode detector checkpoint");

  const auto loaded = load_inputs(o.inputs, o.workers);
  struct Item {
    const LoadedInput* input;
    const SampleRecord* sample;
  };
  std::vector<Item> items;
  for (const auto& in : loaded)
    for (const auto& s : in.samples) items.push_back({&in, &s});

  std::vector<std::string> rendered(items.size());
  std::vector<std::string> failures(items.size());
  parallel_for(items.size(), o.workers, [&](std::size_t i) {
    NoGradGuard no_grad;
    try {
      AttributionReport r = pipeline.detect(*items[i].sample, o.top_k);
      if (r.file.empty()) r.file = items[i].input->file;
      rendered[i] = o.format == "json" ? report_to_json(r).dump() + "\n" : report_to_table(r, o.functions) + "\n";
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });

  std::string text;
  std::size_t errors = 0;
  for (const auto& in : loaded) {
    if (!in.error) continue;
    ++errors;
    if (o.format == "json") text += in.error->dump() + "\n";
  }
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (!failures[i].empty()) {
      ++errors;
      if (o.format == "json") text += json{{"file", items[i].input->file}, {"error", failures[i]}}.dump() + "\n";
      continue;
    }
    text += rendered[i];
  }
  write_text(o.out, text);
  if (errors) fail("parse", std::to_string(errors) + " input(s) could not be scored");
  return 0;
}

// ---------------------------------------------------------------------------
// analyze-importance and gradcheck

struct ImportanceOptions {
  std::string checkpoint, samples, out = "-";
  ImportanceConfig config;
};

int cmd_importance(const ImportanceOptions& o) {
  const Pipeline pipeline = load_pipeline(o.checkpoint);
  if (!fs::exists(o.samples)) fail("io", "samples '" + o.samples + "' do not exist");
  const auto analysis = feature_importance_analysis(pipeline, read_samples(o.samples), o.config);
  write_text(o.out, importance_to_json(analysis).dump(2) + "\n");
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double h, double tolerance) {
  double worst = 0;
  for (const auto& c : run_gradcheck_suite(seed, h)) {
    std::printf("%-28s max_rel_error %.3e  at %s: analytic %.6e numeric %.6e\n", c.name.c_str(),
                c.result.max_rel_error, c.result.worst.c_str(), c.result.worst_analytic,
                c.result.worst_numeric);
    worst = std::max(worst, c.result.max_rel_error);
  }
  std::printf("max_rel_error %.3e\n", worst);
  if (!(worst < tolerance)) fail("gradcheck", "max relative error exceeds " + std::to_string(tolerance));
  return 0;
}

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interpretable malware detector over assembly code and static features", "imad"};
  app.require_subcommand(1);

  GenOptions gen;
  auto* g = app.add_subcommand("gen-corpus", "Generate the synthetic corpora and their vocabulary");
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen.seed, "Generator seed (default 1)");
  g->add_option("--mam-blocks", gen.mam_blocks, "Blocks for masked-instruction training (default 20000)");
  g->add_option("--clone-pairs", gen.clone_pairs, "Clone/non-clone function pairs (default 4000)");
  g->add_option("--executables", gen.executables, "Labelled executables (default 2000)");
  g->add_option("--config", gen.config, "JSON file with seed and sizes; flags take precedence");

  ExtractOptions ex;
  auto* e = app.add_subcommand("extract", "Static feature records from PE files or sample JSON lines");
  e->add_option("inputs", ex.inputs, "PE files, or .jsonl/.json sample record files");
  e->add_option("--out", ex.out, "Output JSON lines (default stdout)");
  e->add_option("--schema", ex.schema, "Frozen feature schema to apply");
  e->add_option("--fit", ex.fit, "Fit a schema on the inputs and write it here");
  e->add_option("--string-threshold", ex.string_threshold, "Minimum string count when fitting")
      ->capture_default_str();
  e->add_option("--import-threshold", ex.import_threshold, "Minimum import count when fitting")
      ->capture_default_str();
  e->add_option("--workers", ex.workers, "Parallel file readers")->capture_default_str()->check(CLI::PositiveNumber);
  e->add_flag("--strict", ex.strict, "Exit nonzero when any input fails to parse");

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train one stage: mam, clone, toplevel_code_only, toplevel_full");
  t->add_option("--stage", tr.stage, "Stage to train")->required();
  t->add_option("--corpus", tr.corpus, "Directory written by gen-corpus")->required();
  t->add_option("--run-dir", tr.run_dir, "Directory for stage checkpoints, metrics and manifests")->required();
  t->add_option("--config", tr.config, "JSON pipeline config; flags take precedence");
  t->add_option("--seed", tr.seed, "Run seed (mam stage only; default 1)");
  t->add_option("--lr", tr.lr, "Adam learning rate of this stage");
  t->add_option("--max-epochs", tr.max_epochs, "Epoch budget of this stage");
  t->add_option("--batch-size", tr.batch_size, "Mini-batch size of this stage");
  t->add_option("--patience", tr.patience, "Early-stopping patience of this stage");
  t->add_option("--workers", tr.workers, "Threads for feature caching");

  DetectOptions de;
  auto* d = app.add_subcommand("detect", "Classify samples and explain each prediction");
  d->add_option("inputs", de.inputs, "PE files, or .jsonl/.json sample record files")->required();
  d->add_option("--checkpoint", de.checkpoint, "toplevel_full checkpoint")->required();
  d->add_option("--format", de.format, "Report format")->check(CLI::IsMember({"json", "table"}))->capture_default_str();
  d->add_option("--top-k", de.top_k, "Factors per report")->capture_default_str()->check(CLI::PositiveNumber);
  d->add_option("--functions", de.functions, "Functions listed in table reports")->capture_default_str();
  d->add_option("--workers", de.workers, "Parallel scorers")->capture_default_str()->check(CLI::PositiveNumber);
  d->add_option("--out", de.out, "Output file (default stdout)");

  ImportanceOptions im;
  auto* a = app.add_subcommand("analyze-importance", "Rank static features by IG, Gini and attribution");
  a->add_option("--checkpoint", im.checkpoint, "toplevel_full checkpoint")->required();
  a->add_option("--samples", im.samples, "Labelled sample records (.jsonl)")->required();
  a->add_option("--out", im.out, "Output JSON (default stdout)");
  a->add_option("--bins", im.config.bins, "Quantile bins for information gain")->capture_default_str();
  a->add_option("--top-k", im.config.top_k, "Factors counted per sample")->capture_default_str();
  a->add_option("--trees", im.config.forest.trees, "Forest size for Gini importance")->capture_default_str();
  a->add_option("--depth", im.config.forest.max_depth, "Tree depth for Gini importance")->capture_default_str();
  a->add_option("--seed", im.config.forest.seed, "Forest seed")->capture_default_str();

  std::uint64_t gc_seed = 1;
  double gc_h = 1e-5, gc_tol = 1e-4;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every trainable layer type");
  gc->add_option("--seed", gc_seed, "Seed of the random inputs")->capture_default_str();
  gc->add_option("--step", gc_h, "Central-difference step")->capture_default_str();
  gc->add_option("--tolerance", gc_tol, "Largest accepted relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "imad: error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (g->parsed()) return cmd_gen_corpus(gen);
    if (e->parsed()) return cmd_extract(ex);
    if (t->parsed()) return cmd_train(tr);
    if (d->parsed()) return cmd_detect(de);
    if (a->parsed()) return cmd_importance(im);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_h, gc_tol);
  } catch (const CliError& err) {
    std::cerr << "imad: error: " << err.kind << ": " << one_line(err.what()) << "\n";
    return err.kind == "usage" ? 2 : 1;
  } catch (const StageError& err) {
    std::cerr << "imad: error: stage-order: " << one_line(err.what()) << "\n";
    return 1;
  } catch (const CheckpointError& err) {
    std::cerr << "imad: error: checkpoint: " << one_line(err.what()) << "\n";
    return 1;
  } catch (const FormatError& err) {
    std::cerr << "imad: error: format: " << one_line(err.what()) << "\n";
    return 1;
  } catch (const std::invalid_argument& err) {
    std::cerr << "imad: error: usage: " << one_line(err.what()) << "\n";
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "imad: error: internal: " << one_line(err.what()) << "\n";
    return 1;
  }
  return 0;
}
