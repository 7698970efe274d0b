// SPDX-License-Identifier: Apache-2.0

#include "imad/pipeline.hpp"

#include "imad/checkpoint.hpp"
#include "imad/optim.hpp"
#include "imad/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

namespace imad {

// ---------------------------------------------------------------------------
// Stages

const std::vector<Stage>& stage_order() {
  static const std::vector<Stage> order = {Stage::mam, Stage::clone, Stage::toplevel_code_only,
                                           Stage::toplevel_full};
  return order;
}

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::mam: return "mam";
    case Stage::clone: return "clone";
    case Stage::toplevel_code_only: return "toplevel_code_only";
    case Stage::toplevel_full: return "toplevel_full";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  std::string n = name;
  std::replace(n.begin(), n.end(), '-', '_');
  for (Stage s : stage_order())
    if (n == stage_name(s)) return s;
  throw std::invalid_argument("unknown stage '" + name +
                              "' (expected mam, clone, toplevel-code-only or toplevel-full)");
}

StageError::StageError(Stage attempted, Stage required)
    : std::runtime_error(std::string("stage ") + stage_name(attempted) + " requires stage " +
                         stage_name(required) + " to be completed first"),
      attempted_(attempted),
      required_(required) {}

const char* mode_name(ToplevelMode mode) {
  switch (mode) {
    case ToplevelMode::code_only: return "code_only";
    case ToplevelMode::full: return "full";
    case ToplevelMode::no_code: return "no_code";
  }
  return "?";
}

namespace {

ToplevelMode parse_mode(const std::string& s) {
  for (ToplevelMode m : {ToplevelMode::code_only, ToplevelMode::full, ToplevelMode::no_code})
    if (s == mode_name(m)) return m;
  throw FormatError("unknown top-level mode '" + s + "'");
}

// Independent random stream per purpose, derived from the run seed only.
Rng stream(std::uint64_t seed, std::uint64_t salt) { return Rng(seed).fork(salt); }

enum Salt : std::uint64_t {
  kModelSalt = 11,
  kMamSplit,
  kMamMasks,
  kMamValidation,
  kCloneSplit,
  kCloneOrder,
  kTopSplit,
  kTopOrder,
  kClassifierInit,
  kMamOrder,
};

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

nlohmann::json StageSettings::to_json() const {
  return {{"lr", lr}, {"max_epochs", max_epochs}, {"batch_size", batch_size}, {"patience", patience}};
}

StageSettings StageSettings::from_json(const nlohmann::json& j, const StageSettings& base) {
  StageSettings s = base;
  for (const auto& [key, _] : j.items())
    if (key != "lr" && key != "max_epochs" && key != "batch_size" && key != "patience")
      throw FormatError("stage settings: unknown key '" + key + "'");
  s.lr = j.value("lr", s.lr);
  s.max_epochs = j.value("max_epochs", s.max_epochs);
  s.batch_size = j.value("batch_size", s.batch_size);
  s.patience = j.value("patience", s.patience);
  if (!(s.lr > 0)) throw FormatError("stage settings: lr must be positive");
  if (s.max_epochs == 0 || s.batch_size == 0)
    throw FormatError("stage settings: max_epochs and batch_size must be positive");
  if (s.patience < 1) throw FormatError("stage settings: patience must be at least 1");
  return s;
}

nlohmann::json PipelineConfig::to_json() const {
  return {{"seed", seed},
          {"galaxy", galaxy.to_json()},
          {"mam", mam.to_json()},
          {"clone", clone.to_json()},
          {"toplevel", toplevel.to_json()},
          {"string_threshold", string_threshold},
          {"import_threshold", import_threshold},
          {"validation_fraction", validation_fraction},
          {"hidden", hidden},
          {"workers", workers}};
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j, const PipelineConfig& base) {
  if (!j.is_object()) throw FormatError("pipeline config must be a JSON object");
  static const std::vector<std::string> keys = {
      "seed",      "galaxy",           "mam",              "clone",
      "toplevel",  "string_threshold", "import_threshold", "validation_fraction",
      "hidden",    "workers"};
  for (const auto& [key, _] : j.items())
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw FormatError("pipeline config: unknown key '" + key + "'");
  PipelineConfig c = base;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("galaxy")) {
      nlohmann::json g = c.galaxy.to_json();
      g.merge_patch(j.at("galaxy"));
      c.galaxy = GalaxyConfig::from_json(g);
    }
    if (j.contains("mam")) c.mam = StageSettings::from_json(j.at("mam"), c.mam);
    if (j.contains("clone")) c.clone = StageSettings::from_json(j.at("clone"), c.clone);
    if (j.contains("toplevel")) c.toplevel = StageSettings::from_json(j.at("toplevel"), c.toplevel);
    c.string_threshold = j.value("string_threshold", c.string_threshold);
    c.import_threshold = j.value("import_threshold", c.import_threshold);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.hidden = j.value("hidden", c.hidden);
    c.workers = j.value("workers", c.workers);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pipeline config: ") + e.what());
  }
  if (c.string_threshold < 1 || c.import_threshold < 1)
    throw FormatError("pipeline config: thresholds must be at least 1");
  if (!(c.validation_fraction > 0 && c.validation_fraction < 1))
    throw FormatError("pipeline config: validation_fraction must be in (0, 1)");
  return c;
}

// ---------------------------------------------------------------------------
// Helpers

std::string metrics_csv(const TrainHistory& history) {
  std::ostringstream out;
  out << "epoch,train_loss,validation_loss,validation_accuracy\n";
  char line[160];
  for (const auto& e : history.epochs) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss,
                  e.validation_loss, e.validation_accuracy);
    out << line;
  }
  return out.str();
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const std::vector<int>& labels, double fraction, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::size_t> train, held;
  for (auto& [label, idx] : groups) {
    rng.shuffle(idx);
    auto take = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(idx.size()) + 0.5));
    if (take == 0 && idx.size() >= 2 && fraction > 0) take = 1;
    take = std::min(take, idx.size());
    held.insert(held.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(take), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());
  return {train, held};
}

std::string parameter_hash(const ParameterList& params) {
  return sha256_hex(encode_checkpoint(nlohmann::json::object(), params));
}

MamExample mask_block(const BasicBlock& block, Rng& rng) {
  if (block.instructions.empty()) throw std::invalid_argument("mask_block: empty block");
  MamExample ex;
  ex.block = block;
  ex.position = rng.index(block.instructions.size());
  ex.target = block.instructions[ex.position];
  ex.block.instructions[ex.position] = mask_instruction();
  return ex;
}

double mam_uniform_loss(const CodeVocabulary& vocabulary) {
  return std::log(static_cast<double>(vocabulary.opcodes.size())) +
         2.0 * std::log(static_cast<double>(vocabulary.operands.size()));
}

namespace {

struct Validation {
  double loss = 0;
  double accuracy = 0;
};

// Mini-batch Adam with per-epoch validation and early stopping. `batch_loss`
// returns the mean loss over the given training indices with a graph; the
// best-validation parameter values are restored at the end.
TrainHistory run_epochs(const StageSettings& settings, const ParameterList& params,
                        std::size_t train_size, Rng order_rng,
                        const std::function<Tensor(std::size_t, std::span<const std::size_t>)>& batch_loss,
                        const std::function<Validation()>& validate) {
  Adam optimizer(params, AdamConfig{.lr = settings.lr});
  EarlyStopping stopping(settings.patience);
  TrainHistory history;
  auto best = snapshot(params);
  std::vector<std::size_t> order(train_size);
  for (std::size_t i = 0; i < train_size; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < settings.max_epochs; ++epoch) {
    order_rng.shuffle(order);
    double total = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += settings.batch_size) {
      const std::size_t end = std::min(order.size(), begin + settings.batch_size);
      std::span<const std::size_t> batch(order.data() + begin, end - begin);
      optimizer.zero_grad();
      Tensor loss = batch_loss(epoch, batch);
      backward(loss);
      optimizer.step();
      total += loss.item() * static_cast<double>(batch.size());
    }
    const Validation v = validate();
    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = train_size ? total / static_cast<double>(train_size) : 0.0;
    m.validation_loss = v.loss;
    m.validation_accuracy = v.accuracy;
    history.epochs.push_back(m);
    if (stopping.update(v.loss)) best = snapshot(params);
    if (stopping.should_stop()) {
      history.stopped_early = true;
      break;
    }
  }
  restore(params, best);
  history.best_epoch = static_cast<std::size_t>(std::max(stopping.best_epoch(), 0));
  history.best_validation_loss = stopping.best();
  return history;
}

ParameterList concat_params(std::initializer_list<ParameterList> lists) {
  ParameterList out;
  for (const auto& l : lists) out.insert(out.end(), l.begin(), l.end());
  return out;
}

std::vector<int> executable_labels(const std::vector<SampleRecord>& samples) {
  std::vector<int> labels;
  labels.reserve(samples.size());
  for (const auto& s : samples) {
    if (!s.label) throw std::invalid_argument("sample '" + s.id + "' has no label");
    if (*s.label != 0 && *s.label != 1)
      throw std::invalid_argument("sample '" + s.id + "' label must be 0 or 1");
    labels.push_back(*s.label);
  }
  return labels;
}

template <class T>
std::vector<T> pick(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(PipelineConfig config, CodeVocabulary vocabulary)
    : model(config.galaxy, std::move(vocabulary), stream(config.seed, kModelSalt).next()),
      config_(std::move(config)) {}

void Pipeline::reconfigure(const PipelineConfig& config) {
  if (config.galaxy.to_json() != config_.galaxy.to_json())
    throw std::invalid_argument("reconfigure: the galaxy architecture of a trained run cannot change");
  if (config.seed != config_.seed)
    throw std::invalid_argument("reconfigure: the seed of a trained run cannot change");
  config_ = config;
}

bool Pipeline::has(Stage stage) const {
  return std::find(completed_.begin(), completed_.end(), stage) != completed_.end();
}

void Pipeline::require_before(Stage stage) const {
  for (Stage s : stage_order()) {
    if (s == stage) return;
    if (!has(s)) throw StageError(stage, s);
  }
}

std::string Pipeline::lower_level_hash() const {
  return parameter_hash(concat_params(
      {model.level_parameters("satellite_planet"), model.level_parameters("planet_star")}));
}

StageResult Pipeline::train_mam(const std::vector<TextBlock>& blocks) {
  require_before(Stage::mam);
  if (blocks.size() < 2) throw std::invalid_argument("train_mam: need at least two blocks");
  std::vector<BasicBlock> encoded;
  encoded.reserve(blocks.size());
  for (const auto& b : blocks) {
    if (b.empty()) throw std::invalid_argument("train_mam: empty block");
    encoded.push_back(model.vocabulary().encode(b));
  }
  auto [train_idx, val_idx] = stratified_split(std::vector<int>(blocks.size(), 0),
                                               config_.validation_fraction,
                                               stream(config_.seed, kMamSplit).next());
  std::vector<BasicBlock> train = pick(encoded, train_idx);
  std::vector<MamExample> validation;
  {
    Rng rng = stream(config_.seed, kMamValidation);
    for (std::size_t i : val_idx) validation.push_back(mask_block(encoded[i], rng));
  }

  auto evaluate = [&]() {
    NoGradGuard no_grad;
    double loss = 0, correct = 0;
    for (const auto& ex : validation) {
      const auto pred = model.mam_predict(ex.block, ex.position);
      loss += ops::cross_entropy(pred.logits.opcode, {ex.target.opcode}).item() +
              ops::cross_entropy(pred.logits.operand1, {ex.target.operand1}).item() +
              ops::cross_entropy(pred.logits.operand2, {ex.target.operand2}).item();
      const auto top = std::max_element(pred.opcode.begin(), pred.opcode.end()) - pred.opcode.begin();
      if (static_cast<std::size_t>(top) == ex.target.opcode) correct += 1;
    }
    const double n = static_cast<double>(validation.size());
    return Validation{loss / n, correct / n};
  };

  const Validation initial = evaluate();
  // Masks are redrawn every epoch from a stream keyed by the epoch.
  Rng mask_root = stream(config_.seed, kMamMasks);
  std::vector<MamExample> epoch_examples;
  std::size_t masked_epoch = SIZE_MAX;

  const ParameterList params =
      concat_params({model.level_parameters("satellite_planet"), model.level_parameters("mam_head")});
  TrainHistory history = run_epochs(
      config_.mam, params, train.size(), stream(config_.seed, kMamOrder),
      [&](std::size_t epoch, std::span<const std::size_t> batch) {
        if (epoch != masked_epoch) {
          Rng r = Rng(mask_root.next() ^ epoch);
          epoch_examples.clear();
          for (const auto& b : train) epoch_examples.push_back(mask_block(b, r));
          masked_epoch = epoch;
        }
        Tensor total;
        for (std::size_t i : batch) {
          const auto& ex = epoch_examples[i];
          const Tensor l = model.mam_loss(ex.block, ex.position, ex.target);
          total = total.defined() ? ops::add(total, l) : l;
        }
        return ops::scale(total, 1.0 / static_cast<double>(batch.size()));
      },
      evaluate);

  MamEvaluation final = evaluate_mam(pick(blocks, val_idx), stream(config_.seed, kMamValidation).next());
  completed_.push_back(Stage::mam);
  StageResult r;
  r.stage = Stage::mam;
  r.history = std::move(history);
  r.summary = {{"initial_validation_loss", initial.loss},
               {"uniform_loss", mam_uniform_loss(model.vocabulary())},
               {"validation_loss", final.loss},
               {"opcode_accuracy", final.opcode_accuracy},
               {"majority_accuracy", final.majority_accuracy},
               {"train_blocks", train.size()},
               {"validation_blocks", validation.size()}};
  return r;
}

MamEvaluation Pipeline::evaluate_mam(const std::vector<TextBlock>& blocks, std::uint64_t seed) const {
  if (blocks.empty()) throw std::invalid_argument("evaluate_mam: no blocks");
  Rng rng(seed);
  std::vector<MamExample> examples;
  std::vector<std::size_t> opcode_counts(model.vocabulary().opcodes.size(), 0);
  for (const auto& b : blocks) {
    examples.push_back(mask_block(model.vocabulary().encode(b), rng));
    ++opcode_counts.at(examples.back().target.opcode);
  }
  MamEvaluation e;
  e.majority_opcode = static_cast<std::size_t>(
      std::max_element(opcode_counts.begin(), opcode_counts.end()) - opcode_counts.begin());
  std::vector<double> loss(examples.size()), correct(examples.size());
  parallel_for(examples.size(), config_.workers, [&](std::size_t i) {
    NoGradGuard no_grad;
    const auto& ex = examples[i];
    const auto pred = model.mam_predict(ex.block, ex.position);
    loss[i] = ops::cross_entropy(pred.logits.opcode, {ex.target.opcode}).item() +
              ops::cross_entropy(pred.logits.operand1, {ex.target.operand1}).item() +
              ops::cross_entropy(pred.logits.operand2, {ex.target.operand2}).item();
    const auto top = std::max_element(pred.opcode.begin(), pred.opcode.end()) - pred.opcode.begin();
    correct[i] = static_cast<std::size_t>(top) == ex.target.opcode ? 1.0 : 0.0;
  });
  const double n = static_cast<double>(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    e.loss += loss[i] / n;
    e.opcode_accuracy += correct[i] / n;
  }
  e.majority_accuracy = static_cast<double>(opcode_counts[e.majority_opcode]) / n;
  return e;
}

StageResult Pipeline::train_clone(const std::vector<ClonePair>& pairs) {
  require_before(Stage::clone);
  if (pairs.size() < 2) throw std::invalid_argument("train_clone: need at least two pairs");
  std::vector<int> labels;
  std::size_t positives = 0;
  for (const auto& p : pairs) {
    if (p.label != 1 && p.label != -1) throw std::invalid_argument("train_clone: label must be +1 or -1");
    labels.push_back(p.label);
    positives += p.label == 1;
  }
  const double balance = static_cast<double>(positives) / static_cast<double>(pairs.size());
  if (std::abs(balance - 0.5) > 0.05)
    std::cerr << "warning: clone pairs are unbalanced (" << positives << " of " << pairs.size()
              << " are clones)\n";

  struct Encoded {
    AssemblyFunction a, b;
    double label;
  };
  std::vector<Encoded> encoded;
  for (const auto& p : pairs)
    encoded.push_back({model.vocabulary().encode(p.a), model.vocabulary().encode(p.b),
                       static_cast<double>(p.label)});
  auto [train_idx, val_idx] =
      stratified_split(labels, config_.validation_fraction, stream(config_.seed, kCloneSplit).next());
  const auto train = pick(encoded, train_idx);
  const auto held = pick(pairs, val_idx);

  const ParameterList params = concat_params(
      {model.level_parameters("satellite_planet"), model.level_parameters("planet_star")});
  TrainHistory history = run_epochs(
      config_.clone, params, train.size(), stream(config_.seed, kCloneOrder),
      [&](std::size_t, std::span<const std::size_t> batch) {
        Tensor total;
        for (std::size_t i : batch) {
          const Tensor l = model.clone_loss(train[i].a, train[i].b, train[i].label);
          total = total.defined() ? ops::add(total, l) : l;
        }
        return ops::scale(total, 1.0 / static_cast<double>(batch.size()));
      },
      [&] {
        const CloneEvaluation e = evaluate_clone(held);
        return Validation{e.loss, e.accuracy};
      });

  const CloneEvaluation final = evaluate_clone(held);
  completed_.push_back(Stage::clone);
  StageResult r;
  r.stage = Stage::clone;
  r.history = std::move(history);
  r.summary = {{"validation_loss", final.loss},
               {"validation_accuracy", final.accuracy},
               {"clone_fraction", balance},
               {"train_pairs", train.size()},
               {"validation_pairs", held.size()}};
  return r;
}

CloneEvaluation Pipeline::evaluate_clone(const std::vector<ClonePair>& pairs) const {
  if (pairs.empty()) throw std::invalid_argument("evaluate_clone: no pairs");
  std::vector<double> loss(pairs.size()), correct(pairs.size());
  parallel_for(pairs.size(), config_.workers, [&](std::size_t i) {
    NoGradGuard no_grad;
    const auto& p = pairs[i];
    const double cos =
        model.clone_score(model.vocabulary().encode(p.a), model.vocabulary().encode(p.b)).item();
    loss[i] = (cos - p.label) * (cos - p.label);
    correct[i] = (cos > 0) == (p.label == 1) ? 1.0 : 0.0;
  });
  CloneEvaluation e;
  const double n = static_cast<double>(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    e.loss += loss[i] / n;
    e.accuracy += correct[i] / n;
  }
  return e;
}

Pipeline::Inputs Pipeline::prepare(const SampleRecord& sample) const {
  Inputs in;
  if (mode != ToplevelMode::no_code && !sample.functions.empty())
    in.functions = model.function_vectors(model.vocabulary().encode(sample.functions));
  if (mode != ToplevelMode::code_only) {
    in.raw_statics = schema.static_features(sample);
    in.statics = standardizer.transform(in.raw_statics);
  }
  return in;
}

std::vector<Pipeline::Inputs> Pipeline::prepare_all(const std::vector<SampleRecord>& samples) const {
  std::vector<Inputs> out(samples.size());
  parallel_for(samples.size(), config_.workers, [&](std::size_t i) { out[i] = prepare(samples[i]); });
  return out;
}

Tensor Pipeline::input_row(const Inputs& in) const {
  Tensor code = in.functions.defined() ? model.encode_function_vectors(in.functions).v_code
                                       : Tensor::zeros({1, model.config().d_model});
  if (mode == ToplevelMode::code_only) return code;
  return ops::concat({code, Tensor::row(in.statics)}, 1);
}

StageResult Pipeline::train_toplevel(const std::vector<SampleRecord>& executables, ToplevelMode m) {
  const Stage stage = m == ToplevelMode::code_only ? Stage::toplevel_code_only : Stage::toplevel_full;
  require_before(stage);
  if (executables.size() < 2) throw std::invalid_argument("train_toplevel: need at least two samples");
  const std::vector<int> labels = executable_labels(executables);
  auto [train_idx, val_idx] =
      stratified_split(labels, config_.validation_fraction, stream(config_.seed, kTopSplit).next());
  const auto train_samples = pick(executables, train_idx);
  const auto val_samples = pick(executables, val_idx);

  mode = m;
  const std::size_t d = model.config().d_model;
  std::size_t width = d;
  if (m != ToplevelMode::code_only) {
    schema = FeatureSchema::fit(train_samples, config_.string_threshold, config_.import_threshold, d);
    std::vector<std::vector<double>> rows;
    for (const auto& s : train_samples) rows.push_back(schema.static_features(s));
    standardizer = Standardizer::fit(rows, Standardizer::static_log_mask(schema));
    width = schema.width();
  }
  Rng init = stream(config_.seed, kClassifierInit).fork(static_cast<std::uint64_t>(m));
  classifier = Iffnn(width, config_.hidden.empty() ? Iffnn::default_hidden(width) : config_.hidden, init);

  const std::string before = lower_level_hash();
  const auto train_inputs = prepare_all(train_samples);
  const auto val_inputs = prepare_all(val_samples);
  std::vector<double> train_labels, val_labels;
  for (std::size_t i : train_idx) train_labels.push_back(labels[i]);
  for (std::size_t i : val_idx) val_labels.push_back(labels[i]);

  ParameterList params = classifier.parameters();
  if (m != ToplevelMode::no_code) params = concat_params({model.level_parameters("star_galaxy"), params});

  auto loss_of = [&](const std::vector<Inputs>& inputs, const std::vector<double>& y,
                     std::span<const std::size_t> idx) {
    std::vector<Tensor> rows;
    std::vector<double> targets;
    for (std::size_t i : idx) {
      rows.push_back(input_row(inputs[i]));
      targets.push_back(y[i]);
    }
    return classifier.loss(ops::concat(rows, 0), targets);
  };
  auto validate = [&] {
    NoGradGuard no_grad;
    std::vector<Tensor> rows;
    for (const auto& in : val_inputs) rows.push_back(input_row(in));
    const Iffnn::Output out = classifier.forward(ops::concat(rows, 0));
    double correct = 0;
    for (std::size_t i = 0; i < val_labels.size(); ++i)
      correct += (out.logit.at(i, 0) > 0) == (val_labels[i] == 1.0);
    const double loss = ops::binary_cross_entropy_with_logits(out.logit, val_labels).item();
    return Validation{loss, correct / static_cast<double>(val_labels.size())};
  };

  TrainHistory history = run_epochs(
      config_.toplevel, params, train_inputs.size(), stream(config_.seed, kTopOrder),
      [&](std::size_t, std::span<const std::size_t> batch) {
        return loss_of(train_inputs, train_labels, batch);
      },
      validate);

  if (lower_level_hash() != before)
    throw std::logic_error("train_toplevel: lower levels changed during top-level training");
  const Validation final = validate();
  if (m != ToplevelMode::no_code) {
    completed_.erase(std::remove(completed_.begin(), completed_.end(), stage), completed_.end());
    completed_.push_back(stage);
  }
  StageResult r;
  r.stage = stage;
  r.mode = mode_name(m);
  r.history = std::move(history);
  r.summary = {{"validation_loss", final.loss},
               {"validation_accuracy", final.accuracy},
               {"input_width", width},
               {"lower_level_hash", before},
               {"train_samples", train_inputs.size()},
               {"validation_samples", val_inputs.size()}};
  return r;
}

DetectionEvaluation Pipeline::evaluate_detection(const std::vector<SampleRecord>& executables) const {
  if (!has(Stage::toplevel_code_only)) throw StageError(Stage::toplevel_full, Stage::toplevel_code_only);
  const std::vector<int> labels = executable_labels(executables);
  const auto inputs = prepare_all(executables);
  std::vector<double> logits(inputs.size());
  parallel_for(inputs.size(), config_.workers, [&](std::size_t i) {
    NoGradGuard no_grad;
    logits[i] = classifier.forward(input_row(inputs[i])).logit.item();
  });
  DetectionEvaluation e;
  e.samples = inputs.size();
  if (inputs.empty()) return e;
  std::vector<double> y(labels.begin(), labels.end());
  {
    NoGradGuard no_grad;
    e.loss = ops::binary_cross_entropy_with_logits(Tensor::from_data({logits.size(), 1}, logits), y).item();
  }
  double correct = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) correct += (logits[i] > 0) == (labels[i] == 1);
  e.accuracy = correct / static_cast<double>(logits.size());
  return e;
}

SegmentedFeatureVector Pipeline::features(const SampleRecord& sample) const {
  NoGradGuard no_grad;
  const Inputs in = prepare(sample);
  const Tensor v_code = model.encode_function_vectors(in.functions).v_code;
  if (mode == ToplevelMode::code_only) return assemble_feature_vector(v_code.data(), {}, {}, {});
  return schema.assemble(v_code.data(), in.statics);
}

AttributionReport Pipeline::detect(const SampleRecord& sample, std::size_t top_k) const {
  if (!has(Stage::toplevel_full)) throw StageError(Stage::toplevel_full, Stage::toplevel_full);
  if (mode != ToplevelMode::full)
    throw std::logic_error("detect: the classifier was last trained in " + std::string(mode_name(mode)) +
                           " mode");
  NoGradGuard no_grad;
  const Inputs in = prepare(sample);
  const ExecutableEncoding enc = model.encode_function_vectors(in.functions);
  const SegmentedFeatureVector fv = schema.assemble(enc.v_code.data(), in.statics);
  std::vector<double> raw(enc.v_code.data().begin(), enc.v_code.data().end());
  raw.insert(raw.end(), in.raw_statics.begin(), in.raw_statics.end());
  AttributionInput input;
  input.file = sample.id;
  input.features = &fv;
  input.raw_values = std::move(raw);
  input.relay_weights = enc.relay_weights;
  input.function_names = sample.function_names;
  input.top_k = top_k;
  return attribute(classifier, input);
}

// ---------------------------------------------------------------------------
// Persistence

nlohmann::json Pipeline::checkpoint_config() const {
  nlohmann::json stages = nlohmann::json::array();
  for (Stage s : completed_) stages.push_back(stage_name(s));
  nlohmann::json j = {{"format", "imad-pipeline"},
                      {"pipeline", config_.to_json()},
                      {"stages", stages},
                      {"galaxy", model.metadata()}};
  if (has(Stage::toplevel_code_only)) {
    j["mode"] = mode_name(mode);
    j["iffnn"] = classifier.metadata();
    if (mode != ToplevelMode::code_only) {
      j["schema"] = schema.to_json();
      j["standardizer"] = standardizer.to_json();
    }
  }
  return j;
}

void Pipeline::save(const std::filesystem::path& path) const {
  ParameterList params = model.parameters();
  if (has(Stage::toplevel_code_only)) classifier.collect("iffnn", params);
  save_checkpoint(path, checkpoint_config(), params);
}

Pipeline Pipeline::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = load_checkpoint(path);
  const nlohmann::json& j = ckpt.config;
  if (j.value("format", "") != "imad-pipeline")
    throw CheckpointError(path.string() + ": not a pipeline checkpoint");
  Pipeline p;
  try {
    p.config_ = PipelineConfig::from_json(j.at("pipeline"));
    p.model = GalaxyModel::from_metadata(j.at("galaxy"));
    for (const auto& s : j.at("stages")) p.completed_.push_back(parse_stage(s.get<std::string>()));
    ParameterList params = p.model.parameters();
    if (p.has(Stage::toplevel_code_only)) {
      p.mode = parse_mode(j.at("mode").get<std::string>());
      p.classifier = Iffnn::from_metadata(j.at("iffnn"));
      p.classifier.collect("iffnn", params);
      if (p.mode != ToplevelMode::code_only) {
        p.schema = FeatureSchema::from_json(j.at("schema"));
        p.standardizer = Standardizer::from_json(j.at("standardizer"));
        if (p.classifier.input_width() != p.schema.width() ||
            p.standardizer.width() != p.schema.static_width())
          throw CheckpointError(path.string() + ": classifier, schema and standardizer widths disagree");
      }
    }
    ckpt.load_into(params);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
  return p;
}

}  // namespace imad
