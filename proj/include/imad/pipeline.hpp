// SPDX-License-Identifier: Apache-2.0
//
// Staged training of the detector and the trained-model facade used for
// detection. Stages run in a fixed order:
//
//   mam -> clone -> toplevel_code_only -> toplevel_full
//
// The mam stage trains the instruction level with its prediction head, the
// clone stage fine-tunes it together with the function level, and the two
// top-level stages train the executable level and the classifier with the
// lower levels frozen.

#pragma once

#include "imad/corpus.hpp"
#include "imad/features.hpp"
#include "imad/galaxy.hpp"
#include "imad/iffnn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace imad {

enum class Stage { mam, clone, toplevel_code_only, toplevel_full };

const char* stage_name(Stage stage);
/// Accepts the names above and the dashed forms ("toplevel-full").
Stage parse_stage(const std::string& name);
const std::vector<Stage>& stage_order();

/// Raised when a stage runs before its prerequisite.
class StageError : public std::runtime_error {
 public:
  StageError(Stage attempted, Stage required);
  Stage attempted() const { return attempted_; }
  Stage required() const { return required_; }

 private:
  Stage attempted_;
  Stage required_;
};

enum class ToplevelMode {
  code_only,  // classifier input is v_code
  full,       // [v_code, str, num, imp]
  no_code,    // full layout with v_code held at zero; an ablation
};

const char* mode_name(ToplevelMode mode);

struct StageSettings {
  double lr = 1e-4;
  std::size_t max_epochs = 50;
  std::size_t batch_size = 32;
  int patience = 5;

  nlohmann::json to_json() const;
  /// Keys missing from `j` keep the values of `base`.
  static StageSettings from_json(const nlohmann::json& j, const StageSettings& base);
  static StageSettings from_json(const nlohmann::json& j) { return from_json(j, StageSettings()); }
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  GalaxyConfig galaxy;
  StageSettings mam;
  StageSettings clone;
  StageSettings toplevel;
  std::size_t string_threshold = 1000;
  std::size_t import_threshold = 1000;
  double validation_fraction = 0.1;
  /// Classifier hidden widths; empty selects Iffnn::default_hidden.
  std::vector<std::size_t> hidden;
  std::size_t workers = 1;  // feature caching only; results do not depend on it

  nlohmann::json to_json() const;
  /// Keys missing from `j` keep the values of `base`; unknown keys throw.
  static PipelineConfig from_json(const nlohmann::json& j, const PipelineConfig& base);
  static PipelineConfig from_json(const nlohmann::json& j) { return from_json(j, PipelineConfig()); }
};

struct StageResult {
  Stage stage = Stage::mam;
  std::string mode;  // top-level stages only
  TrainHistory history;
  nlohmann::json summary;  // stage-specific final numbers
};

/// Per-epoch CSV: epoch,train_loss,validation_loss,validation_accuracy.
std::string metrics_csv(const TrainHistory& history);

/// Deterministic split: `fraction` of the indices of each label go to the
/// second list. Labels are compared exactly.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    const std::vector<int>& labels, double fraction, std::uint64_t seed);

/// SHA-256 of the serialized values of `params`.
std::string parameter_hash(const ParameterList& params);

/// A masked training example: `block` holds the mask triple at `position`.
struct MamExample {
  BasicBlock block;
  std::size_t position = 0;
  Instruction target;
};
MamExample mask_block(const BasicBlock& block, Rng& rng);

/// Cross-entropy of a uniform guess over the three output vocabularies.
double mam_uniform_loss(const CodeVocabulary& vocabulary);

struct MamEvaluation {
  double loss = 0;
  double opcode_accuracy = 0;
  double majority_accuracy = 0;  // always predicting `majority_opcode`
  std::size_t majority_opcode = kUnkId;
};

struct CloneEvaluation {
  double loss = 0;
  double accuracy = 0;  // clone iff cosine > 0
};

struct DetectionEvaluation {
  double loss = 0;
  double accuracy = 0;
  std::size_t samples = 0;
};

class Pipeline {
 public:
  /// Fresh models; every random choice flows from `config.seed`.
  Pipeline(PipelineConfig config, CodeVocabulary vocabulary);

  const PipelineConfig& config() const { return config_; }
  /// Replaces the training settings of a loaded run. The architecture and the
  /// seed are fixed once the model exists; changing them throws.
  void reconfigure(const PipelineConfig& config);
  const std::vector<Stage>& completed() const { return completed_; }
  bool has(Stage stage) const;
  /// Throws StageError unless every stage before `stage` has completed.
  void require_before(Stage stage) const;

  StageResult train_mam(const std::vector<TextBlock>& blocks);
  StageResult train_clone(const std::vector<ClonePair>& pairs);
  /// code_only fits a classifier on v_code. full and no_code fit the static
  /// schema and standardizer on the training split and re-instantiate the
  /// classifier; full also records the toplevel_full stage.
  StageResult train_toplevel(const std::vector<SampleRecord>& executables, ToplevelMode mode);

  /// Masks are drawn from `seed`, one per block.
  MamEvaluation evaluate_mam(const std::vector<TextBlock>& blocks, std::uint64_t seed) const;
  CloneEvaluation evaluate_clone(const std::vector<ClonePair>& pairs) const;
  /// Uses the classifier of the most recent top-level stage and its mode.
  DetectionEvaluation evaluate_detection(const std::vector<SampleRecord>& executables) const;

  /// Requires toplevel_full.
  AttributionReport detect(const SampleRecord& sample, std::size_t top_k = 5) const;
  /// Model inputs of one sample in the current mode, with names and segments.
  SegmentedFeatureVector features(const SampleRecord& sample) const;

  /// Hash of satellite_planet and planet_star.
  std::string lower_level_hash() const;

  void save(const std::filesystem::path& path) const;
  static Pipeline load(const std::filesystem::path& path);
  nlohmann::json checkpoint_config() const;

  GalaxyModel model;
  Iffnn classifier;
  ToplevelMode mode = ToplevelMode::code_only;
  FeatureSchema schema;        // full and no_code modes
  Standardizer standardizer;   // over the static values

 private:
  Pipeline() = default;

  struct Inputs {
    Tensor functions;  // m x d, undefined when the sample has no code
    std::vector<double> statics;  // standardized, empty in code_only mode
    std::vector<double> raw_statics;
  };
  Inputs prepare(const SampleRecord& sample) const;
  std::vector<Inputs> prepare_all(const std::vector<SampleRecord>& samples) const;
  /// Classifier input row of one sample; graph-connected to star_galaxy.
  Tensor input_row(const Inputs& in) const;

  PipelineConfig config_;
  std::vector<Stage> completed_;
};

}  // namespace imad
