// SPDX-License-Identifier: Apache-2.0
//
// The three-level hierarchy over assembly code. Instructions are embedded
// and encoded into basic-block vectors (satellite-planet level), block
// vectors into function vectors (planet-star level) and function vectors
// into one executable vector (star-galaxy level). Each level is a stack of
// Star-Plus layers and represents its sequence by the top relay state.

#pragma once

#include "imad/attention.hpp"
#include "imad/jsonl.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace imad {

inline constexpr std::size_t kPadId = 0;
inline constexpr std::size_t kEmptyId = 1;
inline constexpr std::size_t kMaskId = 2;
inline constexpr std::size_t kUnkId = 3;
inline constexpr std::size_t kReservedTokens = 4;

/// Token <-> id map with the four reserved ids above.
class TokenVocabulary {
 public:
  TokenVocabulary();

  /// Adds a token if missing and returns its id.
  std::size_t add(const std::string& token);
  /// Id of `token`; unknown tokens map to the UNK id, or throw when
  /// `allow_unknown` is false.
  std::size_t id(const std::string& token, bool allow_unknown = true) const;
  bool contains(const std::string& token) const { return index_.contains(token); }
  const std::string& token(std::size_t id) const;
  std::size_t size() const { return tokens_.size(); }

  nlohmann::json to_json() const;
  static TokenVocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Instruction {
  std::size_t opcode = kPadId;
  std::size_t operand1 = kEmptyId;
  std::size_t operand2 = kEmptyId;

  bool operator==(const Instruction&) const = default;
};

struct BasicBlock {
  std::vector<Instruction> instructions;
};

struct AssemblyFunction {
  std::vector<BasicBlock> blocks;
};

struct ExecutableCode {
  std::vector<AssemblyFunction> functions;
};

/// Mask triple [MASK_OPC, EMPTY, EMPTY].
inline Instruction mask_instruction() { return {kMaskId, kEmptyId, kEmptyId}; }

// ---------------------------------------------------------------------------
// Textual corpus records

/// Opcode followed by operands. Missing operands become EMPTY and operands
/// beyond the second are ignored when encoded.
using TextInstruction = std::vector<std::string>;
using TextBlock = std::vector<TextInstruction>;
using TextFunction = std::vector<TextBlock>;

struct AssemblyRecord {
  std::string id;
  std::optional<int> label;
  std::vector<TextFunction> functions;
};

void to_json(nlohmann::json& j, const AssemblyRecord& r);
void from_json(const nlohmann::json& j, AssemblyRecord& r);

std::vector<AssemblyRecord> read_assembly_corpus(const std::filesystem::path& path);
void write_assembly_corpus(const std::filesystem::path& path,
                           const std::vector<AssemblyRecord>& records);

struct CodeVocabulary {
  TokenVocabulary opcodes;
  TokenVocabulary operands;

  /// Every opcode and operand seen in `functions`, ordered by descending
  /// count and then lexicographically.
  static CodeVocabulary build(const std::vector<TextFunction>& functions);

  Instruction encode(const TextInstruction& ins) const;
  BasicBlock encode(const TextBlock& block) const;
  AssemblyFunction encode(const TextFunction& function) const;
  ExecutableCode encode(const std::vector<TextFunction>& functions) const;
  TextInstruction decode(const Instruction& ins) const;

  nlohmann::json to_json() const;
  static CodeVocabulary from_json(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static CodeVocabulary load(const std::filesystem::path& path);
};

// ---------------------------------------------------------------------------
// Model

struct GalaxyConfig {
  std::size_t d_model = 96;
  std::size_t heads = 4;
  std::size_t d_ff = 384;
  std::size_t block_layers = 2;
  std::size_t function_layers = 2;
  std::size_t executable_layers = 2;
  std::size_t max_block_length = 250;
  PadMode pad = PadMode::zero;
  bool scale_by_d_model = true;

  void validate() const;
  StarConfig level(std::size_t layers) const;
  nlohmann::json to_json() const;
  static GalaxyConfig from_json(const nlohmann::json& j);
};

/// Instruction-level encoder with the tripartite embedding
/// e = [SE(opcode); SE(operand1); SE(operand2)] + PE(position).
class SatellitePlanet {
 public:
  SatellitePlanet() = default;
  SatellitePlanet(const GalaxyConfig& config, std::size_t opcodes, std::size_t operands, Rng& rng);

  std::vector<double> embed_instruction(const Instruction& ins, std::size_t position) const;
  Tensor embed(const BasicBlock& block) const;
  EncoderOutput encode(const BasicBlock& block) const;
  void collect(std::string_view prefix, ParameterList& out) const;

  Tensor opcode_embedding;   // |V_opc| x d/3
  Tensor operand_embedding;  // |V_opd| x d/3, shared by both operand slots
  StarPlusEncoder encoder;

 private:
  std::size_t d_model_ = 0;
  std::size_t max_length_ = 0;
};

/// Vector-sequence encoder used by the function and executable levels.
class VectorStar {
 public:
  VectorStar() = default;
  VectorStar(const StarConfig& config, Rng& rng) : encoder(config, rng) {}

  /// Adds positional encodings to the rows and runs the stack.
  EncoderOutput encode(const Tensor& vectors) const;
  void collect(std::string_view prefix, ParameterList& out) const {
    encoder.collect(prefix, out);
  }

  StarPlusEncoder encoder;
};

/// Three classifiers over [s^T; H^T[mask]] for opcode, operand1, operand2.
struct MamHead {
  MamHead() = default;
  MamHead(std::size_t d_model, std::size_t opcodes, std::size_t operands, Rng& rng);

  struct Logits {
    Tensor opcode, operand1, operand2;  // each 1 x |V|
  };
  Logits operator()(const Tensor& features) const;
  void collect(std::string_view prefix, ParameterList& out) const;

  Linear opcode_hidden, opcode_out;
  Linear operand1_hidden, operand1_out;
  Linear operand2_hidden, operand2_out;
};

struct MamPrediction {
  std::vector<double> opcode, operand1, operand2;  // probability distributions
  MamHead::Logits logits;
};

struct ExecutableEncoding {
  Tensor v_code;                          // 1 x d_model
  std::vector<double> function_weights;   // relay weights summed over heads
  Tensor relay_weights;                   // functions x heads, top layer
  bool empty = false;                     // no functions: v_code is zero
};

class GalaxyModel {
 public:
  GalaxyModel() = default;
  GalaxyModel(const GalaxyConfig& config, CodeVocabulary vocabulary, std::uint64_t seed);

  const GalaxyConfig& config() const { return config_; }
  const CodeVocabulary& vocabulary() const { return vocabulary_; }

  EncoderOutput encode_block(const BasicBlock& block) const;
  /// The block must hold the mask triple at `mask_position`.
  MamPrediction mam_predict(const BasicBlock& masked, std::size_t mask_position) const;
  /// Sum of the three cross-entropies against `target`.
  Tensor mam_loss(const BasicBlock& masked, std::size_t mask_position,
                  const Instruction& target) const;

  Tensor encode_function(const AssemblyFunction& function) const;
  /// Cosine of the two function vectors (0 when either vector is zero).
  Tensor clone_score(const AssemblyFunction& a, const AssemblyFunction& b) const;
  /// (cos - label)^2 with label +1 for clones and -1 otherwise.
  Tensor clone_loss(const AssemblyFunction& a, const AssemblyFunction& b, double label) const;

  /// Function vectors stacked as rows, computed without a graph.
  Tensor function_vectors(const ExecutableCode& code) const;
  ExecutableEncoding encode_executable(const ExecutableCode& code) const;
  /// Top level only, from precomputed function vectors (m x d, m >= 1).
  ExecutableEncoding encode_function_vectors(const Tensor& vectors) const;

  void collect(ParameterList& out) const;
  ParameterList parameters() const;
  ParameterList level_parameters(std::string_view level) const;

  nlohmann::json metadata() const;
  static GalaxyModel from_metadata(const nlohmann::json& j);

  SatellitePlanet satellite_planet;
  VectorStar planet_star;
  VectorStar star_galaxy;
  MamHead mam_head;

 private:
  GalaxyConfig config_;
  CodeVocabulary vocabulary_;
};

}  // namespace imad
