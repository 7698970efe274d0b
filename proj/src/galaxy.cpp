// SPDX-License-Identifier: Apache-2.0

#include "imad/galaxy.hpp"

#include "imad/checkpoint.hpp"
#include "imad/jsonl.hpp"

#include <algorithm>
#include <map>

namespace imad {

namespace {

const char* const kReservedNames[kReservedTokens] = {"<PAD>", "<EMPTY>", "<MASK_OPC>", "<UNK>"};

std::vector<std::size_t> column_ids(const BasicBlock& block, std::size_t Instruction::*field) {
  std::vector<std::size_t> ids;
  ids.reserve(block.instructions.size());
  for (const auto& ins : block.instructions) ids.push_back(ins.*field);
  return ids;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vocabularies

TokenVocabulary::TokenVocabulary() {
  for (const char* name : kReservedNames) add(name);
}

std::size_t TokenVocabulary::add(const std::string& token) {
  auto [it, inserted] = index_.try_emplace(token, tokens_.size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::size_t TokenVocabulary::id(const std::string& token, bool allow_unknown) const {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  if (!allow_unknown) throw std::out_of_range("unknown token '" + token + "'");
  return kUnkId;
}

const std::string& TokenVocabulary::token(std::size_t id) const {
  if (id >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  return tokens_[id];
}

nlohmann::json TokenVocabulary::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) j[tokens_[i]] = i;
  return j;
}

TokenVocabulary TokenVocabulary::from_json(const nlohmann::json& j) {
  std::vector<std::string> tokens(j.size());
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto id = it.value().get<std::size_t>();
    if (id >= tokens.size() || !tokens[id].empty())
      throw FormatError("vocabulary ids are not a permutation of 0.." +
                        std::to_string(tokens.size() - 1));
    tokens[id] = it.key();
  }
  for (std::size_t i = 0; i < kReservedTokens; ++i)
    if (tokens.size() <= i || tokens[i] != kReservedNames[i])
      throw FormatError(std::string("vocabulary must reserve id ") + std::to_string(i) +
                        " for " + kReservedNames[i]);
  TokenVocabulary v;
  for (std::size_t i = kReservedTokens; i < tokens.size(); ++i) v.add(tokens[i]);
  return v;
}

CodeVocabulary CodeVocabulary::build(const std::vector<TextFunction>& functions) {
  std::map<std::string, std::size_t> opcodes, operands;
  for (const auto& f : functions)
    for (const auto& b : f)
      for (const auto& ins : b) {
        if (ins.empty()) continue;
        ++opcodes[ins[0]];
        for (std::size_t k = 1; k < std::min<std::size_t>(ins.size(), 3); ++k) ++operands[ins[k]];
      }
  auto ordered = [](const std::map<std::string, std::size_t>& counts) {
    std::vector<std::pair<std::string, std::size_t>> v(counts.begin(), counts.end());
    std::stable_sort(v.begin(), v.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    TokenVocabulary vocab;
    for (const auto& [token, count] : v) vocab.add(token);
    return vocab;
  };
  return {ordered(opcodes), ordered(operands)};
}

Instruction CodeVocabulary::encode(const TextInstruction& ins) const {
  if (ins.empty()) throw FormatError("instruction without an opcode");
  Instruction out{opcodes.id(ins[0]), kEmptyId, kEmptyId};
  if (ins.size() > 1) out.operand1 = operands.id(ins[1]);
  if (ins.size() > 2) out.operand2 = operands.id(ins[2]);
  return out;
}

BasicBlock CodeVocabulary::encode(const TextBlock& block) const {
  BasicBlock out;
  out.instructions.reserve(block.size());
  for (const auto& ins : block) out.instructions.push_back(encode(ins));
  return out;
}

AssemblyFunction CodeVocabulary::encode(const TextFunction& function) const {
  AssemblyFunction out;
  out.blocks.reserve(function.size());
  for (const auto& b : function) out.blocks.push_back(encode(b));
  return out;
}

ExecutableCode CodeVocabulary::encode(const std::vector<TextFunction>& functions) const {
  ExecutableCode out;
  out.functions.reserve(functions.size());
  for (const auto& f : functions) out.functions.push_back(encode(f));
  return out;
}

TextInstruction CodeVocabulary::decode(const Instruction& ins) const {
  TextInstruction out{opcodes.token(ins.opcode)};
  if (ins.operand1 != kEmptyId) out.push_back(operands.token(ins.operand1));
  if (ins.operand2 != kEmptyId) out.push_back(operands.token(ins.operand2));
  return out;
}

nlohmann::json CodeVocabulary::to_json() const {
  return {{"opcodes", opcodes.to_json()}, {"operands", operands.to_json()}};
}

CodeVocabulary CodeVocabulary::from_json(const nlohmann::json& j) {
  return {TokenVocabulary::from_json(j.at("opcodes")),
          TokenVocabulary::from_json(j.at("operands"))};
}

void CodeVocabulary::save(const std::filesystem::path& path) const { write_json(path, to_json()); }

CodeVocabulary CodeVocabulary::load(const std::filesystem::path& path) {
  return from_json(read_json(path));
}

// ---------------------------------------------------------------------------
// Corpus records

void to_json(nlohmann::json& j, const AssemblyRecord& r) {
  j = {{"id", r.id}, {"functions", r.functions}};
  if (r.label) j["label"] = *r.label;
}

void from_json(const nlohmann::json& j, AssemblyRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.label.reset();
  if (j.contains("label") && !j["label"].is_null()) r.label = j["label"].get<int>();
  r.functions = j.at("functions").get<std::vector<TextFunction>>();
}

std::vector<AssemblyRecord> read_assembly_corpus(const std::filesystem::path& path) {
  std::vector<AssemblyRecord> out;
  for (const auto& j : read_jsonl(path)) out.push_back(j.get<AssemblyRecord>());
  return out;
}

void write_assembly_corpus(const std::filesystem::path& path,
                           const std::vector<AssemblyRecord>& records) {
  std::vector<nlohmann::json> lines(records.begin(), records.end());
  write_jsonl(path, lines);
}

// ---------------------------------------------------------------------------
// Configuration

void GalaxyConfig::validate() const {
  if (d_model == 0 || d_model % 3 != 0)
    throw std::invalid_argument("galaxy config: d_model " + std::to_string(d_model) +
                                " must be a positive multiple of 3");
  level(1).validate();
  if (block_layers == 0 || function_layers == 0 || executable_layers == 0)
    throw std::invalid_argument("galaxy config: every level needs at least one layer");
  if (max_block_length == 0) throw std::invalid_argument("galaxy config: max_block_length is 0");
}

StarConfig GalaxyConfig::level(std::size_t layers) const {
  return {d_model, heads, d_ff, layers, pad, scale_by_d_model};
}

nlohmann::json GalaxyConfig::to_json() const {
  return {{"d_model", d_model},
          {"heads", heads},
          {"d_ff", d_ff},
          {"block_layers", block_layers},
          {"function_layers", function_layers},
          {"executable_layers", executable_layers},
          {"max_block_length", max_block_length},
          {"pad", pad == PadMode::zero ? "zero" : "ring"},
          {"scale", scale_by_d_model ? "d_model" : "d_k"}};
}

GalaxyConfig GalaxyConfig::from_json(const nlohmann::json& j) {
  GalaxyConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.heads = j.value("heads", c.heads);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.block_layers = j.value("block_layers", c.block_layers);
  c.function_layers = j.value("function_layers", c.function_layers);
  c.executable_layers = j.value("executable_layers", c.executable_layers);
  c.max_block_length = j.value("max_block_length", c.max_block_length);
  const std::string pad = j.value("pad", "zero");
  if (pad != "zero" && pad != "ring") throw std::invalid_argument("galaxy config: pad " + pad);
  c.pad = pad == "zero" ? PadMode::zero : PadMode::ring;
  const std::string scale = j.value("scale", "d_model");
  if (scale != "d_model" && scale != "d_k")
    throw std::invalid_argument("galaxy config: scale " + scale);
  c.scale_by_d_model = scale == "d_model";
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Levels

SatellitePlanet::SatellitePlanet(const GalaxyConfig& config, std::size_t opcodes,
                                 std::size_t operands, Rng& rng)
    : opcode_embedding(xavier_uniform(opcodes, config.d_model / 3, rng)),
      operand_embedding(xavier_uniform(operands, config.d_model / 3, rng)),
      encoder(config.level(config.block_layers), rng),
      d_model_(config.d_model),
      max_length_(config.max_block_length) {}

std::vector<double> SatellitePlanet::embed_instruction(const Instruction& ins,
                                                       std::size_t position) const {
  const Tensor e = ops::embedding_lookup(opcode_embedding, {ins.opcode});
  const Tensor o1 = ops::embedding_lookup(operand_embedding, {ins.operand1});
  const Tensor o2 = ops::embedding_lookup(operand_embedding, {ins.operand2});
  std::vector<double> out = positional_encoding(position, d_model_);
  const std::size_t w = d_model_ / 3;
  for (std::size_t j = 0; j < w; ++j) {
    out[j] += e.data()[j];
    out[w + j] += o1.data()[j];
    out[2 * w + j] += o2.data()[j];
  }
  return out;
}

Tensor SatellitePlanet::embed(const BasicBlock& block) const {
  const std::size_t n = block.instructions.size();
  if (n == 0) throw std::invalid_argument("encode_block: empty basic block");
  if (n > max_length_)
    throw std::invalid_argument("encode_block: block of " + std::to_string(n) +
                                " instructions exceeds the limit of " +
                                std::to_string(max_length_));
  const Tensor tokens =
      ops::concat({ops::embedding_lookup(opcode_embedding, column_ids(block, &Instruction::opcode)),
                   ops::embedding_lookup(operand_embedding, column_ids(block, &Instruction::operand1)),
                   ops::embedding_lookup(operand_embedding, column_ids(block, &Instruction::operand2))},
                  1);
  return ops::add(tokens, positional_encodings(n, d_model_));
}

EncoderOutput SatellitePlanet::encode(const BasicBlock& block) const {
  return encoder.run(embed(block));
}

void SatellitePlanet::collect(std::string_view prefix, ParameterList& out) const {
  out.push_back({join_name(prefix, "opcode_embedding"), opcode_embedding});
  out.push_back({join_name(prefix, "operand_embedding"), operand_embedding});
  encoder.collect(join_name(prefix, "encoder"), out);
}

EncoderOutput VectorStar::encode(const Tensor& vectors) const {
  if (!vectors.defined() || vectors.size() == 0)
    throw std::invalid_argument("vector star: empty sequence");
  return encoder.run(ops::add(vectors, positional_encodings(vectors.rows(), vectors.cols())));
}

namespace {

// Output layers start near zero so the untrained head predicts close to
// uniform while still passing gradient to everything below it.
Linear small_output(std::size_t in, std::size_t out, Rng& rng) {
  Linear l(in, out, rng);
  for (double& w : l.weight.mutable_data()) w *= 0.1;
  return l;
}

}  // namespace

MamHead::MamHead(std::size_t d_model, std::size_t opcodes, std::size_t operands, Rng& rng)
    : opcode_hidden(2 * d_model, d_model, rng),
      opcode_out(small_output(d_model, opcodes, rng)),
      operand1_hidden(2 * d_model, d_model, rng),
      operand1_out(small_output(d_model, operands, rng)),
      operand2_hidden(2 * d_model, d_model, rng),
      operand2_out(small_output(d_model, operands, rng)) {}

MamHead::Logits MamHead::operator()(const Tensor& features) const {
  return {opcode_out(ops::relu(opcode_hidden(features))),
          operand1_out(ops::relu(operand1_hidden(features))),
          operand2_out(ops::relu(operand2_hidden(features)))};
}

void MamHead::collect(std::string_view prefix, ParameterList& out) const {
  opcode_hidden.collect(join_name(prefix, "opcode_hidden"), out);
  opcode_out.collect(join_name(prefix, "opcode_out"), out);
  operand1_hidden.collect(join_name(prefix, "operand1_hidden"), out);
  operand1_out.collect(join_name(prefix, "operand1_out"), out);
  operand2_hidden.collect(join_name(prefix, "operand2_hidden"), out);
  operand2_out.collect(join_name(prefix, "operand2_out"), out);
}

// ---------------------------------------------------------------------------
// GalaxyModel

GalaxyModel::GalaxyModel(const GalaxyConfig& config, CodeVocabulary vocabulary,
                         std::uint64_t seed)
    : config_(config), vocabulary_(std::move(vocabulary)) {
  config_.validate();
  Rng root(seed);
  Rng r1 = root.fork(1), r2 = root.fork(2), r3 = root.fork(3), r4 = root.fork(4);
  satellite_planet = SatellitePlanet(config_, vocabulary_.opcodes.size(),
                                     vocabulary_.operands.size(), r1);
  planet_star = VectorStar(config_.level(config_.function_layers), r2);
  star_galaxy = VectorStar(config_.level(config_.executable_layers), r3);
  mam_head = MamHead(config_.d_model, vocabulary_.opcodes.size(), vocabulary_.operands.size(), r4);
}

EncoderOutput GalaxyModel::encode_block(const BasicBlock& block) const {
  return satellite_planet.encode(block);
}

namespace {

std::vector<double> probabilities(const Tensor& logits) {
  const Tensor p = ops::softmax(logits, 1);
  return {p.data().begin(), p.data().end()};
}

}  // namespace

MamPrediction GalaxyModel::mam_predict(const BasicBlock& masked,
                                       std::size_t mask_position) const {
  if (mask_position >= masked.instructions.size())
    throw std::out_of_range("mam_predict: mask position " + std::to_string(mask_position) +
                            " outside block of " +
                            std::to_string(masked.instructions.size()));
  if (masked.instructions[mask_position] != mask_instruction())
    throw std::invalid_argument("mam_predict: no mask token at position " +
                                std::to_string(mask_position));
  const EncoderOutput enc = encode_block(masked);
  const Tensor features =
      ops::concat({enc.relay, ops::slice(enc.hidden, 0, mask_position, 1)}, 1);
  MamPrediction out;
  out.logits = mam_head(features);
  {
    NoGradGuard no_grad;
    out.opcode = probabilities(out.logits.opcode);
    out.operand1 = probabilities(out.logits.operand1);
    out.operand2 = probabilities(out.logits.operand2);
  }
  return out;
}

Tensor GalaxyModel::mam_loss(const BasicBlock& masked, std::size_t mask_position,
                             const Instruction& target) const {
  const auto logits = mam_predict(masked, mask_position).logits;
  return ops::add(ops::add(ops::cross_entropy(logits.opcode, {target.opcode}),
                           ops::cross_entropy(logits.operand1, {target.operand1})),
                  ops::cross_entropy(logits.operand2, {target.operand2}));
}

Tensor GalaxyModel::encode_function(const AssemblyFunction& function) const {
  if (function.blocks.empty()) throw std::invalid_argument("encode_function: empty function");
  std::vector<Tensor> blocks;
  blocks.reserve(function.blocks.size());
  for (const auto& b : function.blocks) blocks.push_back(encode_block(b).relay);
  return planet_star.encode(ops::concat(blocks, 0)).relay;
}

Tensor GalaxyModel::clone_score(const AssemblyFunction& a, const AssemblyFunction& b) const {
  return ops::cosine_similarity(encode_function(a), encode_function(b));
}

Tensor GalaxyModel::clone_loss(const AssemblyFunction& a, const AssemblyFunction& b,
                               double label) const {
  return ops::mse(clone_score(a, b), Tensor::scalar(label));
}

Tensor GalaxyModel::function_vectors(const ExecutableCode& code) const {
  NoGradGuard no_grad;
  if (code.functions.empty()) throw std::invalid_argument("function_vectors: no functions");
  std::vector<Tensor> rows;
  rows.reserve(code.functions.size());
  for (const auto& f : code.functions) rows.push_back(encode_function(f));
  return ops::concat(rows, 0);
}

ExecutableEncoding GalaxyModel::encode_function_vectors(const Tensor& vectors) const {
  ExecutableEncoding out;
  if (!vectors.defined() || vectors.size() == 0) {
    out.v_code = Tensor::zeros({1, config_.d_model});
    out.empty = true;
    return out;
  }
  EncoderOutput enc = star_galaxy.encode(vectors);
  out.v_code = enc.relay;
  out.relay_weights = enc.relay_weights;
  out.function_weights.assign(vectors.rows(), 0.0);
  for (std::size_t i = 0; i < vectors.rows(); ++i)
    for (std::size_t h = 0; h < enc.relay_weights.cols(); ++h)
      out.function_weights[i] += enc.relay_weights.at(i, h);
  return out;
}

ExecutableEncoding GalaxyModel::encode_executable(const ExecutableCode& code) const {
  if (code.functions.empty()) return encode_function_vectors(Tensor());
  return encode_function_vectors(function_vectors(code));
}

void GalaxyModel::collect(ParameterList& out) const {
  satellite_planet.collect("satellite_planet", out);
  planet_star.collect("planet_star", out);
  star_galaxy.collect("star_galaxy", out);
  mam_head.collect("mam_head", out);
}

ParameterList GalaxyModel::parameters() const {
  ParameterList out;
  collect(out);
  return out;
}

ParameterList GalaxyModel::level_parameters(std::string_view level) const {
  ParameterList out;
  if (level == "satellite_planet")
    satellite_planet.collect(level, out);
  else if (level == "planet_star")
    planet_star.collect(level, out);
  else if (level == "star_galaxy")
    star_galaxy.collect(level, out);
  else if (level == "mam_head")
    mam_head.collect(level, out);
  else
    throw std::invalid_argument("unknown model level '" + std::string(level) + "'");
  return out;
}

nlohmann::json GalaxyModel::metadata() const {
  return {{"config", config_.to_json()}, {"vocabulary", vocabulary_.to_json()}};
}

GalaxyModel GalaxyModel::from_metadata(const nlohmann::json& j) {
  return GalaxyModel(GalaxyConfig::from_json(j.at("config")),
                     CodeVocabulary::from_json(j.at("vocabulary")), 0);
}

}  // namespace imad
