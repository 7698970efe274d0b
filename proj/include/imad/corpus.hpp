// SPDX-License-Identifier: Apache-2.0
//
// Synthetic corpora over a small x86-like instruction set: blocks for masked
// instruction modelling, clone/non-clone function pairs, and labelled
// executables whose code, strings, imports and headers carry class signals.
//
// Blocks are concatenations of idioms (short fixed opcode patterns with
// random registers and immediates), so a masked opcode is usually implied by
// its neighbours. Clones are produced by semantics-preserving rewrites.

#pragma once

#include "imad/features.hpp"
#include "imad/galaxy.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace imad {

struct ToyIsa {
  static const std::vector<std::string>& opcodes();    // 24 mnemonics
  static const std::vector<std::string>& registers();  // 8 names
  static const std::vector<std::string>& immediates();
  /// Registers that clone renaming may permute (not ebp or esp).
  static const std::vector<std::string>& general_registers();
};

enum class CloneTransform { rename, swap, substitute, nop };

/// Rewrites that keep the generator's semantics:
///   rename      consistent bijection over the general registers
///   swap        operand swap of the commutative "test"
///   substitute  add r,1 <-> inc r; sub r,1 <-> dec r; xor r,r <-> mov r,0;
///               shl r,1 <-> add r,r
///   nop         one nop inserted before a non-terminating instruction
TextFunction apply_transform(const TextFunction& f, CloneTransform kind, Rng& rng);
/// Swaps the operands of every "test r1, r2"; applying it twice is the identity.
TextFunction swap_commutative(const TextFunction& f);

struct ClonePair {
  TextFunction a;
  TextFunction b;
  int label = 1;  // +1 clone, -1 non-clone
};

struct CorpusSizes {
  std::size_t mam_blocks = 20000;
  std::size_t clone_pairs = 4000;
  std::size_t executables = 2000;
};

/// How an executable's class shows: malicious samples reveal themselves in
/// the code, the static features or both; benign ones in neither.
enum class Visibility { none, code, statics, both };

struct SyntheticCorpus {
  std::vector<TextBlock> mam_blocks;
  std::vector<ClonePair> clone_pairs;
  std::vector<SampleRecord> executables;
  std::vector<Visibility> visibility;  // one per executable
};

class ToyGenerator {
 public:
  explicit ToyGenerator(std::uint64_t seed) : rng_(seed) {}

  TextBlock block();
  /// An instance of a random benign or malicious function family: 2-5
  /// blocks with a prologue and an epilogue. Malicious families mix in the
  /// decoder, syscall and arithmetic idioms.
  TextFunction function(bool malicious);
  TextFunction function_of(std::size_t family);
  static std::size_t family_count();
  static bool family_is_malicious(std::size_t family);
  /// A clone of `f` that differs textually in at least one instruction.
  TextFunction clone(const TextFunction& f);
  SampleRecord executable(const std::string& id, bool malicious, Visibility& visibility);

  Rng& rng() { return rng_; }

 private:
  void idiom(TextBlock& out, bool malicious);
  void idiom(TextBlock& out, bool malicious, std::size_t which);
  void snippet(TextBlock& out, const std::vector<std::string>& ops);
  void terminator(TextBlock& out);
  void terminator(TextBlock& out, std::size_t which);
  std::string reg();
  std::string imm();

  Rng rng_;
};

/// Deterministic in `seed`. Throws std::invalid_argument for a zero size.
SyntheticCorpus generate_corpus(const CorpusSizes& sizes, std::uint64_t seed);

/// Every function text in the corpus, for vocabulary building.
std::vector<TextFunction> corpus_functions(const SyntheticCorpus& corpus);

/// Files written into `dir`: mam_blocks.jsonl, clone_pairs.jsonl,
/// executables.jsonl, vocab.json and manifest.json. Returns the manifest.
nlohmann::json write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& corpus,
                            const nlohmann::json& generator_config);
SyntheticCorpus read_corpus(const std::filesystem::path& dir);

/// Opcode counts per class over the labelled executables: row 0 benign,
/// row 1 malicious, one column per opcode of the ISA.
std::vector<std::vector<double>> class_opcode_histogram(const SyntheticCorpus& corpus);

/// Pearson chi-square test of independence on a contingency table; columns
/// that are zero in every row are dropped.
struct ChiSquare {
  double statistic = 0;
  double dof = 0;
  double p_value = 1;
};
ChiSquare chi_square_test(const std::vector<std::vector<double>>& table);

}  // namespace imad
