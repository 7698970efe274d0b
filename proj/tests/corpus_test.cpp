// SPDX-License-Identifier: Apache-2.0

#include "imad/checkpoint.hpp"
#include "imad/corpus.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

namespace imad {
namespace {

namespace fs = std::filesystem;

CorpusSizes small_sizes() { return {300, 200, 120}; }

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("imad_corpus_" + name);
  fs::remove_all(p);
  return p;
}

TEST(ToyIsa, Shapes) {
  EXPECT_EQ(ToyIsa::opcodes().size(), 24u);
  EXPECT_EQ(ToyIsa::registers().size(), 8u);
  EXPECT_EQ(ToyIsa::general_registers().size(), 6u);
}

TEST(Generator, InstructionsUseTheIsa) {
  const auto c = generate_corpus(small_sizes(), 3);
  const std::set<std::string> ops(ToyIsa::opcodes().begin(), ToyIsa::opcodes().end());
  for (const auto& f : corpus_functions(c))
    for (const auto& b : f) {
      ASSERT_FALSE(b.empty());
      for (const auto& ins : b) {
        ASSERT_GE(ins.size(), 1u);
        ASSERT_LE(ins.size(), 3u);  // at most two operands
        EXPECT_TRUE(ops.contains(ins[0])) << ins[0];
      }
    }
}

TEST(Generator, CountsAndBalance) {
  const auto c = generate_corpus(small_sizes(), 3);
  EXPECT_EQ(c.mam_blocks.size(), 300u);
  EXPECT_EQ(c.clone_pairs.size(), 200u);
  EXPECT_EQ(c.executables.size(), 120u);
  EXPECT_EQ(c.visibility.size(), 120u);
  int clones = 0, malicious = 0;
  for (const auto& p : c.clone_pairs) clones += p.label == 1;
  for (const auto& e : c.executables) malicious += *e.label;
  EXPECT_EQ(clones, 100);
  EXPECT_EQ(malicious, 60);
  for (std::size_t i = 0; i < c.executables.size(); ++i) {
    const auto& e = c.executables[i];
    EXPECT_EQ(e.header.size(), HeaderFeatureSchema::width());
    EXPECT_EQ(e.function_names.size(), e.functions.size());
    EXPECT_EQ(*e.label == 0, c.visibility[i] == Visibility::none);
  }
}

TEST(Generator, ZeroSizeIsRejected) {
  EXPECT_THROW(generate_corpus({0, 10, 10}, 1), std::invalid_argument);
  EXPECT_THROW(generate_corpus({10, 0, 10}, 1), std::invalid_argument);
  EXPECT_THROW(generate_corpus({10, 10, 0}, 1), std::invalid_argument);
}

TEST(Generator, SeedDeterminesFilesByteForByte) {
  const auto a = scratch("a"), b = scratch("b"), c = scratch("c");
  const auto ma = write_corpus(a, generate_corpus(small_sizes(), 9), {{"seed", 9}});
  const auto mb = write_corpus(b, generate_corpus(small_sizes(), 9), {{"seed", 9}});
  const auto mc = write_corpus(c, generate_corpus(small_sizes(), 10), {{"seed", 10}});
  for (const char* f : {"mam_blocks.jsonl", "clone_pairs.jsonl", "executables.jsonl", "vocab.json",
                        "manifest.json"})
    EXPECT_EQ(file_sha256(a / f), file_sha256(b / f)) << f;
  EXPECT_NE(ma["files"]["executables.jsonl"], mc["files"]["executables.jsonl"]);
  EXPECT_EQ(ma["counts"]["clone_pairs"], 200);
  for (const auto& d : {a, b, c}) fs::remove_all(d);
}

TEST(Generator, CorpusRoundTrip) {
  const auto dir = scratch("rt");
  const auto c = generate_corpus(small_sizes(), 4);
  write_corpus(dir, c, {});
  const auto r = read_corpus(dir);
  ASSERT_EQ(r.mam_blocks, c.mam_blocks);
  ASSERT_EQ(r.clone_pairs.size(), c.clone_pairs.size());
  for (std::size_t i = 0; i < c.clone_pairs.size(); ++i) {
    EXPECT_EQ(r.clone_pairs[i].a, c.clone_pairs[i].a);
    EXPECT_EQ(r.clone_pairs[i].b, c.clone_pairs[i].b);
    EXPECT_EQ(r.clone_pairs[i].label, c.clone_pairs[i].label);
  }
  ASSERT_EQ(r.executables.size(), c.executables.size());
  for (std::size_t i = 0; i < c.executables.size(); ++i) {
    EXPECT_EQ(nlohmann::json(r.executables[i]), nlohmann::json(c.executables[i]));
    EXPECT_EQ(r.visibility[i], c.visibility[i]);
  }
  const auto vocab = CodeVocabulary::load(dir / "vocab.json");
  EXPECT_TRUE(vocab.opcodes.contains("mov"));
  EXPECT_TRUE(vocab.operands.contains("eax"));
  fs::remove_all(dir);
}

std::vector<std::string> block_ends(const TextFunction& f) {
  std::vector<std::string> out;
  for (const auto& b : f) out.push_back(b.back().front());
  return out;
}

TEST(Families, ShapeIsFixedAcrossGeneratorSeeds) {
  std::size_t malicious = 0;
  ToyGenerator g1(1), g2(2);
  for (std::size_t k = 0; k < ToyGenerator::family_count(); ++k) {
    malicious += ToyGenerator::family_is_malicious(k);
    const auto a = g1.function_of(k), b = g2.function_of(k);
    EXPECT_EQ(block_ends(a), block_ends(b)) << k;
    EXPECT_GE(a.size(), 2u);
    EXPECT_LE(a.size(), 5u);
  }
  EXPECT_EQ(malicious, 4u);
  EXPECT_EQ(ToyGenerator::family_count(), 10u);
  EXPECT_THROW(g1.function_of(ToyGenerator::family_count()), std::out_of_range);
}

TEST(Families, FunctionDrawsFromTheRequestedClass) {
  ToyGenerator g(5);
  std::set<std::vector<std::string>> benign, malicious;
  for (int i = 0; i < 400; ++i) {
    benign.insert(block_ends(g.function(false)));
    malicious.insert(block_ends(g.function(true)));
  }
  std::set<std::vector<std::string>> expect_benign, expect_malicious;
  ToyGenerator h(6);
  for (std::size_t k = 0; k < ToyGenerator::family_count(); ++k)
    (ToyGenerator::family_is_malicious(k) ? expect_malicious : expect_benign).insert(block_ends(h.function_of(k)));
  EXPECT_EQ(benign, expect_benign);
  EXPECT_EQ(malicious, expect_malicious);
}

TEST(Families, NonClonePairsComeFromDifferentFamilies) {
  // Instances of a family share the terminators of their blocks; families
  // with equal shapes are rare, so matching shapes flag a same-family draw.
  const auto c = generate_corpus({10, 400, 10}, 3);
  ToyGenerator h(1);
  std::map<std::vector<std::string>, std::size_t> shapes;
  for (std::size_t k = 0; k < ToyGenerator::family_count(); ++k) ++shapes[block_ends(h.function_of(k))];
  std::size_t unique_shape_pairs = 0;
  for (const auto& p : c.clone_pairs) {
    if (p.label != -1) continue;
    const auto sa = block_ends(p.a), sb = block_ends(p.b);
    if (shapes[sa] != 1) continue;
    ++unique_shape_pairs;
    EXPECT_NE(sa, sb);
  }
  EXPECT_GT(unique_shape_pairs, 50u);
}

TEST(CloneTransforms, ClonesDifferTextually) {
  const auto c = generate_corpus({10, 400, 2}, 5);
  for (const auto& p : c.clone_pairs) {
    if (p.label != 1) continue;
    EXPECT_NE(p.a, p.b);
    // Transforms keep the block structure up to nop insertion.
    ASSERT_EQ(p.a.size(), p.b.size());
  }
}

TEST(CloneTransforms, DoubleSwapIsIdentity) {
  ToyGenerator g(8);
  int changed = 0;
  for (int i = 0; i < 200; ++i) {
    const auto f = g.function(i % 2 == 0);
    const auto once = swap_commutative(f);
    changed += once != f;
    EXPECT_EQ(swap_commutative(once), f);
  }
  EXPECT_GT(changed, 0);
}

TEST(CloneTransforms, RenameIsAConsistentBijection) {
  ToyGenerator g(2);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const auto f = g.function(false);
    const auto r = apply_transform(f, CloneTransform::rename, rng);
    ASSERT_EQ(f.size(), r.size());
    std::map<std::string, std::string> forward, backward;
    for (std::size_t b = 0; b < f.size(); ++b) {
      ASSERT_EQ(f[b].size(), r[b].size());
      for (std::size_t k = 0; k < f[b].size(); ++k) {
        ASSERT_EQ(f[b][k].size(), r[b][k].size());
        EXPECT_EQ(f[b][k][0], r[b][k][0]);
        for (std::size_t o = 1; o < f[b][k].size(); ++o) {
          const auto& x = f[b][k][o];
          const auto& y = r[b][k][o];
          if (x == "ebp" || x == "esp") EXPECT_EQ(x, y);
          auto [it, inserted] = forward.emplace(x, y);
          EXPECT_EQ(it->second, y);
          auto [jt, inserted2] = backward.emplace(y, x);
          EXPECT_EQ(jt->second, x);
        }
      }
    }
  }
}

TEST(CloneTransforms, SubstitutionTable) {
  Rng rng(1);
  const TextFunction f = {{{"add", "eax", "1"}, {"xor", "ebx", "ebx"}, {"shl", "ecx", "1"},
                           {"sub", "edx", "1"}, {"ret"}}};
  std::set<std::string> seen;
  for (int i = 0; i < 64; ++i) {
    const auto g = apply_transform(f, CloneTransform::substitute, rng);
    for (const auto& ins : g[0]) {
      std::string s;
      for (const auto& t : ins) s += t + " ";
      seen.insert(s);
    }
  }
  for (const char* s : {"inc eax ", "mov ebx 0 ", "add ecx ecx ", "dec edx ", "add eax 1 ", "ret "})
    EXPECT_TRUE(seen.contains(s)) << s;
}

TEST(CloneTransforms, NopNeverFollowsTerminator) {
  ToyGenerator g(4);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    const auto f = apply_transform(g.function(false), CloneTransform::nop, rng);
    for (const auto& b : f) {
      const auto& last = b.back()[0];
      EXPECT_TRUE(last == "ret" || last == "jmp" || last == "je" || last == "jne") << last;
    }
  }
}

// Reference statistic computed directly from the definition.
double naive_chi_square(const std::vector<std::vector<double>>& t, double& dof) {
  std::vector<std::size_t> cols;
  for (std::size_t j = 0; j < t[0].size(); ++j)
    if (t[0][j] + t[1][j] > 0) cols.push_back(j);
  double n = 0, r0 = 0, r1 = 0;
  for (std::size_t j : cols) {
    r0 += t[0][j];
    r1 += t[1][j];
  }
  n = r0 + r1;
  double x = 0;
  for (std::size_t j : cols) {
    const double c = t[0][j] + t[1][j];
    const double e0 = r0 * c / n, e1 = r1 * c / n;
    x += (t[0][j] - e0) * (t[0][j] - e0) / e0 + (t[1][j] - e1) * (t[1][j] - e1) / e1;
  }
  dof = static_cast<double>(cols.size() - 1);
  return x;
}

TEST(ChiSquare, MatchesDefinitionAndKnownTable) {
  // 2x2 table with statistic 4.0 exactly: expected 25 in every cell.
  const auto t = chi_square_test({{30, 20}, {20, 30}});
  EXPECT_DOUBLE_EQ(t.statistic, 4.0);
  EXPECT_EQ(t.dof, 1.0);
  EXPECT_NEAR(t.p_value, 0.0455003, 1e-6);
  const std::vector<std::vector<double>> table = {{5, 0, 7, 9}, {3, 0, 12, 1}};
  double dof = 0;
  const double x = naive_chi_square(table, dof);
  const auto r = chi_square_test(table);
  EXPECT_NEAR(r.statistic, x, 1e-12);
  EXPECT_EQ(r.dof, dof);
  EXPECT_THROW(chi_square_test({{1, 2}}), std::invalid_argument);
}

TEST(ChiSquare, ClassOpcodeHistogramsDiffer) {
  const auto c = generate_corpus({10, 10, 2000}, 1);
  const auto table = class_opcode_histogram(c);
  const auto r = chi_square_test(table);
  EXPECT_LT(r.p_value, 0.01);
  double dof = 0;
  EXPECT_NEAR(r.statistic, naive_chi_square(table, dof), 1e-9 * r.statistic);
}

}  // namespace
}  // namespace imad
