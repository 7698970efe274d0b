// SPDX-License-Identifier: Apache-2.0

#include "imad/features.hpp"
#include "imad/nn.hpp"

#include "support/naive_features.hpp"
#include "support/pe_fixture.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>

namespace imad {
namespace {

std::vector<std::uint8_t> bytes_of(std::string_view s) { return {s.begin(), s.end()}; }

std::vector<std::uint8_t> random_blob(Rng& rng) {
  // Biased towards printable bytes and zeros so that runs of every length occur.
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

TEST(PrintableStrings, DocumentedExamples) {
  using V = std::vector<std::string>;
  EXPECT_EQ(extract_printable_strings(bytes_of(std::string("Hello\0", 6))), V{"Hello"});
  EXPECT_EQ(extract_printable_strings(bytes_of(std::string("Hi\0ABCD\0", 8))), V{});
  const std::string mixed("ABCDE\0zz\xff" "CDEFG\0", 15);
  EXPECT_EQ(extract_printable_strings(bytes_of(mixed)), (V{"ABCDE", "CDEFG"}));
  EXPECT_EQ(naive::printable_strings(bytes_of(mixed)), (V{"ABCDE", "CDEFG"}));
  EXPECT_EQ(extract_printable_strings({}), V{});
}

TEST(PrintableStrings, BoundaryFixtures) {
  using V = std::vector<std::string>;
  const std::vector<std::pair<std::string, V>> cases = {
      {std::string("ABCD\0", 5), {}},                       // length 4
      {std::string("ABCDE\0", 6), {"ABCDE"}},               // length 5
      {"ABCDEFGH", {}},                                     // no terminator
      {std::string("ABC\x80" "DEFGHI\0", 11), {"DEFGHI"}},  // non-ASCII interruption
      {std::string("AB\x7f" "CDEFG\0", 9), {"CDEFG"}},      // DEL is not printable
      {std::string("\x1f" "ABCDE\0", 7), {"ABCDE"}},
      {std::string("with space\0", 11), {"with space"}},
      {std::string("ABCDE\0\0FGHIJ\0", 13), {"ABCDE", "FGHIJ"}},
      {std::string("ABCDE\nFGHIJ\0", 12), {"FGHIJ"}},
      {std::string("\0\0\0", 3), {}},
  };
  for (const auto& [input, expected] : cases) {
    EXPECT_EQ(extract_printable_strings(bytes_of(input)), expected) << input;
    EXPECT_EQ(naive::printable_strings(bytes_of(input)), expected) << input;
  }
}

TEST(PrintableStrings, MatchesNaiveScannerOnRandomBlobs) {
  Rng rng(2024);
  for (int t = 0; t < 10000; ++t) {
    const auto blob = random_blob(rng);
    ASSERT_EQ(extract_printable_strings(blob), naive::printable_strings(blob)) << "blob " << t;
  }
}

TEST(Entropy, ClosedForms) {
  std::vector<std::uint8_t> all(256);
  std::iota(all.begin(), all.end(), 0);
  EXPECT_DOUBLE_EQ(shannon_entropy(all), 8.0);
  EXPECT_DOUBLE_EQ(shannon_entropy(std::vector<std::uint8_t>(100, 0x41)), 0.0);
  EXPECT_DOUBLE_EQ(shannon_entropy({}), 0.0);
  EXPECT_DOUBLE_EQ(shannon_entropy(bytes_of("abab")), 1.0);
  Rng rng(5);
  for (int t = 0; t < 200; ++t) {
    const auto blob = random_blob(rng);
    const double h = shannon_entropy(blob);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 8.0);
    EXPECT_NEAR(h, naive::entropy(blob), 1e-12);
  }
}

TEST(FrequencyVocabulary, StrictThreshold) {
  const std::vector<std::vector<std::string>> docs = {{"ABCDE", "ABCDE"}, {"ABCDE", "FGHIJ"}};
  auto v = FrequencyVocabulary::build(docs, 2);
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v.token(0), "ABCDE");
  EXPECT_EQ(v.count(0), 3u);
  EXPECT_EQ(FrequencyVocabulary::build(docs, 3).size(), 0u);
  EXPECT_EQ(FrequencyVocabulary::build({}, 1).size(), 0u);
  EXPECT_THROW(FrequencyVocabulary::build(docs, 0), std::invalid_argument);
}

TEST(FrequencyVocabulary, MatchesCountingOracle) {
  Rng rng(77);
  const std::vector<std::string> pool = {"alpha", "bravo", "charlie", "delta", "echo",
                                         "foxtrot", "golf", "hotel", "india", "juliet"};
  std::vector<std::vector<std::string>> docs(200);
  std::map<std::string, std::size_t> counts;
  for (auto& d : docs) {
    const std::size_t n = rng.index(8);
    for (std::size_t i = 0; i < n; ++i) {
      // Skewed draw so counts differ and some tie.
      const std::size_t k = std::min(rng.index(pool.size()), rng.index(pool.size()));
      d.push_back(pool[k]);
      ++counts[pool[k]];
    }
  }
  for (std::size_t threshold : {1u, 20u, 60u, 150u, 10000u}) {
    std::vector<std::pair<std::size_t, std::string>> expected;
    for (auto& [t, c] : counts)
      if (c > threshold) expected.emplace_back(c, t);
    std::stable_sort(expected.begin(), expected.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    const auto v = FrequencyVocabulary::build(docs, threshold);
    ASSERT_EQ(v.size(), expected.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_EQ(v.token(i), expected[i].second);
      EXPECT_EQ(v.count(i), expected[i].first);
    }
    const auto back = FrequencyVocabulary::from_json(v.to_json());
    EXPECT_EQ(back.to_json(), v.to_json());
  }
}

TEST(StringFeatures, Counting) {
  const auto vocab = FrequencyVocabulary::build({{"Sleep", "Sleep", "Sleep"}, {"Sleep", "Other"}}, 2);
  EXPECT_EQ(string_features({}, vocab), (std::vector<double>{0, 0, 0}));
  EXPECT_EQ(string_features({"Sleep", "Sleep", "Sleep"}, vocab), (std::vector<double>{3, 0, 3}));
  EXPECT_EQ(string_features({"Sleep", "xyzzy", "Other", "Sleep"}, vocab),
            (std::vector<double>{2, 2, 2}));
}

TEST(ImportFeatures, Counting) {
  const std::vector<PeImport> imports = {{"KERNEL32.dll", {"WriteFile"}}};
  const auto vocab = FrequencyVocabulary::build({import_tokens(imports), import_tokens(imports)}, 1);
  ASSERT_EQ(vocab.size(), 2u);
  const auto v = import_features(import_tokens(imports), vocab);
  ASSERT_EQ(v.size(), 4u);
  EXPECT_EQ(v[*vocab.index("kernel32.dll")], 1);
  EXPECT_EQ(v[*vocab.index("WriteFile")], 1);
  EXPECT_EQ(v[2], 0);  // uncommon
  EXPECT_EQ(v[3], 2);  // total
  EXPECT_EQ(import_features({}, vocab), (std::vector<double>{0, 0, 0, 0}));
}

TEST(ImportFeatures, DllNamesIgnoreCaseFunctionNamesDoNot) {
  const auto tokens = import_tokens({{"Kernel32.DLL", {"writefile", "WriteFile"}}});
  EXPECT_EQ(tokens, (std::vector<std::string>{"kernel32.dll", "writefile", "WriteFile"}));
}

TEST(PeParser, FixtureMatchesManifest) {
  const auto f = fixture::sample_pe();
  const PeFile pe = parse_pe(f.bytes);
  const auto header = HeaderFeatureSchema::extract(pe);
  const auto& fields = HeaderFeatureSchema::fields();
  ASSERT_EQ(header.size(), fields.size());
  for (std::size_t i = 0; i < fields.size(); ++i)
    EXPECT_NEAR(header[i], f.manifest["header"][fields[i]].get<double>(), 1e-12) << fields[i];

  ASSERT_EQ(pe.sections.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& m = f.manifest["sections"][i];
    EXPECT_EQ(pe.sections[i].name, m["name"]);
    EXPECT_EQ(pe.sections[i].virtual_address, m["virtual_address"]);
    EXPECT_EQ(pe.sections[i].raw_offset, m["raw_offset"]);
    EXPECT_EQ(pe.sections[i].raw_size, m["raw_size"]);
  }
  ASSERT_EQ(pe.imports.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(pe.imports[i].dll, f.manifest["imports"][i]["dll"]);
    EXPECT_EQ(pe.imports[i].functions,
              f.manifest["imports"][i]["functions"].get<std::vector<std::string>>());
  }

  const SampleRecord s = sample_from_pe("fixture", f.bytes);
  EXPECT_EQ(s.strings, f.manifest["strings"].get<std::vector<std::string>>());
  EXPECT_EQ(import_tokens(s.imports), f.manifest["import_tokens"].get<std::vector<std::string>>());
  std::vector<std::string> payload;
  for (const auto& str : s.strings)
    if (str == "Sleep" || str == "Password" || str == "GetLastError") payload.push_back(str);
  // "Sleep" also appears as an import name after the payload.
  EXPECT_EQ(std::vector<std::string>(payload.begin(), payload.begin() + 3),
            f.manifest["payload_strings"].get<std::vector<std::string>>());
}

TEST(PeParser, Pe32PlusRoundTrip) {
  PeImageSpec spec;
  spec.pe32_plus = true;
  spec.machine = 0x8664;
  spec.image_base = 0x140000000ull;
  spec.size_of_stack_reserve = 0x200000;
  spec.sections = {{".text", std::vector<std::uint8_t>(5000, 0xCC), 0x60000020}};
  spec.imports = {{"ADVAPI32.dll", {"RegOpenKeyExW", "#5"}}};
  const PeFile pe = parse_pe(write_pe(spec));
  EXPECT_TRUE(pe.pe32_plus);
  EXPECT_EQ(pe.machine, 0x8664);
  EXPECT_EQ(pe.image_base, 0x140000000ull);
  EXPECT_EQ(pe.size_of_optional_header, 240);
  EXPECT_EQ(pe.size_of_stack_reserve, 0x200000u);
  ASSERT_EQ(pe.sections.size(), 2u);
  EXPECT_EQ(pe.sections[0].raw_size, 5120u);
  EXPECT_EQ(pe.sections[1].virtual_address, 0x3000u);  // 5000 bytes span two pages
  ASSERT_EQ(pe.imports.size(), 1u);
  EXPECT_EQ(pe.imports[0].functions, (std::vector<std::string>{"RegOpenKeyExW", "#5"}));
}

void expect_parse_error(const std::vector<std::uint8_t>& bytes, const std::string& structure,
                        std::uint64_t offset) {
  try {
    parse_pe(bytes);
    ADD_FAILURE() << "expected a parse error in " << structure;
  } catch (const ParseError& e) {
    EXPECT_EQ(e.structure(), structure) << e.what();
    EXPECT_EQ(e.offset(), offset) << e.what();
  }
}

TEST(PeParser, StructuredErrors) {
  const auto good = fixture::sample_pe().bytes;
  expect_parse_error({}, "DOS header", 0);
  expect_parse_error(bytes_of("ZM"), "DOS header", 0);

  auto bad_lfanew = good;
  bad_lfanew[0x3C] = 0xF0;
  bad_lfanew[0x3D] = 0xFF;
  expect_parse_error(bad_lfanew, "PE signature", 0xFFF0);

  auto bad_signature = good;
  bad_signature[0x41] = 'X';
  expect_parse_error(bad_signature, "PE signature", 0x40);

  auto bad_magic = good;
  bad_magic[0x58] = 0x07;
  expect_parse_error(bad_magic, "optional header", 0x58);

  expect_parse_error(std::vector<std::uint8_t>(good.begin(), good.begin() + 0x150),
                     "section table", 0x138);

  auto bad_import = good;
  // Import directory RVA (data directory 1) points outside every section.
  const std::size_t dir = 0x58 + 96 + 8;
  bad_import[dir + 2] = 0x7F;
  expect_parse_error(bad_import, "import directory", 0x7F3000);

  std::vector<std::uint8_t> truncated(good.begin(), good.begin() + 0x500);
  expect_parse_error(truncated, "section data", 0x400);
}

TEST(Header, JsonRoundTripAndValidation) {
  const auto f = fixture::sample_pe();
  const auto values = HeaderFeatureSchema::from_json(f.manifest["header"]);
  EXPECT_EQ(HeaderFeatureSchema::to_json(values), f.manifest["header"]);
  auto missing = f.manifest["header"];
  missing.erase("Subsystem");
  EXPECT_THROW(HeaderFeatureSchema::from_json(missing), FormatError);
  auto extra = f.manifest["header"];
  extra["Bogus"] = 1;
  EXPECT_THROW(HeaderFeatureSchema::from_json(extra), FormatError);
  EXPECT_EQ(HeaderFeatureSchema::description(14), "Major operating system version");
  EXPECT_EQ(HeaderFeatureSchema::description(30), "Maximum entropy of sections");
}

TEST(SegmentedVector, WidthsAndNames) {
  const std::vector<double> code(96, 0.5), str(10, 1.0), num(12, 2.0), imp(8, 3.0);
  std::vector<std::string> names;
  for (int i = 0; i < 30; ++i) names.push_back("f" + std::to_string(i));
  const auto v = assemble_feature_vector(code, str, num, imp, names);
  ASSERT_EQ(v.values.size(), 126u);
  const std::vector<std::tuple<std::string, std::size_t, std::size_t>> expected = {
      {"code", 0, 96}, {"str", 96, 106}, {"num", 106, 118}, {"imp", 118, 126}};
  ASSERT_EQ(v.segments.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(v.segments[i].name, std::get<0>(expected[i]));
    EXPECT_EQ(v.segments[i].begin, std::get<1>(expected[i]));
    EXPECT_EQ(v.segments[i].end, std::get<2>(expected[i]));
  }
  auto same = [](std::span<const double> a, const std::vector<double>& b) {
    return std::equal(a.begin(), a.end(), b.begin(), b.end());
  };
  EXPECT_TRUE(same(v.slice("code"), code));
  EXPECT_TRUE(same(v.slice("str"), str));
  EXPECT_TRUE(same(v.slice("num"), num));
  EXPECT_TRUE(same(v.slice("imp"), imp));
  EXPECT_EQ(v.name(0), "Assembly code");
  EXPECT_EQ(v.name(95), "Assembly code");
  EXPECT_EQ(v.name(96), "f0");
  EXPECT_EQ(v.name(125), "f29");
  EXPECT_THROW(assemble_feature_vector(code, str, num, imp, {"too", "few"}), std::invalid_argument);
}

SampleRecord fixture_sample() {
  auto s = sample_from_pe("fixture", fixture::sample_pe().bytes);
  s.label = 1;
  return s;
}

TEST(FeatureSchema, AssembleUsesSchemaNamesAndChecksWidths) {
  const auto sample = fixture_sample();
  const auto schema = FeatureSchema::fit({sample, sample}, 1, 1, 6);
  EXPECT_TRUE(schema.strings.index("Password").has_value());
  EXPECT_TRUE(schema.imports.index("kernel32.dll").has_value());
  const auto values = schema.static_features(sample);
  ASSERT_EQ(values.size(), schema.static_width());
  const std::vector<double> code(6, 0.1);
  const auto v = schema.assemble(code, values);
  EXPECT_EQ(v.values.size(), schema.width());
  EXPECT_EQ(v.name(6), "Frequency of the string \"" + schema.strings.token(0) + "\"");
  EXPECT_EQ(v.name(v.segment("num").begin + 22), "Subsystem");
  EXPECT_EQ(v.slice("num")[22], 2.0);
  EXPECT_EQ(v.name(v.values.size() - 1), "Total number of PE imports");
  EXPECT_EQ(v.values.back(), 6.0);
  EXPECT_THROW(schema.assemble(std::vector<double>(5), values), std::invalid_argument);
  EXPECT_THROW(schema.assemble(code, std::vector<double>(3)), std::invalid_argument);

  const auto back = FeatureSchema::from_json(schema.to_json());
  EXPECT_EQ(back.static_features(sample), values);
  EXPECT_EQ(back.static_names(), schema.static_names());
}

TEST(FeatureSchema, ExtractionIsPure) {
  const auto a = fixture_sample(), b = fixture_sample();
  const auto schema = FeatureSchema::fit({a}, 1, 1, 3);
  EXPECT_EQ(schema.static_features(a), schema.static_features(b));
  EXPECT_EQ(feature_record(a, schema), feature_record(b, schema));
}

TEST(FeatureSchema, FrozenVocabularyIgnoresNewTokens) {
  SampleRecord train = fixture_sample();
  const auto schema = FeatureSchema::fit({train}, 1, 1, 0);
  SampleRecord test = train;
  test.strings = {"NeverSeen", "NeverSeen", "Sleep"};
  const auto v = schema.static_features(test);
  EXPECT_EQ(v[schema.strings.size()], 2);      // uncommon
  EXPECT_EQ(v[schema.strings.size() + 1], 1);  // common total
  EXPECT_FALSE(schema.strings.index("NeverSeen"));
}

TEST(SampleRecord, JsonRoundTripAndBareImports) {
  const auto s = fixture_sample();
  nlohmann::json j = s;
  const auto back = j.get<SampleRecord>();
  EXPECT_EQ(nlohmann::json(back), j);

  j["imports"] = {"KERNEL32.dll", "WriteFile", "Sleep", "user32.DLL", "MessageBoxA"};
  const auto flat = j.get<SampleRecord>();
  ASSERT_EQ(flat.imports.size(), 2u);
  EXPECT_EQ(flat.imports[0].functions, (std::vector<std::string>{"WriteFile", "Sleep"}));
  EXPECT_EQ(import_tokens(flat.imports),
            (std::vector<std::string>{"kernel32.dll", "WriteFile", "Sleep", "user32.dll",
                                      "MessageBoxA"}));

  const auto path = std::filesystem::temp_directory_path() / "imad_samples_test.jsonl";
  write_samples(path, {s, back});
  const auto read = read_samples(path);
  ASSERT_EQ(read.size(), 2u);
  EXPECT_EQ(nlohmann::json(read[1]), nlohmann::json(s));
  std::filesystem::remove(path);
}

TEST(Standardizer, TrainingStatistics) {
  Rng rng(9);
  std::vector<std::vector<double>> rows(500);
  for (auto& r : rows)
    r = {static_cast<double>(rng.index(50)), 1e6 + rng.normal() * 1e3, 7.0, rng.uniform()};
  const auto s = Standardizer::fit(rows, {true, false, false, true});
  std::vector<double> mean(4, 0), sq(4, 0);
  for (const auto& r : rows) {
    const auto t = s.transform(r);
    for (int j = 0; j < 4; ++j) {
      mean[j] += t[j] / rows.size();
      sq[j] += t[j] * t[j] / rows.size();
    }
  }
  for (int j : {0, 1, 3}) {
    EXPECT_NEAR(mean[j], 0.0, 1e-6);
    EXPECT_NEAR(std::sqrt(sq[j] - mean[j] * mean[j]), 1.0, 1e-6);
  }
  EXPECT_EQ(mean[2], 0.0);  // constant column
  EXPECT_DOUBLE_EQ(s.transform(std::vector<double>{3, 1e6, 7, 0.5})[0],
                   (std::log1p(3.0) - s.mean[0]) / s.stddev[0]);
  const auto back = Standardizer::from_json(s.to_json());
  EXPECT_EQ(back.transform(rows[0]), s.transform(rows[0]));
  EXPECT_THROW(s.transform(std::vector<double>{1, 2}), std::invalid_argument);
}

TEST(EscapeToken, NonPrintableBytes) {
  EXPECT_EQ(escape_token("\x02\x02GetLastError"), "\\x02\\x02GetLastError");
  EXPECT_EQ(escape_token("say \"hi\""), "say \\\"hi\\\"");
}

}  // namespace
}  // namespace imad
