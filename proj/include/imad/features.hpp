// SPDX-License-Identifier: Apache-2.0
//
// Static features of an executable: printable strings, imports and header
// numerics, and their concatenation with the code vector into
// v = [v_code, v_str, v_num, v_imp].

#pragma once

#include "imad/galaxy.hpp"
#include "imad/pe.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace imad {

/// Maximal runs of bytes in 0x20..0x7E of at least `min_length` bytes that
/// are immediately followed by a 0x00 byte, in file order.
std::vector<std::string> extract_printable_strings(std::span<const std::uint8_t> bytes,
                                                   std::size_t min_length = 5);

/// Tokens whose total count over a training corpus exceeds a threshold.
class FrequencyVocabulary {
 public:
  FrequencyVocabulary() = default;

  /// Counts every token occurrence in `documents`; ordered by descending
  /// count, then lexicographically.
  static FrequencyVocabulary build(const std::vector<std::vector<std::string>>& documents,
                                   std::size_t threshold);

  std::size_t size() const { return tokens_.size(); }
  std::optional<std::size_t> index(const std::string& token) const;
  const std::string& token(std::size_t i) const { return tokens_.at(i); }
  std::size_t count(std::size_t i) const { return counts_.at(i); }
  std::size_t threshold() const { return threshold_; }

  nlohmann::json to_json() const;
  static FrequencyVocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::vector<std::size_t> counts_;
  std::unordered_map<std::string, std::size_t> index_;
  std::size_t threshold_ = 0;
};

/// [frequency of each vocabulary string..., uncommon count, common total].
std::vector<double> string_features(const std::vector<std::string>& strings,
                                    const FrequencyVocabulary& vocab);

/// One token per DLL (lower-cased) and one per imported function name.
std::vector<std::string> import_tokens(const std::vector<PeImport>& imports);

/// [frequency of each vocabulary import..., uncommon count, total imports].
std::vector<double> import_features(const std::vector<std::string>& tokens,
                                    const FrequencyVocabulary& vocab);

/// Fixed header field list followed by mean and max section entropy.
struct HeaderFeatureSchema {
  static const std::vector<std::string>& fields();
  static std::size_t width() { return fields().size(); }
  /// Human-readable description, e.g. "Major operating system version".
  static std::string description(std::size_t i);

  static std::vector<double> extract(const PeFile& pe);
  /// Requires every field; unknown keys are rejected.
  static std::vector<double> from_json(const nlohmann::json& header);
  static nlohmann::json to_json(std::span<const double> values);
};

/// Pre-extracted view of one executable.
struct SampleRecord {
  std::string id;
  std::optional<int> label;
  std::vector<std::string> strings;
  std::vector<PeImport> imports;
  std::vector<double> header;
  std::vector<TextFunction> functions;
  std::vector<std::string> function_names;  // optional, parallel to functions
};

void to_json(nlohmann::json& j, const SampleRecord& r);
void from_json(const nlohmann::json& j, SampleRecord& r);

/// Parses `bytes` as PE. No disassembler is bundled, so `functions` is empty.
SampleRecord sample_from_pe(const std::string& id, std::span<const std::uint8_t> bytes);

std::vector<SampleRecord> read_samples(const std::filesystem::path& path);
void write_samples(const std::filesystem::path& path, const std::vector<SampleRecord>& samples);

struct Segment {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;  // half-open
  std::size_t width() const { return end - begin; }
};

struct SegmentedFeatureVector {
  std::vector<double> values;
  std::vector<Segment> segments;  // code, str, num, imp
  std::vector<std::string> names;  // one per value

  const Segment& segment(std::string_view name) const;
  std::span<const double> slice(std::string_view name) const;
  const std::string& name(std::size_t index) const { return names.at(index); }
};

inline constexpr const char* kCodeFeatureName = "Assembly code";

/// Concatenates the four parts. `names` describes str, num and imp values in
/// order; when empty, generic names are used.
SegmentedFeatureVector assemble_feature_vector(std::span<const double> code,
                                               std::span<const double> str,
                                               std::span<const double> num,
                                               std::span<const double> imp,
                                               const std::vector<std::string>& names = {});

/// Frozen vocabularies and layout of the static features.
struct FeatureSchema {
  FrequencyVocabulary strings;
  FrequencyVocabulary imports;
  std::size_t code_width = 0;

  static FeatureSchema fit(const std::vector<SampleRecord>& training, std::size_t string_threshold,
                           std::size_t import_threshold, std::size_t code_width);

  std::size_t string_width() const { return strings.size() + 2; }
  std::size_t header_width() const { return HeaderFeatureSchema::width(); }
  std::size_t import_width() const { return imports.size() + 2; }
  std::size_t static_width() const { return string_width() + header_width() + import_width(); }
  std::size_t width() const { return code_width + static_width(); }

  /// [str, num, imp] of one sample.
  std::vector<double> static_features(const SampleRecord& sample) const;
  /// Names of the static values, in order.
  std::vector<std::string> static_names() const;
  /// Throws std::invalid_argument on a width mismatch.
  SegmentedFeatureVector assemble(std::span<const double> code,
                                  std::span<const double> static_values) const;

  nlohmann::json to_json() const;
  static FeatureSchema from_json(const nlohmann::json& j);
};

/// Per-dimension z-score from training statistics, with log1p applied first
/// where `log_mask` is set. Constant dimensions map to 0.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<bool> log_mask;

  static Standardizer fit(const std::vector<std::vector<double>>& rows, std::vector<bool> log_mask);
  /// Mask for a schema's static layout: log1p on string and import counts.
  static std::vector<bool> static_log_mask(const FeatureSchema& schema);

  std::size_t width() const { return mean.size(); }
  std::vector<double> transform(std::span<const double> row) const;

  nlohmann::json to_json() const;
  static Standardizer from_json(const nlohmann::json& j);
};

/// {id, label, values, segments} record of a sample's static features.
nlohmann::json feature_record(const SampleRecord& sample, const FeatureSchema& schema);

/// Display form of a token with non-printable bytes and quotes escaped.
std::string escape_token(const std::string& token);

}  // namespace imad
