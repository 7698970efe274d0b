// SPDX-License-Identifier: Apache-2.0

#include "imad/features.hpp"

#include "imad/jsonl.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace imad {

std::vector<std::string> extract_printable_strings(std::span<const std::uint8_t> bytes,
                                                   std::size_t min_length) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const std::uint8_t b = bytes[i];
    if (b >= 0x20 && b <= 0x7E) continue;
    if (b == 0x00 && i - start >= min_length)
      out.emplace_back(reinterpret_cast<const char*>(bytes.data() + start), i - start);
    start = i + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frequency vocabularies

FrequencyVocabulary FrequencyVocabulary::build(
    const std::vector<std::vector<std::string>>& documents, std::size_t threshold) {
  if (threshold < 1) throw std::invalid_argument("vocabulary threshold must be at least 1");
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& doc : documents)
    for (const auto& token : doc) ++counts[token];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [token, n] : counts)
    if (n > threshold) kept.emplace_back(token, n);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  FrequencyVocabulary v;
  v.threshold_ = threshold;
  for (auto& [token, n] : kept) {
    v.index_.emplace(token, v.tokens_.size());
    v.tokens_.push_back(token);
    v.counts_.push_back(n);
  }
  return v;
}

std::optional<std::size_t> FrequencyVocabulary::index(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

nlohmann::json FrequencyVocabulary::to_json() const {
  return {{"threshold", threshold_}, {"tokens", tokens_}, {"counts", counts_}};
}

FrequencyVocabulary FrequencyVocabulary::from_json(const nlohmann::json& j) {
  FrequencyVocabulary v;
  v.threshold_ = j.at("threshold").get<std::size_t>();
  v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  v.counts_ = j.at("counts").get<std::vector<std::size_t>>();
  if (v.tokens_.size() != v.counts_.size())
    throw FormatError("frequency vocabulary: tokens and counts differ in length");
  for (std::size_t i = 0; i < v.tokens_.size(); ++i)
    if (!v.index_.emplace(v.tokens_[i], i).second)
      throw FormatError("frequency vocabulary: duplicate token \"" + v.tokens_[i] + "\"");
  return v;
}

namespace {

// [per-token frequency..., uncommon, last] where `last` is supplied.
std::vector<double> count_features(const std::vector<std::string>& tokens,
                                   const FrequencyVocabulary& vocab, double& common,
                                   double& uncommon) {
  std::vector<double> out(vocab.size() + 2, 0.0);
  common = uncommon = 0;
  for (const auto& t : tokens) {
    if (auto i = vocab.index(t)) {
      out[*i] += 1;
      common += 1;
    } else {
      uncommon += 1;
    }
  }
  out[vocab.size()] = uncommon;
  return out;
}

bool looks_like_module(const std::string& name) {
  static const char* suffixes[] = {".dll", ".sys", ".drv", ".exe", ".ocx", ".cpl"};
  if (name.size() < 4) return false;
  std::string tail = name.substr(name.size() - 4);
  std::transform(tail.begin(), tail.end(), tail.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return std::any_of(std::begin(suffixes), std::end(suffixes),
                     [&](const char* s) { return tail == s; });
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

std::vector<double> string_features(const std::vector<std::string>& strings,
                                    const FrequencyVocabulary& vocab) {
  double common, uncommon;
  auto out = count_features(strings, vocab, common, uncommon);
  out[vocab.size() + 1] = common;
  return out;
}

std::vector<std::string> import_tokens(const std::vector<PeImport>& imports) {
  std::vector<std::string> out;
  for (const auto& imp : imports) {
    if (!imp.dll.empty()) out.push_back(lower(imp.dll));
    out.insert(out.end(), imp.functions.begin(), imp.functions.end());
  }
  return out;
}

std::vector<double> import_features(const std::vector<std::string>& tokens,
                                    const FrequencyVocabulary& vocab) {
  double common, uncommon;
  auto out = count_features(tokens, vocab, common, uncommon);
  out[vocab.size() + 1] = static_cast<double>(tokens.size());
  return out;
}

// ---------------------------------------------------------------------------
// Header fields

const std::vector<std::string>& HeaderFeatureSchema::fields() {
  static const std::vector<std::string> names = {
      "Machine", "NumberOfSections", "TimeDateStamp", "SizeOfOptionalHeader",
      "Characteristics", "MajorLinkerVersion", "MinorLinkerVersion", "SizeOfCode",
      "SizeOfInitializedData", "SizeOfUninitializedData", "AddressOfEntryPoint", "ImageBase",
      "SectionAlignment", "FileAlignment", "MajorOperatingSystemVersion",
      "MinorOperatingSystemVersion", "MajorImageVersion", "MinorImageVersion",
      "MajorSubsystemVersion", "SizeOfImage", "SizeOfHeaders", "Checksum", "Subsystem",
      "DllCharacteristics", "SizeOfStackReserve", "SizeOfStackCommit", "SizeOfHeapReserve",
      "SizeOfHeapCommit", "NumberOfRvaAndSizes", "MeanSectionEntropy", "MaxSectionEntropy"};
  return names;
}

std::string HeaderFeatureSchema::description(std::size_t i) {
  const std::string& field = fields().at(i);
  if (field == "MeanSectionEntropy") return "Mean entropy of sections";
  if (field == "MaxSectionEntropy") return "Maximum entropy of sections";
  std::string out;
  for (std::size_t k = 0; k < field.size(); ++k) {
    const char c = field[k];
    if (k > 0 && std::isupper(static_cast<unsigned char>(c))) {
      out.push_back(' ');
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      out.push_back(c);
    }
  }
  return out;
}

std::vector<double> HeaderFeatureSchema::extract(const PeFile& pe) {
  double mean = 0, max = 0;
  for (const auto& s : pe.sections) {
    mean += s.entropy;
    max = std::max(max, s.entropy);
  }
  if (!pe.sections.empty()) mean /= static_cast<double>(pe.sections.size());
  auto d = [](auto v) { return static_cast<double>(v); };
  return {d(pe.machine),
          d(pe.number_of_sections),
          d(pe.time_date_stamp),
          d(pe.size_of_optional_header),
          d(pe.characteristics),
          d(pe.major_linker_version),
          d(pe.minor_linker_version),
          d(pe.size_of_code),
          d(pe.size_of_initialized_data),
          d(pe.size_of_uninitialized_data),
          d(pe.address_of_entry_point),
          d(pe.image_base),
          d(pe.section_alignment),
          d(pe.file_alignment),
          d(pe.major_operating_system_version),
          d(pe.minor_operating_system_version),
          d(pe.major_image_version),
          d(pe.minor_image_version),
          d(pe.major_subsystem_version),
          d(pe.size_of_image),
          d(pe.size_of_headers),
          d(pe.checksum),
          d(pe.subsystem),
          d(pe.dll_characteristics),
          d(pe.size_of_stack_reserve),
          d(pe.size_of_stack_commit),
          d(pe.size_of_heap_reserve),
          d(pe.size_of_heap_commit),
          d(pe.number_of_rva_and_sizes),
          mean,
          max};
}

std::vector<double> HeaderFeatureSchema::from_json(const nlohmann::json& header) {
  if (!header.is_object()) throw FormatError("header must be an object of field values");
  const auto& names = fields();
  std::vector<double> out(names.size());
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (!header.contains(names[i])) throw FormatError("header lacks field " + names[i]);
    out[i] = header[names[i]].get<double>();
  }
  for (const auto& [key, value] : header.items())
    if (std::find(names.begin(), names.end(), key) == names.end())
      throw FormatError("unknown header field " + key);
  return out;
}

nlohmann::json HeaderFeatureSchema::to_json(std::span<const double> values) {
  const auto& names = fields();
  if (values.size() != names.size())
    throw std::invalid_argument("header vector has " + std::to_string(values.size()) +
                                " values, schema has " + std::to_string(names.size()));
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < names.size(); ++i) j[names[i]] = values[i];
  return j;
}

// ---------------------------------------------------------------------------
// Sample records

void to_json(nlohmann::json& j, const SampleRecord& r) {
  nlohmann::json imports = nlohmann::json::array();
  for (const auto& imp : r.imports) imports.push_back({{"dll", imp.dll}, {"functions", imp.functions}});
  j = {{"id", r.id},
       {"label", r.label ? nlohmann::json(*r.label) : nlohmann::json(nullptr)},
       {"strings", r.strings},
       {"imports", imports},
       {"header", HeaderFeatureSchema::to_json(r.header)},
       {"functions", r.functions}};
  if (!r.function_names.empty()) j["function_names"] = r.function_names;
}

void from_json(const nlohmann::json& j, SampleRecord& r) {
  r.id = j.at("id").get<std::string>();
  r.label.reset();
  if (j.contains("label") && !j["label"].is_null()) r.label = j["label"].get<int>();
  r.strings = j.value("strings", std::vector<std::string>{});
  r.imports.clear();
  // Either {dll, functions} objects or bare names; bare module names start a
  // new DLL entry and other names are functions of the current one.
  for (const auto& item : j.value("imports", nlohmann::json::array())) {
    if (item.is_object()) {
      r.imports.push_back({item.at("dll").get<std::string>(),
                           item.value("functions", std::vector<std::string>{})});
    } else {
      const auto name = item.get<std::string>();
      if (looks_like_module(name) || r.imports.empty())
        r.imports.push_back(looks_like_module(name) ? PeImport{name, {}} : PeImport{"", {name}});
      else
        r.imports.back().functions.push_back(name);
    }
  }
  r.header = HeaderFeatureSchema::from_json(j.at("header"));
  r.functions = j.value("functions", std::vector<TextFunction>{});
  r.function_names = j.value("function_names", std::vector<std::string>{});
  if (!r.function_names.empty() && r.function_names.size() != r.functions.size())
    throw FormatError("sample " + r.id + ": function_names and functions differ in length");
}

SampleRecord sample_from_pe(const std::string& id, std::span<const std::uint8_t> bytes) {
  const PeFile pe = parse_pe(bytes);
  SampleRecord r;
  r.id = id;
  r.strings = extract_printable_strings(bytes);
  r.imports = pe.imports;
  r.header = HeaderFeatureSchema::extract(pe);
  return r;
}

std::vector<SampleRecord> read_samples(const std::filesystem::path& path) {
  std::vector<SampleRecord> out;
  std::size_t n = 0;
  for (const auto& j : read_jsonl(path)) {
    ++n;
    try {
      out.push_back(j.get<SampleRecord>());
    } catch (const std::exception& e) {
      throw FormatError(path.string() + ": record " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_samples(const std::filesystem::path& path, const std::vector<SampleRecord>& samples) {
  std::vector<nlohmann::json> lines(samples.begin(), samples.end());
  write_jsonl(path, lines);
}

// ---------------------------------------------------------------------------
// Segmented vectors

const Segment& SegmentedFeatureVector::segment(std::string_view name) const {
  for (const auto& s : segments)
    if (s.name == name) return s;
  throw std::out_of_range("no segment named " + std::string(name));
}

std::span<const double> SegmentedFeatureVector::slice(std::string_view name) const {
  const Segment& s = segment(name);
  return std::span<const double>(values).subspan(s.begin, s.width());
}

SegmentedFeatureVector assemble_feature_vector(std::span<const double> code,
                                               std::span<const double> str,
                                               std::span<const double> num,
                                               std::span<const double> imp,
                                               const std::vector<std::string>& names) {
  const std::size_t static_width = str.size() + num.size() + imp.size();
  if (!names.empty() && names.size() != static_width)
    throw std::invalid_argument("feature names: " + std::to_string(names.size()) +
                                " given for " + std::to_string(static_width) + " values");
  SegmentedFeatureVector v;
  v.values.reserve(code.size() + static_width);
  v.names.reserve(code.size() + static_width);
  const std::pair<const char*, std::span<const double>> parts[] = {
      {"code", code}, {"str", str}, {"num", num}, {"imp", imp}};
  std::size_t named = 0;
  for (const auto& [segment, values] : parts) {
    const std::size_t begin = v.values.size();
    v.values.insert(v.values.end(), values.begin(), values.end());
    for (std::size_t k = 0; k < values.size(); ++k) {
      if (std::string_view(segment) == "code")
        v.names.emplace_back(kCodeFeatureName);
      else if (!names.empty())
        v.names.push_back(names[named++]);
      else
        v.names.push_back(std::string(segment) + "[" + std::to_string(k) + "]");
    }
    v.segments.push_back({segment, begin, v.values.size()});
  }
  return v;
}

// ---------------------------------------------------------------------------
// Schema

FeatureSchema FeatureSchema::fit(const std::vector<SampleRecord>& training,
                                 std::size_t string_threshold, std::size_t import_threshold,
                                 std::size_t code_width) {
  std::vector<std::vector<std::string>> strings, imports;
  strings.reserve(training.size());
  imports.reserve(training.size());
  for (const auto& s : training) {
    strings.push_back(s.strings);
    imports.push_back(import_tokens(s.imports));
  }
  FeatureSchema schema;
  schema.strings = FrequencyVocabulary::build(strings, string_threshold);
  schema.imports = FrequencyVocabulary::build(imports, import_threshold);
  schema.code_width = code_width;
  return schema;
}

std::vector<double> FeatureSchema::static_features(const SampleRecord& sample) const {
  if (sample.header.size() != header_width())
    throw std::invalid_argument("sample " + sample.id + ": header has " +
                                std::to_string(sample.header.size()) + " values, expected " +
                                std::to_string(header_width()));
  std::vector<double> out = string_features(sample.strings, strings);
  out.insert(out.end(), sample.header.begin(), sample.header.end());
  const auto imp = import_features(import_tokens(sample.imports), imports);
  out.insert(out.end(), imp.begin(), imp.end());
  return out;
}

std::vector<std::string> FeatureSchema::static_names() const {
  std::vector<std::string> names;
  names.reserve(static_width());
  for (std::size_t i = 0; i < strings.size(); ++i)
    names.push_back("Frequency of the string \"" + escape_token(strings.token(i)) + "\"");
  names.emplace_back("Number of uncommon strings");
  names.emplace_back("Total number of common strings");
  for (std::size_t i = 0; i < header_width(); ++i) names.push_back(HeaderFeatureSchema::description(i));
  for (std::size_t i = 0; i < imports.size(); ++i)
    names.push_back("The import of " + escape_token(imports.token(i)));
  names.emplace_back("Number of uncommon imports");
  names.emplace_back("Total number of PE imports");
  return names;
}

SegmentedFeatureVector FeatureSchema::assemble(std::span<const double> code,
                                               std::span<const double> static_values) const {
  if (code.size() != code_width)
    throw std::invalid_argument("code vector has width " + std::to_string(code.size()) +
                                ", schema expects " + std::to_string(code_width));
  if (static_values.size() != static_width())
    throw std::invalid_argument("static features have width " +
                                std::to_string(static_values.size()) + ", schema expects " +
                                std::to_string(static_width()));
  return assemble_feature_vector(code, static_values.subspan(0, string_width()),
                                 static_values.subspan(string_width(), header_width()),
                                 static_values.subspan(string_width() + header_width()),
                                 static_names());
}

nlohmann::json FeatureSchema::to_json() const {
  return {{"strings", strings.to_json()},
          {"imports", imports.to_json()},
          {"header", HeaderFeatureSchema::fields()},
          {"code_width", code_width}};
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
  if (j.at("header").get<std::vector<std::string>>() != HeaderFeatureSchema::fields())
    throw FormatError("feature schema: header field list differs from this build");
  FeatureSchema s;
  s.strings = FrequencyVocabulary::from_json(j.at("strings"));
  s.imports = FrequencyVocabulary::from_json(j.at("imports"));
  s.code_width = j.at("code_width").get<std::size_t>();
  return s;
}

// ---------------------------------------------------------------------------
// Standardisation

Standardizer Standardizer::fit(const std::vector<std::vector<double>>& rows,
                               std::vector<bool> log_mask) {
  if (rows.empty()) throw std::invalid_argument("standardizer: no training rows");
  const std::size_t m = log_mask.size();
  Standardizer s;
  s.log_mask = std::move(log_mask);
  s.mean.assign(m, 0.0);
  s.stddev.assign(m, 0.0);
  for (const auto& r : rows) {
    if (r.size() != m) throw std::invalid_argument("standardizer: ragged rows");
    for (std::size_t j = 0; j < m; ++j)
      s.mean[j] += s.log_mask[j] ? std::log1p(std::max(r[j], 0.0)) : r[j];
  }
  const double n = static_cast<double>(rows.size());
  for (double& v : s.mean) v /= n;
  for (const auto& r : rows)
    for (std::size_t j = 0; j < m; ++j) {
      const double x = s.log_mask[j] ? std::log1p(std::max(r[j], 0.0)) : r[j];
      s.stddev[j] += (x - s.mean[j]) * (x - s.mean[j]);
    }
  for (double& v : s.stddev) v = std::sqrt(v / n);
  return s;
}

std::vector<bool> Standardizer::static_log_mask(const FeatureSchema& schema) {
  std::vector<bool> mask(schema.static_width(), true);
  std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(schema.string_width()),
              schema.header_width(), false);
  return mask;
}

std::vector<double> Standardizer::transform(std::span<const double> row) const {
  if (row.size() != width())
    throw std::invalid_argument("standardizer: row width " + std::to_string(row.size()) +
                                ", expected " + std::to_string(width()));
  std::vector<double> out(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double x = log_mask[j] ? std::log1p(std::max(row[j], 0.0)) : row[j];
    // Relative cutoff: dimensions whose spread is rounding noise are constant.
    const bool constant = stddev[j] <= 1e-12 * std::max(1.0, std::abs(mean[j]));
    out[j] = constant ? 0.0 : (x - mean[j]) / stddev[j];
  }
  return out;
}

nlohmann::json Standardizer::to_json() const {
  return {{"mean", mean}, {"stddev", stddev}, {"log", log_mask}};
}

Standardizer Standardizer::from_json(const nlohmann::json& j) {
  Standardizer s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("stddev").get<std::vector<double>>();
  s.log_mask = j.at("log").get<std::vector<bool>>();
  if (s.stddev.size() != s.mean.size() || s.log_mask.size() != s.mean.size())
    throw FormatError("standardizer: mean, stddev and log differ in length");
  return s;
}

nlohmann::json feature_record(const SampleRecord& sample, const FeatureSchema& schema) {
  const auto values = schema.static_features(sample);
  const std::size_t a = schema.string_width(), b = a + schema.header_width();
  return {{"id", sample.id},
          {"label", sample.label ? nlohmann::json(*sample.label) : nlohmann::json(nullptr)},
          {"values", values},
          {"segments", {{"str", {0, a}}, {"num", {a, b}}, {"imp", {b, values.size()}}}}};
}

std::string escape_token(const std::string& token) {
  std::string out;
  for (unsigned char c : token) {
    if (c == '"' || c == '\\') {
      out.push_back('\\');
      out.push_back(static_cast<char>(c));
    } else if (c < 0x20 || c > 0x7E) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\x%02x", c);
      out += buf;
    } else {
      out.push_back(static_cast<char>(c));
    }
  }
  return out;
}

}  // namespace imad
