// SPDX-License-Identifier: Apache-2.0
//
// JSON-lines files: one JSON value per line, blank lines ignored.

#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <vector>

namespace imad {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Throws FormatError naming the file and line of the first bad record.
std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& records);
std::string to_jsonl(const std::vector<nlohmann::json>& records);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& value);

}  // namespace imad
