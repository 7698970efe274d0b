// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint layout (all integers little-endian):
//
//   "IMAD"                magic, 4 bytes
//   u32                   format version
//   u64 + bytes           UTF-8 JSON config
//   u32                   number of parameter records
//   per record:
//     u32 + bytes         parameter name
//     u32                 rank
//     u64 * rank          extents
//     f64 * product       raw values

#pragma once

#include "imad/nn.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

namespace imad {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  nlohmann::json config;
  ParameterList parameters;  // detached copies, in file order

  /// Copies stored values into `target` by name. Every target parameter must
  /// be present with an identical shape.
  void load_into(const ParameterList& target) const;
  const Tensor* find(const std::string& name) const;
};

std::string encode_checkpoint(const nlohmann::json& config, const ParameterList& params);
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const ParameterList& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Lower-case hex SHA-256 of a byte string / file.
std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace imad
