// SPDX-License-Identifier: Apache-2.0
//
// Reference implementations for the feature extractors, written for
// obviousness rather than speed.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace naive {

inline bool printable(std::uint8_t b) { return b >= 0x20 && b <= 0x7E; }

/// Tries every (start, end) pair and keeps maximal printable runs that end
/// right before a zero byte.
inline std::vector<std::string> printable_strings(const std::vector<std::uint8_t>& bytes,
                                                  std::size_t min_length = 5) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (i > 0 && printable(bytes[i - 1])) continue;  // not the start of a run
    for (std::size_t j = i; j < bytes.size(); ++j) {
      bool all = true;
      for (std::size_t k = i; k < j; ++k) all = all && printable(bytes[k]);
      if (!all) break;
      if (bytes[j] == 0 && j - i >= min_length) {
        out.emplace_back(bytes.begin() + static_cast<std::ptrdiff_t>(i),
                         bytes.begin() + static_cast<std::ptrdiff_t>(j));
        break;
      }
      if (!printable(bytes[j])) break;
    }
  }
  return out;
}

inline double entropy(const std::vector<std::uint8_t>& bytes) {
  if (bytes.empty()) return 0.0;
  std::map<int, double> counts;
  for (auto b : bytes) counts[b] += 1;
  double h = 0;
  for (auto& [b, c] : counts) h += (c / bytes.size()) * std::log2(bytes.size() / c);
  return h;
}

}  // namespace naive
