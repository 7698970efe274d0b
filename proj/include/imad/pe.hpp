// SPDX-License-Identifier: Apache-2.0
//
// Minimal PE/COFF reader and writer. The reader extracts the header fields,
// section table and import table needed for static features; the writer
// builds small well-formed images for fixtures and tests.

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace imad {

/// A structural problem in a PE image, with the structure and file offset
/// at which parsing failed.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::string structure, std::uint64_t offset, const std::string& detail);
  const std::string& structure() const { return structure_; }
  std::uint64_t offset() const { return offset_; }

 private:
  std::string structure_;
  std::uint64_t offset_;
};

struct PeSection {
  std::string name;
  std::uint32_t virtual_size = 0;
  std::uint32_t virtual_address = 0;
  std::uint32_t raw_size = 0;
  std::uint32_t raw_offset = 0;
  std::uint32_t characteristics = 0;
  double entropy = 0.0;  // bits per byte of the raw data
};

struct PeImport {
  std::string dll;
  std::vector<std::string> functions;  // "#<n>" for imports by ordinal
};

struct PeFile {
  // COFF header
  std::uint16_t machine = 0;
  std::uint16_t number_of_sections = 0;
  std::uint32_t time_date_stamp = 0;
  std::uint16_t size_of_optional_header = 0;
  std::uint16_t characteristics = 0;
  // Optional header
  bool pe32_plus = false;
  std::uint8_t major_linker_version = 0;
  std::uint8_t minor_linker_version = 0;
  std::uint32_t size_of_code = 0;
  std::uint32_t size_of_initialized_data = 0;
  std::uint32_t size_of_uninitialized_data = 0;
  std::uint32_t address_of_entry_point = 0;
  std::uint64_t image_base = 0;
  std::uint32_t section_alignment = 0;
  std::uint32_t file_alignment = 0;
  std::uint16_t major_operating_system_version = 0;
  std::uint16_t minor_operating_system_version = 0;
  std::uint16_t major_image_version = 0;
  std::uint16_t minor_image_version = 0;
  std::uint16_t major_subsystem_version = 0;
  std::uint32_t size_of_image = 0;
  std::uint32_t size_of_headers = 0;
  std::uint32_t checksum = 0;
  std::uint16_t subsystem = 0;
  std::uint16_t dll_characteristics = 0;
  std::uint64_t size_of_stack_reserve = 0;
  std::uint64_t size_of_stack_commit = 0;
  std::uint64_t size_of_heap_reserve = 0;
  std::uint64_t size_of_heap_commit = 0;
  std::uint32_t number_of_rva_and_sizes = 0;

  std::vector<PeSection> sections;
  std::vector<PeImport> imports;
};

/// Parses the headers, sections and import table. Throws ParseError.
PeFile parse_pe(std::span<const std::uint8_t> bytes);

/// Shannon entropy in bits per byte; 0 for empty input.
double shannon_entropy(std::span<const std::uint8_t> bytes);

struct PeSectionSpec {
  std::string name;
  std::vector<std::uint8_t> data;
  std::uint32_t characteristics = 0x60000020;  // code | execute | read
};

struct PeImageSpec {
  bool pe32_plus = false;
  std::uint16_t machine = 0x14c;
  std::uint32_t time_date_stamp = 0;
  std::uint16_t characteristics = 0x0102;
  std::uint8_t major_linker_version = 14;
  std::uint8_t minor_linker_version = 0;
  std::uint64_t image_base = 0x400000;
  std::uint16_t major_operating_system_version = 6;
  std::uint16_t minor_operating_system_version = 0;
  std::uint16_t major_image_version = 0;
  std::uint16_t minor_image_version = 0;
  std::uint16_t major_subsystem_version = 6;
  std::uint32_t checksum = 0;
  std::uint16_t subsystem = 2;
  std::uint16_t dll_characteristics = 0x8140;
  std::uint64_t size_of_stack_reserve = 0x100000;
  std::uint64_t size_of_stack_commit = 0x1000;
  std::uint64_t size_of_heap_reserve = 0x100000;
  std::uint64_t size_of_heap_commit = 0x1000;
  std::vector<PeSectionSpec> sections;
  /// Written to an extra ".idata" section when non-empty.
  std::vector<PeImport> imports;
};

inline constexpr std::uint32_t kFileAlignment = 0x200;
inline constexpr std::uint32_t kSectionAlignment = 0x1000;

/// Serialises a PE image; the entry point is the start of the first section.
std::vector<std::uint8_t> write_pe(const PeImageSpec& spec);

}  // namespace imad
