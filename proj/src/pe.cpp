// SPDX-License-Identifier: Apache-2.0

#include "imad/pe.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

namespace imad {

namespace {

std::string hex(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

class View {
 public:
  explicit View(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t read(std::uint64_t offset, unsigned width, const char* what) const {
    need(offset, width, what);
    std::uint64_t v = 0;
    for (unsigned i = 0; i < width; ++i) v |= std::uint64_t{bytes_[offset + i]} << (8 * i);
    return v;
  }
  std::uint16_t u16(std::uint64_t off, const char* what) const {
    return static_cast<std::uint16_t>(read(off, 2, what));
  }
  std::uint32_t u32(std::uint64_t off, const char* what) const {
    return static_cast<std::uint32_t>(read(off, 4, what));
  }
  std::uint64_t u64(std::uint64_t off, const char* what) const { return read(off, 8, what); }

  void need(std::uint64_t offset, std::uint64_t length, const char* what) const {
    if (offset > bytes_.size() || length > bytes_.size() - offset)
      throw ParseError(what, offset,
                       "needs " + std::to_string(length) + " bytes, file has " +
                           std::to_string(bytes_.size()));
  }

  std::string cstring(std::uint64_t offset, const char* what) const {
    std::string s;
    for (std::uint64_t i = offset;; ++i) {
      if (i >= bytes_.size()) throw ParseError(what, offset, "unterminated string");
      if (bytes_[i] == 0) return s;
      if (s.size() >= 4096) throw ParseError(what, offset, "string longer than 4096 bytes");
      s.push_back(static_cast<char>(bytes_[i]));
    }
  }

  std::span<const std::uint8_t> slice(std::uint64_t offset, std::uint64_t length,
                                      const char* what) const {
    need(offset, length, what);
    return bytes_.subspan(offset, length);
  }

 private:
  std::span<const std::uint8_t> bytes_;
};

std::uint64_t rva_to_offset(const PeFile& pe, std::uint64_t rva, const char* what) {
  for (const auto& s : pe.sections) {
    const std::uint64_t extent = std::max(s.virtual_size, s.raw_size);
    if (rva >= s.virtual_address && rva < s.virtual_address + extent) {
      const std::uint64_t delta = rva - s.virtual_address;
      if (delta >= s.raw_size) throw ParseError(what, rva, "rva maps past raw section data");
      return s.raw_offset + delta;
    }
  }
  if (rva < pe.size_of_headers) return rva;
  throw ParseError(what, rva, "rva " + hex(rva) + " is not inside any section");
}

void parse_imports(const View& v, PeFile& pe, std::uint32_t dir_rva, std::uint32_t dir_size) {
  if (dir_rva == 0 || dir_size == 0) return;
  const std::size_t thunk = pe.pe32_plus ? 8 : 4;
  const std::uint64_t ordinal_flag = pe.pe32_plus ? (std::uint64_t{1} << 63) : (1u << 31);
  std::uint64_t desc = rva_to_offset(pe, dir_rva, "import directory");
  for (std::size_t n = 0;; ++n, desc += 20) {
    if (n > 4096) throw ParseError("import directory", desc, "more than 4096 descriptors");
    const std::uint32_t lookup = v.u32(desc, "import descriptor");
    const std::uint32_t name_rva = v.u32(desc + 12, "import descriptor");
    const std::uint32_t first_thunk = v.u32(desc + 16, "import descriptor");
    if (lookup == 0 && name_rva == 0 && first_thunk == 0) break;
    PeImport imp;
    imp.dll = v.cstring(rva_to_offset(pe, name_rva, "import dll name"), "import dll name");
    const std::uint32_t table = lookup != 0 ? lookup : first_thunk;
    std::uint64_t entry = rva_to_offset(pe, table, "import lookup table");
    for (std::size_t k = 0;; ++k, entry += thunk) {
      if (k > 65536) throw ParseError("import lookup table", entry, "more than 65536 entries");
      const std::uint64_t value = v.read(entry, static_cast<unsigned>(thunk), "import lookup table");
      if (value == 0) break;
      if (value & ordinal_flag) {
        imp.functions.push_back("#" + std::to_string(value & 0xFFFF));
      } else {
        const std::uint64_t hint = rva_to_offset(pe, value & 0x7FFFFFFF, "import hint/name");
        imp.functions.push_back(v.cstring(hint + 2, "import hint/name"));
      }
    }
    pe.imports.push_back(std::move(imp));
  }
}

}  // namespace

ParseError::ParseError(std::string structure, std::uint64_t offset, const std::string& detail)
    : std::runtime_error("malformed PE: " + structure + " at offset " + hex(offset) + ": " +
                         detail),
      structure_(std::move(structure)),
      offset_(offset) {}

double shannon_entropy(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return 0.0;
  std::array<std::size_t, 256> counts{};
  for (std::uint8_t b : bytes) ++counts[b];
  const double n = static_cast<double>(bytes.size());
  double h = 0.0;
  for (std::size_t c : counts)
    if (c != 0) {
      const double p = static_cast<double>(c) / n;
      h -= p * std::log2(p);
    }
  return std::clamp(h, 0.0, 8.0);
}

PeFile parse_pe(std::span<const std::uint8_t> bytes) {
  const View v(bytes);
  PeFile pe;
  if (v.u16(0, "DOS header") != 0x5A4D) throw ParseError("DOS header", 0, "missing MZ magic");
  const std::uint32_t lfanew = v.u32(0x3C, "DOS header");
  if (v.u32(lfanew, "PE signature") != 0x00004550)
    throw ParseError("PE signature", lfanew, "expected PE\\0\\0");

  const std::uint64_t coff = lfanew + 4;
  pe.machine = v.u16(coff, "COFF header");
  pe.number_of_sections = v.u16(coff + 2, "COFF header");
  pe.time_date_stamp = v.u32(coff + 4, "COFF header");
  pe.size_of_optional_header = v.u16(coff + 16, "COFF header");
  pe.characteristics = v.u16(coff + 18, "COFF header");

  const std::uint64_t opt = coff + 20;
  v.need(opt, pe.size_of_optional_header, "optional header");
  const std::uint16_t magic = v.u16(opt, "optional header");
  if (magic != 0x10b && magic != 0x20b)
    throw ParseError("optional header", opt, "unknown magic " + hex(magic));
  pe.pe32_plus = magic == 0x20b;
  const std::uint64_t min_size = pe.pe32_plus ? 112 : 96;
  if (pe.size_of_optional_header < min_size)
    throw ParseError("optional header", opt,
                     "size " + std::to_string(pe.size_of_optional_header) + " below " +
                         std::to_string(min_size));
  pe.major_linker_version = static_cast<std::uint8_t>(v.read(opt + 2, 1, "optional header"));
  pe.minor_linker_version = static_cast<std::uint8_t>(v.read(opt + 3, 1, "optional header"));
  pe.size_of_code = v.u32(opt + 4, "optional header");
  pe.size_of_initialized_data = v.u32(opt + 8, "optional header");
  pe.size_of_uninitialized_data = v.u32(opt + 12, "optional header");
  pe.address_of_entry_point = v.u32(opt + 16, "optional header");
  pe.image_base = pe.pe32_plus ? v.u64(opt + 24, "optional header") : v.u32(opt + 28, "optional header");
  pe.section_alignment = v.u32(opt + 32, "optional header");
  pe.file_alignment = v.u32(opt + 36, "optional header");
  pe.major_operating_system_version = v.u16(opt + 40, "optional header");
  pe.minor_operating_system_version = v.u16(opt + 42, "optional header");
  pe.major_image_version = v.u16(opt + 44, "optional header");
  pe.minor_image_version = v.u16(opt + 46, "optional header");
  pe.major_subsystem_version = v.u16(opt + 48, "optional header");
  pe.size_of_image = v.u32(opt + 56, "optional header");
  pe.size_of_headers = v.u32(opt + 60, "optional header");
  pe.checksum = v.u32(opt + 64, "optional header");
  pe.subsystem = v.u16(opt + 68, "optional header");
  pe.dll_characteristics = v.u16(opt + 70, "optional header");
  const unsigned w = pe.pe32_plus ? 8 : 4;
  pe.size_of_stack_reserve = v.read(opt + 72, w, "optional header");
  pe.size_of_stack_commit = v.read(opt + 72 + w, w, "optional header");
  pe.size_of_heap_reserve = v.read(opt + 72 + 2 * w, w, "optional header");
  pe.size_of_heap_commit = v.read(opt + 72 + 3 * w, w, "optional header");
  const std::uint64_t rva_count_at = opt + 72 + 4 * w + 4;
  pe.number_of_rva_and_sizes = v.u32(rva_count_at, "optional header");
  const std::uint64_t dirs = rva_count_at + 4;
  const std::uint64_t dir_count =
      std::min<std::uint64_t>(pe.number_of_rva_and_sizes, (opt + pe.size_of_optional_header - dirs) / 8);

  const std::uint64_t table = opt + pe.size_of_optional_header;
  v.need(table, std::uint64_t{40} * pe.number_of_sections, "section table");
  for (std::uint16_t i = 0; i < pe.number_of_sections; ++i) {
    const std::uint64_t at = table + 40u * i;
    PeSection s;
    const auto name = v.slice(at, 8, "section table");
    for (std::uint8_t c : name) {
      if (c == 0) break;
      s.name.push_back(static_cast<char>(c));
    }
    s.virtual_size = v.u32(at + 8, "section table");
    s.virtual_address = v.u32(at + 12, "section table");
    s.raw_size = v.u32(at + 16, "section table");
    s.raw_offset = v.u32(at + 20, "section table");
    s.characteristics = v.u32(at + 36, "section table");
    if (s.raw_size > 0) s.entropy = shannon_entropy(v.slice(s.raw_offset, s.raw_size, "section data"));
    pe.sections.push_back(std::move(s));
  }

  if (dir_count > 1)
    parse_imports(v, pe, v.u32(dirs + 8, "data directory"), v.u32(dirs + 12, "data directory"));
  return pe;
}

// ---------------------------------------------------------------------------
// Writer

namespace {

std::uint32_t align_up(std::uint64_t v, std::uint32_t a) {
  return static_cast<std::uint32_t>((v + a - 1) / a * a);
}

class Buffer {
 public:
  explicit Buffer(std::vector<std::uint8_t>& out) : out_(out) {}
  void put(std::uint64_t offset, std::uint64_t value, unsigned width) {
    if (out_.size() < offset + width) out_.resize(offset + width, 0);
    for (unsigned i = 0; i < width; ++i) out_[offset + i] = static_cast<std::uint8_t>(value >> (8 * i));
  }
  void put_bytes(std::uint64_t offset, std::span<const std::uint8_t> bytes) {
    if (out_.size() < offset + bytes.size()) out_.resize(offset + bytes.size(), 0);
    std::copy(bytes.begin(), bytes.end(), out_.begin() + static_cast<std::ptrdiff_t>(offset));
  }
  void put_string(std::uint64_t offset, const std::string& s) {
    put_bytes(offset, {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
    put(offset + s.size(), 0, 1);
  }

 private:
  std::vector<std::uint8_t>& out_;
};

// Import directory laid out for a section that starts at `base_rva`.
std::vector<std::uint8_t> build_idata(const std::vector<PeImport>& imports, std::uint32_t base_rva,
                                      bool pe32_plus, std::uint32_t& directory_size) {
  const std::uint32_t thunk = pe32_plus ? 8 : 4;
  directory_size = static_cast<std::uint32_t>((imports.size() + 1) * 20);
  std::uint32_t cursor = directory_size;
  std::vector<std::uint32_t> ilt(imports.size()), iat(imports.size());
  for (std::size_t i = 0; i < imports.size(); ++i) {
    ilt[i] = cursor;
    cursor += static_cast<std::uint32_t>((imports[i].functions.size() + 1) * thunk);
  }
  for (std::size_t i = 0; i < imports.size(); ++i) {
    iat[i] = cursor;
    cursor += static_cast<std::uint32_t>((imports[i].functions.size() + 1) * thunk);
  }
  std::vector<std::uint8_t> out(cursor, 0);
  Buffer buf(out);
  for (std::size_t i = 0; i < imports.size(); ++i) {
    const auto& imp = imports[i];
    for (std::size_t k = 0; k < imp.functions.size(); ++k) {
      std::uint64_t value;
      if (!imp.functions[k].empty() && imp.functions[k][0] == '#') {
        value = std::stoull(imp.functions[k].substr(1)) |
                (pe32_plus ? (std::uint64_t{1} << 63) : (std::uint64_t{1} << 31));
      } else {
        cursor = align_up(cursor, 2);
        value = base_rva + cursor;
        buf.put(cursor, 0, 2);  // hint
        buf.put_string(cursor + 2, imp.functions[k]);
        cursor += static_cast<std::uint32_t>(2 + imp.functions[k].size() + 1);
      }
      buf.put(ilt[i] + k * thunk, value, thunk);
      buf.put(iat[i] + k * thunk, value, thunk);
    }
    const std::uint32_t name_at = cursor;
    buf.put_string(name_at, imp.dll);
    cursor += static_cast<std::uint32_t>(imp.dll.size() + 1);
    const std::uint64_t d = i * 20;
    buf.put(d, base_rva + ilt[i], 4);
    buf.put(d + 12, base_rva + name_at, 4);
    buf.put(d + 16, base_rva + iat[i], 4);
  }
  out.resize(cursor, 0);
  return out;
}

}  // namespace

std::vector<std::uint8_t> write_pe(const PeImageSpec& spec) {
  std::vector<PeSectionSpec> sections = spec.sections;
  const std::size_t section_count = sections.size() + (spec.imports.empty() ? 0 : 1);
  const std::uint32_t lfanew = 0x40;
  const std::uint32_t opt_size = spec.pe32_plus ? 240 : 224;
  const std::uint32_t opt = lfanew + 24;
  const std::uint32_t table = opt + opt_size;
  const std::uint32_t headers = align_up(table + 40 * section_count, kFileAlignment);

  // Virtual addresses are assigned before the import section is built since
  // its contents refer to its own address.
  std::vector<std::uint32_t> va, raw_offset, raw_size;
  std::uint32_t next_va = kSectionAlignment, next_raw = headers;
  auto place = [&](std::size_t bytes) {
    va.push_back(next_va);
    const std::uint32_t size = align_up(bytes, kFileAlignment);
    raw_offset.push_back(size ? next_raw : 0);
    raw_size.push_back(size);
    next_raw += size;
    next_va = align_up(next_va + std::max<std::size_t>(bytes, 1), kSectionAlignment);
  };
  for (const auto& s : sections) place(s.data.size());
  std::uint32_t import_dir_size = 0;
  if (!spec.imports.empty()) {
    const std::uint32_t idata_va = next_va;
    sections.push_back({".idata", build_idata(spec.imports, idata_va, spec.pe32_plus, import_dir_size),
                        0xC0000040});
    place(sections.back().data.size());
  }

  std::vector<std::uint8_t> out(headers, 0);
  Buffer b(out);
  b.put(0, 0x5A4D, 2);
  b.put(0x3C, lfanew, 4);
  b.put(lfanew, 0x00004550, 4);
  const std::uint32_t coff = lfanew + 4;
  b.put(coff, spec.machine, 2);
  b.put(coff + 2, section_count, 2);
  b.put(coff + 4, spec.time_date_stamp, 4);
  b.put(coff + 16, opt_size, 2);
  b.put(coff + 18, spec.characteristics, 2);

  std::uint32_t size_code = 0, size_init = 0, size_uninit = 0;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    if (sections[i].characteristics & 0x20) size_code += raw_size[i];
    if (sections[i].characteristics & 0x40) size_init += raw_size[i];
    if (sections[i].characteristics & 0x80) size_uninit += raw_size[i];
  }
  b.put(opt, spec.pe32_plus ? 0x20b : 0x10b, 2);
  b.put(opt + 2, spec.major_linker_version, 1);
  b.put(opt + 3, spec.minor_linker_version, 1);
  b.put(opt + 4, size_code, 4);
  b.put(opt + 8, size_init, 4);
  b.put(opt + 12, size_uninit, 4);
  b.put(opt + 16, sections.empty() ? 0 : va[0], 4);
  b.put(opt + 20, sections.empty() ? 0 : va[0], 4);  // BaseOfCode
  if (spec.pe32_plus)
    b.put(opt + 24, spec.image_base, 8);
  else
    b.put(opt + 28, spec.image_base, 4);
  b.put(opt + 32, kSectionAlignment, 4);
  b.put(opt + 36, kFileAlignment, 4);
  b.put(opt + 40, spec.major_operating_system_version, 2);
  b.put(opt + 42, spec.minor_operating_system_version, 2);
  b.put(opt + 44, spec.major_image_version, 2);
  b.put(opt + 46, spec.minor_image_version, 2);
  b.put(opt + 48, spec.major_subsystem_version, 2);
  b.put(opt + 56, next_va, 4);  // SizeOfImage
  b.put(opt + 60, headers, 4);
  b.put(opt + 64, spec.checksum, 4);
  b.put(opt + 68, spec.subsystem, 2);
  b.put(opt + 70, spec.dll_characteristics, 2);
  const unsigned w = spec.pe32_plus ? 8 : 4;
  b.put(opt + 72, spec.size_of_stack_reserve, w);
  b.put(opt + 72 + w, spec.size_of_stack_commit, w);
  b.put(opt + 72 + 2 * w, spec.size_of_heap_reserve, w);
  b.put(opt + 72 + 3 * w, spec.size_of_heap_commit, w);
  const std::uint32_t dirs = opt + 72 + 4 * w + 8;
  b.put(dirs - 4, 16, 4);
  if (!spec.imports.empty()) {
    b.put(dirs + 8, va.back(), 4);
    b.put(dirs + 12, import_dir_size, 4);
  }

  for (std::size_t i = 0; i < sections.size(); ++i) {
    const std::uint32_t at = table + 40 * static_cast<std::uint32_t>(i);
    const std::string name = sections[i].name.substr(0, 8);
    b.put_bytes(at, {reinterpret_cast<const std::uint8_t*>(name.data()), name.size()});
    b.put(at + 8, sections[i].data.size(), 4);
    b.put(at + 12, va[i], 4);
    b.put(at + 16, raw_size[i], 4);
    b.put(at + 20, raw_offset[i], 4);
    b.put(at + 36, sections[i].characteristics, 4);
    if (raw_size[i] != 0) {
      out.resize(std::max<std::size_t>(out.size(), raw_offset[i] + raw_size[i]), 0);
      b.put_bytes(raw_offset[i], sections[i].data);
    }
  }
  return out;
}

}  // namespace imad
