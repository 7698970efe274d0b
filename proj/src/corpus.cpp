// SPDX-License-Identifier: Apache-2.0

#include "imad/corpus.hpp"

#include "imad/checkpoint.hpp"
#include "imad/jsonl.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <cstdio>
#include <map>
#include <stdexcept>

namespace imad {

const std::vector<std::string>& ToyIsa::opcodes() {
  static const std::vector<std::string> v = {
      "mov", "add", "sub", "inc", "dec", "xor", "and", "or",  "push", "pop", "cmp", "test",
      "jmp", "je",  "jne", "call", "ret", "lea", "mul", "div", "shl", "shr", "nop", "int"};
  return v;
}

const std::vector<std::string>& ToyIsa::registers() {
  static const std::vector<std::string> v = {"eax", "ebx", "ecx", "edx",
                                             "esi", "edi", "ebp", "esp"};
  return v;
}

const std::vector<std::string>& ToyIsa::general_registers() {
  static const std::vector<std::string> v = {"eax", "ebx", "ecx", "edx", "esi", "edi"};
  return v;
}

const std::vector<std::string>& ToyIsa::immediates() {
  static const std::vector<std::string> v = {"0", "1", "2", "4", "8", "0x10", "0x20", "0x80", "0xff"};
  return v;
}

// ---------------------------------------------------------------------------
// Clone transforms

namespace {

bool is_general(const std::string& op) {
  const auto& g = ToyIsa::general_registers();
  return std::find(g.begin(), g.end(), op) != g.end();
}

bool is_terminator(const TextInstruction& ins) {
  static const std::vector<std::string> t = {"jmp", "je", "jne", "ret"};
  return std::find(t.begin(), t.end(), ins.at(0)) != t.end();
}

// One substitution step, or nullopt when no rule applies.
std::optional<TextInstruction> substitute(const TextInstruction& ins) {
  const std::string& op = ins[0];
  if (ins.size() == 3) {
    if (op == "add" && ins[2] == "1") return TextInstruction{"inc", ins[1]};
    if (op == "sub" && ins[2] == "1") return TextInstruction{"dec", ins[1]};
    if (op == "xor" && ins[1] == ins[2]) return TextInstruction{"mov", ins[1], "0"};
    if (op == "mov" && ins[2] == "0") return TextInstruction{"xor", ins[1], ins[1]};
    if (op == "shl" && ins[2] == "1") return TextInstruction{"add", ins[1], ins[1]};
    if (op == "add" && ins[1] == ins[2]) return TextInstruction{"shl", ins[1], "1"};
  } else if (ins.size() == 2 && is_general(ins[1])) {
    if (op == "inc") return TextInstruction{"add", ins[1], "1"};
    if (op == "dec") return TextInstruction{"sub", ins[1], "1"};
  }
  return std::nullopt;
}

}  // namespace

TextFunction swap_commutative(const TextFunction& f) {
  TextFunction out = f;
  for (auto& block : out)
    for (auto& ins : block)
      if (ins.size() == 3 && ins[0] == "test") std::swap(ins[1], ins[2]);
  return out;
}

TextFunction apply_transform(const TextFunction& f, CloneTransform kind, Rng& rng) {
  TextFunction out = f;
  switch (kind) {
    case CloneTransform::rename: {
      std::vector<std::string> image = ToyIsa::general_registers();
      // Resample until the bijection moves something.
      do rng.shuffle(image);
      while (image == ToyIsa::general_registers());
      std::map<std::string, std::string> map;
      for (std::size_t i = 0; i < image.size(); ++i) map[ToyIsa::general_registers()[i]] = image[i];
      for (auto& block : out)
        for (auto& ins : block)
          for (std::size_t k = 1; k < ins.size(); ++k)
            if (auto it = map.find(ins[k]); it != map.end()) ins[k] = it->second;
      break;
    }
    case CloneTransform::swap:
      out = swap_commutative(f);
      break;
    case CloneTransform::substitute:
      for (auto& block : out)
        for (auto& ins : block)
          if (rng.bernoulli(0.5))
            if (auto s = substitute(ins)) ins = *s;
      break;
    case CloneTransform::nop: {
      if (out.empty()) break;
      auto& block = out[rng.index(out.size())];
      std::size_t limit = block.size();
      while (limit > 0 && is_terminator(block[limit - 1])) --limit;
      const std::size_t at = rng.index(limit + 1);
      block.insert(block.begin() + static_cast<std::ptrdiff_t>(at), TextInstruction{"nop"});
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Generator

std::string ToyGenerator::reg() {
  const auto& g = ToyIsa::general_registers();
  return g[rng_.index(g.size())];
}

std::string ToyGenerator::imm() {
  const auto& v = ToyIsa::immediates();
  return v[rng_.index(v.size())];
}

void ToyGenerator::idiom(TextBlock& out, bool malicious) {
  idiom(out, malicious, rng_.index(malicious ? 3 : 9));
}

void ToyGenerator::idiom(TextBlock& out, bool malicious, std::size_t which) {
  std::string a = reg(), b = reg();
  while (b == a) b = reg();
  if (malicious) {
    switch (which) {
      case 0:  // decoder step
        out.push_back({"mov", a, imm()});
        out.push_back({"xor", b, a});
        out.push_back({"shr", a, "1"});
        out.push_back({"dec", a});
        return;
      case 1:  // system call
        out.push_back({"mov", "eax", imm()});
        out.push_back({"int", "0x80"});
        return;
      default:
        out.push_back({"mul", a});
        out.push_back({"div", b});
        out.push_back({"xor", a, b});
        return;
    }
  }
  switch (which) {
    case 0:
      out.push_back({"xor", a, a});
      return;
    case 1:
      out.push_back({"mov", a, imm()});
      return;
    case 2:
      out.push_back({"mov", a, b});
      out.push_back({"add", a, imm()});
      return;
    case 3:
      out.push_back(rng_.bernoulli(0.5) ? TextInstruction{"add", a, "1"} : TextInstruction{"inc", a});
      return;
    case 4:
      out.push_back({"push", a});
      out.push_back({"call", "func"});
      out.push_back({"add", "esp", "4"});
      return;
    case 5:
      out.push_back({"lea", a, b});
      out.push_back({"sub", a, imm()});
      return;
    case 6:
      out.push_back({"and", a, imm()});
      out.push_back({"or", a, b});
      return;
    case 7:
      out.push_back({"shl", a, "1"});
      out.push_back({"add", a, b});
      return;
    default:
      out.push_back({"push", a});
      out.push_back({"mov", a, b});
      out.push_back({"pop", a});
      return;
  }
}

namespace {

const std::vector<std::string>& snippet_opcodes() {
  static const std::vector<std::string> v = {"mov", "add", "sub", "and", "or", "xor", "lea", "shl", "shr"};
  return v;
}

std::vector<std::string> random_snippet(Rng& rng) {
  std::vector<std::string> ops(1 + rng.index(3));
  for (auto& op : ops) op = snippet_opcodes()[rng.index(snippet_opcodes().size())];
  return ops;
}

}  // namespace

// Free-form arithmetic over fixed opcodes with fresh operands.
void ToyGenerator::snippet(TextBlock& out, const std::vector<std::string>& ops) {
  for (const auto& op : ops) {
    const std::string a = reg();
    out.push_back({op, a, (op == "shl" || op == "shr") ? imm() : (rng_.bernoulli(0.5) ? reg() : imm())});
  }
}

void ToyGenerator::terminator(TextBlock& out) { terminator(out, rng_.index(3)); }

void ToyGenerator::terminator(TextBlock& out, std::size_t which) {
  std::string a = reg(), b = reg();
  while (b == a) b = reg();
  switch (which) {
    case 0:
      out.push_back({"cmp", a, imm()});
      out.push_back({"jne", "loc"});
      return;
    case 1:
      out.push_back({"test", a, b});
      out.push_back({"je", "loc"});
      return;
    default:
      out.push_back({"jmp", "loc"});
      return;
  }
}

TextBlock ToyGenerator::block() {
  TextBlock b;
  const std::size_t n = 1 + rng_.index(3);
  for (std::size_t i = 0; i < n; ++i) idiom(b, rng_.bernoulli(0.1));
  terminator(b);
  return b;
}

namespace {

// Functions come in families with a fixed shape. A slot is an idiom or a
// run of snippet opcodes; instances draw fresh registers and immediates and
// occasionally swap one slot for something else.
struct Slot {
  enum Kind { benign, malicious, snippet } kind = benign;
  std::size_t which = 0;
  std::vector<std::string> ops;
};

struct FamilyBlock {
  std::vector<Slot> slots;
  std::size_t terminator = 0;
};

struct Family {
  bool malicious = false;
  std::vector<FamilyBlock> blocks;
};

constexpr std::size_t kBenignFamilies = 6;
constexpr std::size_t kMaliciousFamilies = 4;
constexpr double kSlotVariation = 0.15;

Slot random_slot(Rng& rng, bool malicious) {
  Slot s;
  if (malicious && rng.bernoulli(0.5)) {
    s.kind = Slot::malicious;
    s.which = rng.index(3);
  } else if (rng.bernoulli(0.5)) {
    s.kind = Slot::snippet;
    s.ops = random_snippet(rng);
  } else {
    s.kind = Slot::benign;
    s.which = rng.index(9);
  }
  return s;
}

// The same for every corpus seed: the families play the part of a fixed
// code base that corpora sample from.
const std::vector<Family>& families() {
  static const std::vector<Family> v = [] {
    Rng rng(0x5eed'f00dULL);
    std::vector<Family> out;
    for (std::size_t i = 0; i < kBenignFamilies + kMaliciousFamilies; ++i) {
      Family f;
      f.malicious = i >= kBenignFamilies;
      f.blocks.resize(2 + rng.index(4));
      for (auto& b : f.blocks) {
        b.slots.resize(1 + rng.index(3));
        for (auto& slot : b.slots) slot = random_slot(rng, f.malicious);
        b.terminator = rng.index(3);
      }
      // A malicious family shows at least one malicious idiom.
      if (f.malicious) {
        bool any = false;
        for (const auto& b : f.blocks)
          for (const auto& slot : b.slots) any = any || slot.kind == Slot::malicious;
        if (!any) f.blocks[0].slots[0] = {Slot::malicious, rng.index(3), {}};
      }
      out.push_back(std::move(f));
    }
    return out;
  }();
  return v;
}

}  // namespace

std::size_t ToyGenerator::family_count() { return families().size(); }

bool ToyGenerator::family_is_malicious(std::size_t family) { return families().at(family).malicious; }

TextFunction ToyGenerator::function(bool malicious) {
  return function_of(malicious ? kBenignFamilies + rng_.index(kMaliciousFamilies) : rng_.index(kBenignFamilies));
}

TextFunction ToyGenerator::function_of(std::size_t family) {
  const Family& fam = families().at(family);
  TextFunction f;
  for (std::size_t k = 0; k < fam.blocks.size(); ++k) {
    TextBlock b;
    if (k == 0) {
      b.push_back({"push", "ebp"});
      b.push_back({"mov", "ebp", "esp"});
    }
    for (const Slot& fixed : fam.blocks[k].slots) {
      const Slot slot = rng_.bernoulli(kSlotVariation) ? random_slot(rng_, false) : fixed;
      if (slot.kind == Slot::snippet)
        snippet(b, slot.ops);
      else
        idiom(b, slot.kind == Slot::malicious, slot.which);
    }
    if (k + 1 == fam.blocks.size()) {
      b.push_back({"mov", "esp", "ebp"});
      b.push_back({"pop", "ebp"});
      b.push_back({"ret"});
    } else {
      terminator(b, fam.blocks[k].terminator);
    }
    f.push_back(std::move(b));
  }
  return f;
}

TextFunction ToyGenerator::clone(const TextFunction& f) {
  TextFunction out = apply_transform(f, CloneTransform::rename, rng_);
  out = apply_transform(out, CloneTransform::substitute, rng_);
  if (rng_.bernoulli(0.5)) out = apply_transform(out, CloneTransform::swap, rng_);
  const std::size_t nops = rng_.index(3);
  for (std::size_t i = 0; i < nops; ++i) out = apply_transform(out, CloneTransform::nop, rng_);
  if (out == f) out = apply_transform(out, CloneTransform::nop, rng_);
  return out;
}

namespace {

const std::vector<std::string>& common_strings() {
  static const std::vector<std::string> v = {
      "KERNEL32.dll", "GetProcAddress", "LoadLibraryA", ".data", ".rdata", "Sleep",
      "Microsoft Corporation", "FileVersion", "ProductName", "CompanyName", "LCMapStringW",
      "GetLastError", "!This program cannot be run in DOS mode.", "Runtime Error!",
      "SunMonTueWedThuFriSat", "January", "February", "(null)", "CorExitProcess", "mscoree.dll",
      "EncodePointer", "DecodePointer", "InitializeCriticalSection", "HeapAlloc", "HeapFree",
      "CreateFileA", "CloseHandle", "ExitProcess", "GetModuleHandleW", "IsDebuggerPresent",
      "QueryPerformanceCounter", "GetTickCount", "TerminateProcess", "GetCurrentProcess",
      "user32.dll", "advapi32.dll", "LegalCopyright", "OriginalFilename", "VS_VERSION_INFO",
      "StringFileInfo"};
  return v;
}

const std::vector<std::string>& suspicious_strings() {
  static const std::vector<std::string> v = {
      "Password", "cmd.exe /c", "Software\\Microsoft\\Windows\\CurrentVersion\\Run",
      "keylog.txt", "http://update-check.example/gate.php"};
  return v;
}

struct DllPool {
  const char* name;
  std::vector<std::string> functions;
};

const std::vector<DllPool>& dll_pool() {
  static const std::vector<DllPool> v = {
      {"KERNEL32.dll",
       {"WriteFile", "CreateFileA", "Sleep", "GetLastError", "ExitProcess", "VirtualAlloc",
        "LoadLibraryA", "GetProcAddress", "CloseHandle", "HeapAlloc", "LCMapStringW",
        "GetModuleHandleW", "GetTickCount", "ReadFile"}},
      {"msvcrt.dll", {"initterm", "malloc", "free", "printf", "memcpy", "strlen", "exit"}},
      {"USER32.dll", {"MessageBoxA", "GetDC", "ReleaseDC", "CreateWindowExW", "DispatchMessageW"}},
      {"ADVAPI32.dll", {"RegOpenKeyExA", "RegSetValueExA", "OpenProcessToken"}},
      {"WS2_32.dll", {"connect", "send", "recv", "socket"}}};
  return v;
}

std::string random_token(Rng& rng, std::size_t length) {
  static const char alphabet[] = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.";
  std::string s;
  for (std::size_t i = 0; i < length; ++i) s.push_back(alphabet[rng.index(sizeof alphabet - 1)]);
  return s;
}

std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.index(hi - lo + 1); }

// Picks up to `n` distinct functions of `pool`, with `forced` first when set.
std::vector<std::string> pick(Rng& rng, const std::vector<std::string>& pool, std::size_t n,
                              const std::vector<std::pair<std::string, double>>& forced = {}) {
  std::vector<std::string> out;
  for (const auto& [name, p] : forced)
    if (rng.bernoulli(p)) out.push_back(name);
  std::vector<std::string> rest = pool;
  rng.shuffle(rest);
  for (const auto& f : rest) {
    if (out.size() >= n) break;
    if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
  }
  return out;
}

}  // namespace

SampleRecord ToyGenerator::executable(const std::string& id, bool malicious,
                                      Visibility& visibility) {
  if (!malicious) {
    visibility = Visibility::none;
  } else {
    const double u = rng_.uniform();
    visibility = u < 0.4 ? Visibility::code : u < 0.8 ? Visibility::statics : Visibility::both;
  }
  const bool bad_code = visibility == Visibility::code || visibility == Visibility::both;
  const bool bad_static = visibility == Visibility::statics || visibility == Visibility::both;

  SampleRecord r;
  r.id = id;
  r.label = malicious ? 1 : 0;

  const std::size_t functions = between(rng_, 3, 6);
  std::vector<bool> bad(functions, false);
  if (bad_code) {
    // Two distinct functions carry the malicious idioms.
    const std::size_t first = rng_.index(functions);
    const std::size_t second = (first + 1 + rng_.index(functions - 1)) % functions;
    bad[first] = bad[second] = true;
  }
  std::uint32_t address = 0x401000;
  for (std::size_t i = 0; i < functions; ++i) {
    r.functions.push_back(function(bad[i]));
    char name[32];
    std::snprintf(name, sizeof name, "sub_%X", address);
    r.function_names.emplace_back(name);
    address += 0x10 * static_cast<std::uint32_t>(between(rng_, 4, 40));
  }

  // Printable strings: counts overlap between the profiles on purpose.
  const auto& common = common_strings();
  const std::size_t n_common = bad_static ? between(rng_, 2, 14) : between(rng_, 8, 30);
  const std::size_t n_uncommon = bad_static ? between(rng_, 3, 20) : between(rng_, 0, 6);
  for (std::size_t i = 0; i < n_common; ++i) {
    // Skewed towards the front of the pool.
    const std::size_t k = std::min(rng_.index(common.size()), rng_.index(common.size()));
    r.strings.push_back(common[k]);
  }
  for (std::size_t i = 0; i < n_uncommon; ++i) r.strings.push_back(random_token(rng_, between(rng_, 5, 12)));
  for (const auto& s : suspicious_strings())
    if (rng_.bernoulli(bad_static ? 0.4 : 0.03)) r.strings.push_back(s);
  rng_.shuffle(r.strings);

  const auto& dlls = dll_pool();
  if (bad_static) {
    r.imports.push_back({dlls[0].name, pick(rng_, dlls[0].functions, between(rng_, 1, 4),
                                            {{"LoadLibraryA", 0.7}, {"WriteFile", 0.6}})});
    for (std::size_t d : {3u, 4u})
      if (rng_.bernoulli(0.5)) r.imports.push_back({dlls[d].name, pick(rng_, dlls[d].functions, between(rng_, 1, 2))});
  } else {
    r.imports.push_back({dlls[0].name, pick(rng_, dlls[0].functions, between(rng_, 4, 10),
                                            {{"LCMapStringW", 0.6}})});
    r.imports.push_back({dlls[1].name, pick(rng_, dlls[1].functions, between(rng_, 2, 5),
                                            {{"initterm", 0.7}})});
    if (rng_.bernoulli(0.6)) r.imports.push_back({dlls[2].name, pick(rng_, dlls[2].functions, between(rng_, 1, 4))});
    if (rng_.bernoulli(0.2)) r.imports.push_back({dlls[3].name, pick(rng_, dlls[3].functions, 1)});
  }

  // Header values; entropies drive the derived mean/max fields.
  const std::size_t sections = bad_static ? between(rng_, 3, 5) : between(rng_, 4, 6);
  std::vector<double> entropy(sections);
  for (double& h : entropy) h = rng_.uniform(3.5, 6.6);
  if (bad_static && rng_.bernoulli(0.85)) entropy[rng_.index(sections)] = rng_.uniform(7.0, 7.95);
  if (!bad_static && rng_.bernoulli(0.1)) entropy[rng_.index(sections)] = rng_.uniform(6.6, 7.4);
  double mean = 0, max = 0;
  for (double h : entropy) {
    mean += h;
    max = std::max(max, h);
  }
  mean /= static_cast<double>(sections);
  const double code_size = 0x200 * static_cast<double>(between(rng_, 8, 400));
  const double init_size = 0x200 * static_cast<double>(between(rng_, 4, 200));
  const double image = 0x1000 * static_cast<double>(between(rng_, 16, 600));
  r.header = {
      0x14c,
      static_cast<double>(sections),
      static_cast<double>(0x4A000000u + rng_.index(0x20000000u)),
      224,
      bad_static && rng_.bernoulli(0.5) ? 0x10f.0p0 : 0x102.0p0,
      static_cast<double>(bad_static ? between(rng_, 2, 10) : between(rng_, 9, 14)),
      static_cast<double>(rng_.index(40)),
      code_size,
      init_size,
      static_cast<double>(rng_.bernoulli(0.3) ? 0x200 * between(rng_, 1, 20) : 0),
      static_cast<double>(0x1000 + 0x10 * rng_.index(0x4000)),
      0x400000,
      0x1000,
      0x200,
      static_cast<double>(rng_.bernoulli(bad_static ? 0.6 : 0.15) ? 5 : 6),
      static_cast<double>(rng_.bernoulli(0.3) ? 1 : 0),
      0,
      0,
      static_cast<double>(rng_.bernoulli(bad_static ? 0.6 : 0.15) ? 5 : 6),
      image,
      0x400,
      static_cast<double>(rng_.bernoulli(bad_static ? 0.8 : 0.3) ? 0 : 0x10000 + rng_.index(0x100000)),
      static_cast<double>(rng_.bernoulli(bad_static ? 0.85 : 0.6) ? 2 : 3),
      static_cast<double>(rng_.bernoulli(bad_static ? 0.5 : 0.1) ? 0 : 0x8140),
      0x100000,
      0x1000,
      0x100000,
      0x1000,
      16,
      mean,
      max};
  return r;
}

SyntheticCorpus generate_corpus(const CorpusSizes& sizes, std::uint64_t seed) {
  if (sizes.mam_blocks == 0 || sizes.clone_pairs == 0 || sizes.executables == 0)
    throw std::invalid_argument("corpus sizes must be positive");
  Rng root(seed);
  SyntheticCorpus c;

  ToyGenerator blocks(root.fork(1).next());
  c.mam_blocks.reserve(sizes.mam_blocks);
  for (std::size_t i = 0; i < sizes.mam_blocks; ++i) c.mam_blocks.push_back(blocks.block());

  // Half clones, half non-clones, interleaved then shuffled. The second
  // function of a non-clone comes from another family: two instances of one
  // family differ only in a few slots and are near-clones themselves.
  ToyGenerator pairs(root.fork(2).next());
  const std::size_t k = ToyGenerator::family_count();
  for (std::size_t i = 0; i < sizes.clone_pairs; ++i) {
    ClonePair p;
    const std::size_t fa = pairs.rng().index(k);
    p.a = pairs.function_of(fa);
    if (i % 2 == 0) {
      p.b = pairs.clone(p.a);
      p.label = 1;
    } else {
      p.b = pairs.function_of((fa + 1 + pairs.rng().index(k - 1)) % k);
      p.label = -1;
    }
    c.clone_pairs.push_back(std::move(p));
  }
  pairs.rng().shuffle(c.clone_pairs);

  ToyGenerator exes(root.fork(3).next());
  std::vector<bool> labels(sizes.executables);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2 == 1;
  exes.rng().shuffle(labels);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "sample_%05zu", i);
    Visibility v;
    c.executables.push_back(exes.executable(id, labels[i], v));
    c.visibility.push_back(v);
  }
  return c;
}

std::vector<TextFunction> corpus_functions(const SyntheticCorpus& corpus) {
  std::vector<TextFunction> out;
  for (const auto& b : corpus.mam_blocks) out.push_back({b});
  for (const auto& p : corpus.clone_pairs) {
    out.push_back(p.a);
    out.push_back(p.b);
  }
  for (const auto& e : corpus.executables) out.insert(out.end(), e.functions.begin(), e.functions.end());
  return out;
}

// ---------------------------------------------------------------------------
// Files

namespace {

const char* visibility_name(Visibility v) {
  switch (v) {
    case Visibility::none: return "none";
    case Visibility::code: return "code";
    case Visibility::statics: return "static";
    case Visibility::both: return "both";
  }
  return "none";
}

Visibility parse_visibility(const std::string& s) {
  if (s == "code") return Visibility::code;
  if (s == "static") return Visibility::statics;
  if (s == "both") return Visibility::both;
  return Visibility::none;
}

}  // namespace

nlohmann::json write_corpus(const std::filesystem::path& dir, const SyntheticCorpus& corpus,
                            const nlohmann::json& generator_config) {
  std::filesystem::create_directories(dir);
  std::vector<nlohmann::json> blocks, pairs, exes;
  for (const auto& b : corpus.mam_blocks) blocks.push_back({{"block", b}});
  for (const auto& p : corpus.clone_pairs) pairs.push_back({{"a", p.a}, {"b", p.b}, {"label", p.label}});
  for (std::size_t i = 0; i < corpus.executables.size(); ++i) {
    nlohmann::json j = corpus.executables[i];
    if (i < corpus.visibility.size()) j["visibility"] = visibility_name(corpus.visibility[i]);
    exes.push_back(std::move(j));
  }
  write_jsonl(dir / "mam_blocks.jsonl", blocks);
  write_jsonl(dir / "clone_pairs.jsonl", pairs);
  write_jsonl(dir / "executables.jsonl", exes);
  CodeVocabulary::build(corpus_functions(corpus)).save(dir / "vocab.json");

  nlohmann::json files = nlohmann::json::object();
  for (const char* f : {"mam_blocks.jsonl", "clone_pairs.jsonl", "executables.jsonl", "vocab.json"})
    files[f] = file_sha256(dir / f);
  nlohmann::json manifest = {
      {"generator", generator_config},
      {"counts",
       {{"mam_blocks", corpus.mam_blocks.size()},
        {"clone_pairs", corpus.clone_pairs.size()},
        {"executables", corpus.executables.size()}}},
      {"files", files}};
  write_json(dir / "manifest.json", manifest);
  return manifest;
}

SyntheticCorpus read_corpus(const std::filesystem::path& dir) {
  SyntheticCorpus c;
  for (const auto& j : read_jsonl(dir / "mam_blocks.jsonl"))
    c.mam_blocks.push_back(j.at("block").get<TextBlock>());
  for (const auto& j : read_jsonl(dir / "clone_pairs.jsonl")) {
    ClonePair p{j.at("a").get<TextFunction>(), j.at("b").get<TextFunction>(), j.at("label").get<int>()};
    if (p.label != 1 && p.label != -1)
      throw FormatError("clone pair label must be 1 or -1, got " + std::to_string(p.label));
    c.clone_pairs.push_back(std::move(p));
  }
  for (const auto& j : read_jsonl(dir / "executables.jsonl")) {
    c.executables.push_back(j.get<SampleRecord>());
    c.visibility.push_back(parse_visibility(j.value("visibility", "none")));
  }
  return c;
}

std::vector<std::vector<double>> class_opcode_histogram(const SyntheticCorpus& corpus) {
  const auto& ops = ToyIsa::opcodes();
  std::vector<std::vector<double>> table(2, std::vector<double>(ops.size(), 0.0));
  for (const auto& e : corpus.executables) {
    if (!e.label) continue;
    auto& row = table[*e.label == 1 ? 1 : 0];
    for (const auto& f : e.functions)
      for (const auto& b : f)
        for (const auto& ins : b) {
          const auto it = std::find(ops.begin(), ops.end(), ins.at(0));
          if (it != ops.end()) row[static_cast<std::size_t>(it - ops.begin())] += 1;
        }
  }
  return table;
}

ChiSquare chi_square_test(const std::vector<std::vector<double>>& table) {
  if (table.size() < 2) throw std::invalid_argument("chi-square: need at least two rows");
  const std::size_t cols = table[0].size();
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < cols; ++j) {
    double s = 0;
    for (const auto& row : table) s += row.at(j);
    if (s > 0) keep.push_back(j);
  }
  if (keep.size() < 2) throw std::invalid_argument("chi-square: need at least two non-empty columns");
  std::vector<double> row_sum(table.size(), 0.0), col_sum(keep.size(), 0.0);
  double total = 0;
  for (std::size_t i = 0; i < table.size(); ++i)
    for (std::size_t k = 0; k < keep.size(); ++k) {
      row_sum[i] += table[i][keep[k]];
      col_sum[k] += table[i][keep[k]];
      total += table[i][keep[k]];
    }
  ChiSquare r;
  for (std::size_t i = 0; i < table.size(); ++i) {
    if (row_sum[i] == 0) throw std::invalid_argument("chi-square: empty row");
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const double e = row_sum[i] * col_sum[k] / total;
      const double d = table[i][keep[k]] - e;
      r.statistic += d * d / e;
    }
  }
  r.dof = static_cast<double>((table.size() - 1) * (keep.size() - 1));
  r.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(r.dof), r.statistic));
  return r;
}

}  // namespace imad
