// SPDX-License-Identifier: Apache-2.0

#include "imad/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace imad {

namespace {

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_)
      throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const nlohmann::json& config, const ParameterList& params) {
  std::string out = "IMAD";
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string cfg = config.dump();
  put_le<std::uint64_t>(out, cfg.size());
  out += cfg;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    const Shape& shape = p.tensor.shape();
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (std::size_t e : shape) put_le<std::uint64_t>(out, e);
    for (double v : p.tensor.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader in(bytes);
  if (in.take(4, "magic") != "IMAD") throw CheckpointError("not a checkpoint: bad magic");
  const auto version = in.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  const auto cfg_len = in.get<std::uint64_t>("config length");
  try {
    ck.config = nlohmann::json::parse(in.take(cfg_len, "config"));
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const auto count = in.get<std::uint32_t>("record count");
  for (std::uint32_t r = 0; r < count; ++r) {
    const auto name_len = in.get<std::uint32_t>("name length");
    std::string name = in.take(name_len, "name");
    const auto rank = in.get<std::uint32_t>("rank");
    Shape shape;
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(in.get<std::uint64_t>("extent"));
      n *= shape.back();
    }
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(in.get<std::uint64_t>("values"));
    ck.parameters.push_back({std::move(name), Tensor::from_data(shape, std::move(values))});
  }
  if (!in.done()) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& p : parameters)
    if (p.name == name) return &p.tensor;
  return nullptr;
}

void Checkpoint::load_into(const ParameterList& target) const {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : parameters) by_name[p.name] = &p.tensor;
  for (const auto& p : target) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (it->second->shape() != p.tensor.shape())
      throw CheckpointError("checkpoint parameter " + p.name + " has shape " +
                            shape_string(it->second->shape()) + ", model expects " +
                            shape_string(p.tensor.shape()));
    Tensor dst = p.tensor;
    std::copy(it->second->data().begin(), it->second->data().end(), dst.mutable_data().begin());
  }
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& config,
                     const ParameterList& params) {
  write_file(path, encode_checkpoint(config, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i)
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace imad
