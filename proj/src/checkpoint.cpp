#include "movl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

#include "movl/error.hpp"

namespace movl {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'O', 'V', 'L', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

}  // namespace

std::int64_t NamedTensor::numel() const {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256: digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::vector<std::uint8_t> serialize_data(const ParameterMap& params) {
  std::size_t total = 0;
  for (const auto& [name, t] : params) total += t.values.size() * sizeof(float);
  std::vector<std::uint8_t> out(total);
  std::size_t offset = 0;
  for (const auto& [name, t] : params) {
    std::memcpy(out.data() + offset, t.values.data(), t.values.size() * sizeof(float));
    offset += t.values.size() * sizeof(float);
  }
  return out;
}

std::string parameters_hash(const ParameterMap& params) { return sha256_hex(serialize_data(params)); }

const NamedTensor& require_tensor(const ParameterMap& params, const std::string& name) {
  const auto it = params.find(name);
  if (it == params.end()) throw CheckpointError("checkpoint: missing tensor '" + name + "'");
  return it->second;
}

void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  json tensors = json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (t.numel() != static_cast<std::int64_t>(t.values.size())) {
      throw CheckpointError("checkpoint: tensor '" + name + "' shape does not match its data");
    }
    const std::size_t bytes = t.values.size() * sizeof(float);
    tensors[name] = {{"shape", t.shape}, {"dtype", "float32"}, {"byte_offset", offset},
                     {"byte_length", bytes}};
    offset += bytes;
  }
  const auto data = serialize_data(ckpt.tensors);
  json header;
  header["format_version"] = Checkpoint::kFormatVersion;
  header["tensors"] = tensors;
  header["data_sha256"] = sha256_hex(data);
  header["attributes"] = ckpt.attributes;
  const std::string text = header.dump();
  const auto len = static_cast<std::uint64_t>(text.size());

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  if (!out) throw CheckpointError("checkpoint: write failed for " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: missing file " + path.string());
  const std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint: bad magic in " + path.string());
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  if (16 + len > bytes.size()) throw CheckpointError("checkpoint: truncated header in " + path.string());
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(len));
  } catch (const json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint: header is not JSON: ") + e.what());
  }
  if (header.value("format_version", 0) != Checkpoint::kFormatVersion) {
    throw CheckpointError("checkpoint: unsupported format_version in " + path.string());
  }
  const std::span<const std::uint8_t> data(reinterpret_cast<const std::uint8_t*>(bytes.data()) + 16 + len,
                                           bytes.size() - 16 - len);
  if (sha256_hex(data) != header.value("data_sha256", std::string())) {
    throw CheckpointError("checkpoint: data SHA-256 mismatch in " + path.string());
  }
  Checkpoint ckpt;
  ckpt.attributes = header.value("attributes", json::object());
  for (const auto& [name, info] : header.at("tensors").items()) {
    if (info.value("dtype", std::string()) != "float32") {
      throw CheckpointError("checkpoint: tensor '" + name + "' has unsupported dtype");
    }
    NamedTensor t;
    t.shape = info.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = info.at("byte_offset").get<std::size_t>();
    const auto count = static_cast<std::size_t>(t.numel());
    if (offset + count * sizeof(float) > data.size()) {
      throw CheckpointError("checkpoint: tensor '" + name + "' runs past the data region");
    }
    t.values.resize(count);
    std::memcpy(t.values.data(), data.data() + offset, count * sizeof(float));
    ckpt.tensors.emplace(name, std::move(t));
  }
  return ckpt;
}

}  // namespace movl
