#include "e2kd/archive.hpp"

#include <openssl/evp.h>

#include <array>
#include <cstring>
#include <fstream>
#include <sstream>

#include "e2kd/errors.hpp"

namespace e2kd {
namespace {

constexpr char kMagic[8] = {'E', '2', 'K', 'D', 'A', 'R', 'C', '1'};

std::string dtype_name(torch::Dtype dtype) {
  switch (dtype) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kInt32: return "i32";
    case torch::kUInt8: return "u8";
    case torch::kBool: return "bool";
    default: throw StorageError("archive: unsupported dtype " + std::string(c10::toString(dtype)));
  }
}

torch::Dtype dtype_from_name(const std::string& name) {
  if (name == "f32") return torch::kFloat32;
  if (name == "f64") return torch::kFloat64;
  if (name == "i64") return torch::kInt64;
  if (name == "i32") return torch::kInt32;
  if (name == "u8") return torch::kUInt8;
  if (name == "bool") return torch::kBool;
  throw StorageError("archive: unknown dtype tag '" + name + "'");
}

std::string to_hex(const unsigned char* data, size_t n) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(2 * n, '0');
  for (size_t i = 0; i < n; ++i) {
    out[2 * i] = kHex[data[i] >> 4];
    out[2 * i + 1] = kHex[data[i] & 0xf];
  }
  return out;
}

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new()) { EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr); }
  ~Sha256() { EVP_MD_CTX_free(ctx_); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(const void* data, size_t n) { EVP_DigestUpdate(ctx_, data, n); }
  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_, md.data(), &len);
    return to_hex(md.data(), len);
  }

 private:
  EVP_MD_CTX* ctx_;
};

}  // namespace

void ArchiveWriter::add(const std::string& name, const torch::Tensor& tensor) {
  for (const auto& [existing, _] : arrays_) {
    if (existing == name) throw StorageError("archive: duplicate array name '" + name + "'");
  }
  arrays_.emplace_back(name, tensor.detach().cpu().contiguous());
}

void ArchiveWriter::write(const std::filesystem::path& path) const {
  json header;
  header["meta"] = meta_;
  header["arrays"] = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : arrays_) {
    const uint64_t nbytes = t.numel() * t.element_size();
    header["arrays"].push_back({{"name", name},
                                {"dtype", dtype_name(t.scalar_type())},
                                {"shape", t.sizes().vec()},
                                {"offset", offset},
                                {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string header_text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw StorageError("archive: cannot open '" + tmp.string() + "' for writing");
    out.write(kMagic, sizeof(kMagic));
    const uint64_t header_len = header_text.size();
    out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (const auto& [name, t] : arrays_) {
      out.write(static_cast<const char*>(t.data_ptr()),
                static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw StorageError("archive: write failed for '" + path.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw StorageError("archive: cannot move into place '" + path.string() + "': " + ec.message());
}

Archive Archive::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("archive: cannot open '" + path.string() + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw StorageError("archive: '" + path.string() + "' is not an e2kd archive");
  }
  uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len > (uint64_t{1} << 32)) throw StorageError("archive: corrupt header length in '" + path.string() + "'");
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw StorageError("archive: truncated header in '" + path.string() + "'");

  Archive archive;
  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::exception& e) {
    throw StorageError("archive: bad header JSON in '" + path.string() + "': " + e.what());
  }
  archive.meta_ = header.value("meta", json::object());
  const auto blob_start = in.tellg();
  for (const auto& entry : header.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto offset = entry.at("offset").get<uint64_t>();
    const auto nbytes = entry.at("nbytes").get<uint64_t>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from_name(entry.at("dtype"))));
    if (static_cast<uint64_t>(t.numel() * t.element_size()) != nbytes) {
      throw StorageError("archive: size mismatch for array '" + name + "'");
    }
    in.seekg(blob_start + static_cast<std::streamoff>(offset));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw StorageError("archive: truncated data for array '" + name + "'");
    archive.arrays_.emplace(name, std::move(t));
  }
  return archive;
}

torch::Tensor Archive::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw StorageError("archive: missing array '" + name + "'");
  return it->second;
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  out.reserve(arrays_.size());
  for (const auto& [name, _] : arrays_) out.push_back(name);
  return out;
}

std::string file_digest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StorageError("digest: cannot open '" + path.string() + "'");
  Sha256 sha;
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    sha.update(buf.data(), static_cast<size_t>(in.gcount()));
  }
  return sha.hex();
}

std::string bytes_digest(std::string_view bytes) {
  Sha256 sha;
  sha.update(bytes.data(), bytes.size());
  return sha.hex();
}

}  // namespace e2kd
