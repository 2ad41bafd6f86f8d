#pragma once

// Single-file container for named tensors plus a JSON metadata block.
//
// Layout:  "E2KDARC1" | u64 header length (LE) | header JSON | raw blob
// The header lists every array with dtype, shape, byte offset and size.
// Tensors are stored contiguous in native (little-endian) byte order, so a
// write/read cycle is bit-exact.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace e2kd {

using json = nlohmann::json;

class ArchiveWriter {
 public:
  void set_meta(json meta) { meta_ = std::move(meta); }
  json& meta() { return meta_; }

  /// Adds a tensor under `name`; names must be unique.
  void add(const std::string& name, const torch::Tensor& tensor);

  /// Writes atomically (temp file + rename). Throws StorageError.
  void write(const std::filesystem::path& path) const;

 private:
  json meta_ = json::object();
  std::vector<std::pair<std::string, torch::Tensor>> arrays_;
};

class Archive {
 public:
  /// Reads a whole archive into memory. Throws StorageError on malformed input.
  static Archive read(const std::filesystem::path& path);

  const json& meta() const { return meta_; }
  bool contains(const std::string& name) const { return arrays_.count(name) > 0; }
  torch::Tensor get(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  json meta_;
  std::map<std::string, torch::Tensor> arrays_;
};

/// Hex SHA-256 of a file's bytes.
std::string file_digest(const std::filesystem::path& path);

/// Hex SHA-256 of an in-memory byte string.
std::string bytes_digest(std::string_view bytes);

}  // namespace e2kd
