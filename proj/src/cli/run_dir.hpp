#pragma once

#include <chrono>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

namespace e2kd::cli {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Output directory of one command. Created on construction (refusing an
/// existing one unless forced); the manifest is written by finish(), so a
/// directory without manifest.json is an incomplete run.
class RunDir {
 public:
  RunDir(const std::string& name, bool force, std::string command_line);

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& file) const { return path_ / file; }

  void write_json(const std::string& file, const json& value) const;
  void write_text(const std::string& file, const std::string& text) const;

  /// Records an input artifact with its content digest.
  void add_input(const std::string& key, const fs::path& file);
  void set_config(json config) { manifest_["config"] = std::move(config); }
  void set_seeds(json seeds) { manifest_["seeds"] = std::move(seeds); }
  void set_field(const std::string& key, json value) { manifest_[key] = std::move(value); }

  void finish();

 private:
  fs::path path_;
  json manifest_;
};

/// Atomic text write (temp file + rename).
void write_file(const fs::path& path, const std::string& text);
std::string read_file(const fs::path& path);

/// JSON config file; unreadable or malformed files are ConfigError.
json read_config(const fs::path& path);
/// JSON artifact inside a run directory; problems are DataError.
json read_artifact_json(const fs::path& path);

/// Existing input path: taken as given, else under the output root.
/// A directory resolves to `default_file` inside it. Missing -> DataError.
fs::path resolve_input(const std::string& arg, const std::string& default_file);

std::string utc_timestamp(std::chrono::system_clock::time_point t);

}  // namespace e2kd::cli
