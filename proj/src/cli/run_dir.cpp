#include "run_dir.hpp"

#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>

#include "e2kd/archive.hpp"
#include "e2kd/cli.hpp"
#include "e2kd/errors.hpp"

#ifndef E2KD_VERSION
#define E2KD_VERSION "unknown"
#endif

namespace e2kd::cli {

fs::path output_path(const std::string& name) {
  fs::path p(name);
  if (p.is_absolute()) return p;
  const char* root = std::getenv(kOutputRootEnv);
  return (root && *root) ? fs::path(root) / p : fs::current_path() / p;
}

std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunDir::RunDir(const std::string& name, bool force, std::string command_line) : path_(output_path(name)) {
  if (fs::exists(path_)) {
    if (!force) throw UsageError("output directory '" + path_.string() + "' exists; pass --force to overwrite");
    fs::remove_all(path_);
  }
  if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
  // create_directory reports false when another process won the race.
  if (!fs::create_directory(path_)) throw UsageError("output directory '" + path_.string() + "' already exists");
  manifest_ = {{"command_line", std::move(command_line)},
               {"code_version", E2KD_VERSION},
               {"config", json::object()},
               {"seeds", json::object()},
               {"inputs", json::object()},
               {"started_at", utc_timestamp(std::chrono::system_clock::now())}};
}

void RunDir::write_json(const std::string& file, const json& value) const {
  write_file(path_ / file, value.dump(2) + "\n");
}

void RunDir::write_text(const std::string& file, const std::string& text) const { write_file(path_ / file, text); }

void RunDir::add_input(const std::string& key, const fs::path& file) {
  manifest_["inputs"][key] = {{"path", fs::absolute(file).string()}, {"digest", file_digest(file)}};
}

void RunDir::finish() {
  manifest_["finished_at"] = utc_timestamp(std::chrono::system_clock::now());
  write_json("manifest.json", manifest_);
}

void write_file(const fs::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw StorageError("cannot write '" + path.string() + "'");
    f << text;
    if (!f) throw StorageError("write failed for '" + path.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json read_config(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

json read_artifact_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

fs::path resolve_input(const std::string& arg, const std::string& default_file) {
  fs::path p(arg);
  if (!fs::exists(p) && !p.is_absolute()) p = output_path(arg);
  if (fs::is_directory(p)) p /= default_file;
  if (!fs::exists(p)) throw DataError("input '" + arg + "' not found (looked for '" + p.string() + "')");
  return p;
}

}  // namespace e2kd::cli
