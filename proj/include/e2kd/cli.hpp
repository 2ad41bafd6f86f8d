#pragma once

// Experiment harness: generate, train-teacher, freeze, distill, sweep,
// evaluate and report. Every command writes into a fresh output directory
// holding exactly one manifest.json.

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "e2kd/errors.hpp"

namespace e2kd::cli {

using json = nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 1, kIntegrity = 2, kTraining = 3 };

/// Command-line misuse detected after parsing (existing output directory,
/// malformed override).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Environment variable naming the root for relative output paths.
inline constexpr const char* kOutputRootEnv = "E2KD_OUTPUT_ROOT";

/// Runs one command; `args` excludes the program name. Never throws.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Applies "a.b.c=value" overrides to a JSON object. The value is parsed as
/// JSON when possible and taken as a string otherwise.
json apply_overrides(json config, const std::vector<std::string>& overrides);

/// Where an output name lands: absolute paths are kept, anything else goes
/// under $E2KD_OUTPUT_ROOT (or the working directory when unset).
std::filesystem::path output_path(const std::string& name);

/// Maps an exception to its exit code.
int exit_code_for(const std::exception& e);

}  // namespace e2kd::cli
