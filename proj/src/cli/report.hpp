#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace e2kd::cli {

using json = nlohmann::json;

struct ReportRow {
  std::string label;      // unique, filesystem-safe
  std::filesystem::path dir;
  json report;            // the run's stored MetricsReport record
  std::string curve_tsv;  // the run's stored two-column curve table
};

/// Fixed metric columns followed by one "group:<name>" column per group
/// seen in any row (sorted).
std::vector<std::string> table_columns(const std::vector<ReportRow>& rows);

/// Machine-readable table: {"columns": [...], "rows": [{column: value}]}.
json table_json(const std::vector<ReportRow>& rows);
std::string table_csv(const std::vector<ReportRow>& rows);
std::string table_text(const std::vector<ReportRow>& rows);

std::string group_bars_svg(const std::vector<ReportRow>& rows);
std::string shift_curves_svg(const std::vector<ReportRow>& rows);

}  // namespace e2kd::cli
