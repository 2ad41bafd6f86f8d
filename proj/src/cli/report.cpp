#include "report.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

namespace e2kd::cli {
namespace {

const std::vector<std::string> kMetricColumns = {
    "accuracy",     "agreement", "id_accuracy",        "ood_accuracy",    "id_agreement",
    "ood_agreement", "epg",      "iou",                "localization_count", "degenerate_maps",
    "estimated_period", "shift_images", "n_id",        "n_ood"};

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

json cell(const ReportRow& row, const std::string& column) {
  if (column == "run") return row.label;
  if (column.rfind("group:", 0) == 0) {
    const auto& groups = row.report.value("per_group_accuracy", json::object());
    auto name = column.substr(6);
    return groups.contains(name) ? groups.at(name) : json(nullptr);
  }
  return row.report.contains(column) ? row.report.at(column) : json(nullptr);
}

// Numbers keep their shortest round-trip form so the table passes stored
// values through unchanged.
std::string csv_value(const json& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

std::string text_value(const json& v) {
  if (v.is_null()) return "-";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v.get<double>());
    return buf;
  }
  return v.dump();
}

std::string escape_xml(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Frame {
  double width = 640, height = 400, left = 60, right = 160, top = 30, bottom = 50;
  double plot_w() const { return width - left - right; }
  double plot_h() const { return height - top - bottom; }
};

std::string svg_open(const Frame& f, const std::string& title) {
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << f.left << "\" y=\"18\" font-size=\"13\">" << escape_xml(title) << "</text>\n";
  return s.str();
}

void y_axis(std::ostringstream& s, const Frame& f, double lo, double hi) {
  for (int i = 0; i <= 4; ++i) {
    double v = lo + (hi - lo) * i / 4.0;
    double y = f.top + f.plot_h() * (1.0 - i / 4.0);
    s << "<line x1=\"" << f.left << "\" x2=\"" << f.left + f.plot_w() << "\" y1=\"" << fmt(y) << "\" y2=\"" << fmt(y)
      << "\" stroke=\"#ddd\"/>\n"
      << "<text x=\"" << f.left - 6 << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">" << fmt(v) << "</text>\n";
  }
}

void legend(std::ostringstream& s, const Frame& f, const std::vector<ReportRow>& rows) {
  for (size_t i = 0; i < rows.size(); ++i) {
    double y = f.top + 14.0 * static_cast<double>(i);
    double x = f.left + f.plot_w() + 12;
    s << "<rect x=\"" << x << "\" y=\"" << fmt(y) << "\" width=\"10\" height=\"10\" fill=\"" << kPalette[i % 8]
      << "\"/>\n<text x=\"" << x + 14 << "\" y=\"" << fmt(y + 9) << "\">" << escape_xml(rows[i].label) << "</text>\n";
  }
}

}  // namespace

std::vector<std::string> table_columns(const std::vector<ReportRow>& rows) {
  std::vector<std::string> cols = {"run"};
  cols.insert(cols.end(), kMetricColumns.begin(), kMetricColumns.end());
  std::set<std::string> groups;
  for (const auto& r : rows) {
    const auto per_group = r.report.value("per_group_accuracy", json::object());
    for (const auto& [g, _] : per_group.items()) groups.insert(g);
  }
  for (const auto& g : groups) cols.push_back("group:" + g);
  return cols;
}

json table_json(const std::vector<ReportRow>& rows) {
  auto cols = table_columns(rows);
  json out = {{"columns", cols}, {"rows", json::array()}};
  for (const auto& r : rows) {
    json rec = json::object();
    for (const auto& c : cols) rec[c] = cell(r, c);
    out["rows"].push_back(rec);
  }
  return out;
}

std::string table_csv(const std::vector<ReportRow>& rows) {
  auto cols = table_columns(rows);
  std::ostringstream s;
  for (size_t i = 0; i < cols.size(); ++i) s << (i ? "," : "") << cols[i];
  s << "\n";
  for (const auto& r : rows) {
    for (size_t i = 0; i < cols.size(); ++i) s << (i ? "," : "") << csv_value(cell(r, cols[i]));
    s << "\n";
  }
  return s.str();
}

std::string table_text(const std::vector<ReportRow>& rows) {
  auto cols = table_columns(rows);
  std::vector<std::vector<std::string>> grid = {cols};
  for (const auto& r : rows) {
    std::vector<std::string> line;
    for (const auto& c : cols) line.push_back(text_value(cell(r, c)));
    grid.push_back(std::move(line));
  }
  std::vector<size_t> width(cols.size(), 0);
  for (const auto& line : grid) {
    for (size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  }
  std::ostringstream s;
  for (size_t k = 0; k < grid.size(); ++k) {
    for (size_t i = 0; i < cols.size(); ++i) {
      const auto& v = grid[k][i];
      if (i) s << "  ";
      // Left-align the run label, right-align numbers.
      if (i == 0) s << v << std::string(width[i] - v.size(), ' ');
      else s << std::string(width[i] - v.size(), ' ') << v;
    }
    s << "\n";
    if (k == 0) {
      size_t total = 0;
      for (auto w : width) total += w + 2;
      s << std::string(total - 2, '-') << "\n";
    }
  }
  return s.str();
}

std::string group_bars_svg(const std::vector<ReportRow>& rows) {
  std::vector<std::string> groups;
  for (const auto& c : table_columns(rows)) {
    if (c.rfind("group:", 0) == 0) groups.push_back(c.substr(6));
  }
  Frame f;
  std::ostringstream s;
  s << svg_open(f, "per-group accuracy");
  y_axis(s, f, 0.0, 1.0);
  const double slot = groups.empty() ? f.plot_w() : f.plot_w() / static_cast<double>(groups.size());
  const double bar = rows.empty() ? 0 : slot * 0.8 / static_cast<double>(rows.size());
  for (size_t g = 0; g < groups.size(); ++g) {
    double x0 = f.left + slot * static_cast<double>(g) + slot * 0.1;
    for (size_t r = 0; r < rows.size(); ++r) {
      auto v = cell(rows[r], "group:" + groups[g]);
      if (!v.is_number()) continue;
      double h = f.plot_h() * std::clamp(v.get<double>(), 0.0, 1.0);
      s << "<rect x=\"" << fmt(x0 + bar * static_cast<double>(r)) << "\" y=\"" << fmt(f.top + f.plot_h() - h)
        << "\" width=\"" << fmt(bar) << "\" height=\"" << fmt(h) << "\" fill=\"" << kPalette[r % 8] << "\"/>\n";
    }
    s << "<text x=\"" << fmt(x0 + slot * 0.4) << "\" y=\"" << fmt(f.top + f.plot_h() + 16)
      << "\" text-anchor=\"middle\">" << escape_xml(groups[g]) << "</text>\n";
  }
  legend(s, f, rows);
  s << "</svg>\n";
  return s.str();
}

std::string shift_curves_svg(const std::vector<ReportRow>& rows) {
  double max_t = 1, lo = 0.0;
  for (const auto& r : rows) {
    for (const auto& p : r.report.value("shift_curve", json::array())) {
      max_t = std::max(max_t, p.at(0).get<double>());
      lo = std::min(lo, p.at(1).get<double>());
    }
  }
  Frame f;
  std::ostringstream s;
  s << svg_open(f, "explanation similarity under diagonal shift");
  y_axis(s, f, lo, 1.0);
  for (int t = 0; t <= static_cast<int>(max_t); t += std::max(1, static_cast<int>(max_t) / 8)) {
    double x = f.left + f.plot_w() * t / max_t;
    s << "<text x=\"" << fmt(x) << "\" y=\"" << fmt(f.top + f.plot_h() + 16) << "\" text-anchor=\"middle\">" << t
      << "</text>\n";
  }
  s << "<text x=\"" << fmt(f.left + f.plot_w() / 2) << "\" y=\"" << fmt(f.height - 12)
    << "\" text-anchor=\"middle\">shift (pixels)</text>\n";
  for (size_t r = 0; r < rows.size(); ++r) {
    std::ostringstream pts;
    for (const auto& p : rows[r].report.value("shift_curve", json::array())) {
      double x = f.left + f.plot_w() * p.at(0).get<double>() / max_t;
      double y = f.top + f.plot_h() * (1.0 - (p.at(1).get<double>() - lo) / (1.0 - lo));
      pts << fmt(x) << "," << fmt(y) << " ";
    }
    s << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << kPalette[r % 8] << "\" points=\"" << pts.str()
      << "\"/>\n";
  }
  legend(s, f, rows);
  s << "</svg>\n";
  return s.str();
}

}  // namespace e2kd::cli
