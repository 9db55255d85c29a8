#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "valsteer/error.hpp"
#include "valsteer/leakage.hpp"

namespace valsteer {

namespace {

std::string num(double x) { return fmt::format("{:.17g}", x); }

// White at 0 to dark red at 1, clamped.
std::string ramp(double x) {
  const double t = std::isfinite(x) ? std::clamp(x, 0.0, 1.0) : 1.0;
  auto lerp = [t](int a, int b) { return static_cast<int>(std::lround(a + (b - a) * t)); };
  return fmt::format("#{:02x}{:02x}{:02x}", lerp(255, 165), lerp(255, 15), lerp(255, 21));
}

std::string xml_escape(std::string_view s) {
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

template <std::size_t R, std::size_t C>
std::string svg_heatmap(const std::array<std::array<double, C>, R>& m, const std::array<std::string, R>& row_names,
                        const std::array<std::string, C>& col_names, const std::string& title, bool grey_diagonal) {
  constexpr int cell = 64;
  constexpr int left = 150;
  constexpr int top = 150;
  const int width = left + static_cast<int>(C) * cell + 20;
  const int height = top + static_cast<int>(R) * cell + 20;
  std::string out;
  out += fmt::format(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\" "
      "font-family=\"sans-serif\" font-size=\"11\">\n",
      width, height, width, height);
  out += fmt::format("<text x=\"10\" y=\"20\" font-size=\"14\">{}</text>\n", xml_escape(title));
  for (std::size_t c = 0; c < C; ++c) {
    const int x = left + static_cast<int>(c) * cell + cell / 2;
    out += fmt::format(
        "<text class=\"col-label\" x=\"{}\" y=\"{}\" text-anchor=\"start\" transform=\"rotate(-60 {} {})\">{}</text>\n",
        x, top - 6, x, top - 6, xml_escape(col_names[c]));
  }
  for (std::size_t r = 0; r < R; ++r) {
    const int y = top + static_cast<int>(r) * cell;
    out += fmt::format("<text class=\"row-label\" x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n", left - 6,
                       y + cell / 2 + 4, xml_escape(row_names[r]));
    for (std::size_t c = 0; c < C; ++c) {
      const int x = left + static_cast<int>(c) * cell;
      const bool grey = grey_diagonal && r == c;
      out += fmt::format("<rect class=\"cell\" data-row=\"{}\" data-col=\"{}\" x=\"{}\" y=\"{}\" width=\"{}\" "
                         "height=\"{}\" fill=\"{}\" stroke=\"#ffffff\"/>\n",
                         r, c, x, y, cell, cell, grey ? std::string("#d0d0d0") : ramp(m[r][c]));
      out += fmt::format("<text class=\"annotation\" data-row=\"{}\" data-col=\"{}\" x=\"{}\" y=\"{}\" "
                         "text-anchor=\"middle\">{}</text>\n",
                         r, c, x + cell / 2, y + cell / 2 + 4, grey ? std::string("-") : fmt::format("{:.3f}", m[r][c]));
    }
  }
  out += "</svg>\n";
  return out;
}

std::array<std::string, kNumGroups> group_names() {
  std::array<std::string, kNumGroups> out;
  for (std::size_t g = 0; g < kNumGroups; ++g) out[g] = std::string(name_of(kAllGroups[g]));
  return out;
}

std::array<std::string, kNumValues> value_names(std::string_view prefix = {}) {
  std::array<std::string, kNumValues> out;
  for (std::size_t i = 0; i < kNumValues; ++i) out[i] = std::string(prefix) + std::string(name_of(kAllValues[i]));
  return out;
}

template <std::size_t R, std::size_t C>
nlohmann::json matrix_json(const std::array<std::array<double, C>, R>& m) {
  auto out = nlohmann::json::array();
  for (const auto& row : m) out.push_back(row);
  return out;
}

template <std::size_t R, std::size_t C>
void matrix_from_json(const nlohmann::json& j, std::array<std::array<double, C>, R>& m) {
  VALSTEER_CHECK(j.is_array() && j.size() == R, ErrorCode::ParseError, "matrix has wrong row count");
  for (std::size_t r = 0; r < R; ++r) {
    VALSTEER_CHECK(j[r].is_array() && j[r].size() == C, ErrorCode::ParseError, "matrix has wrong column count");
    for (std::size_t c = 0; c < C; ++c) m[r][c] = j[r][c].get<double>();
  }
}

template <std::size_t R, std::size_t C>
void text_matrix(std::string& out, const std::string& title, const std::array<std::array<double, C>, R>& m,
                 const std::array<std::string, R>& rows, const std::array<std::string, C>& cols) {
  out += title + "\n";
  out += fmt::format("{:<22}", "");
  for (const auto& c : cols) out += fmt::format(" {:>14}", c.substr(0, 14));
  out += "\n";
  for (std::size_t r = 0; r < R; ++r) {
    out += fmt::format("{:<22}", rows[r]);
    for (std::size_t c = 0; c < C; ++c) out += fmt::format(" {:>14.6f}", m[r][c]);
    out += "\n";
  }
  out += "\n";
}

template <std::size_t R, std::size_t C>
void csv_matrix(std::string& out, const std::string& section, const std::array<std::array<double, C>, R>& m,
                const std::array<std::string, R>& rows, const std::array<std::string, C>& cols) {
  out += "# " + section + "\n";
  out += "row";
  for (const auto& c : cols) out += "," + c;
  out += "\n";
  for (std::size_t r = 0; r < R; ++r) {
    out += rows[r];
    for (std::size_t c = 0; c < C; ++c) out += "," + num(m[r][c]);
    out += "\n";
  }
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_csv(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    cells.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return cells;
}

}  // namespace

ReportFormat report_format_from_string(std::string_view name) {
  if (name == "text") return ReportFormat::Text;
  if (name == "csv") return ReportFormat::Csv;
  if (name == "json") return ReportFormat::Json;
  if (name == "svg") return ReportFormat::Svg;
  throw Error(ErrorCode::UnsupportedFormat, "unsupported report format '" + std::string(name) + "'");
}

std::string_view extension_of(ReportFormat format) noexcept {
  switch (format) {
    case ReportFormat::Text: return "txt";
    case ReportFormat::Csv: return "csv";
    case ReportFormat::Json: return "json";
    case ReportFormat::Svg: return "svg";
  }
  return "bin";
}

nlohmann::json to_json(const LeakageReport& report) {
  nlohmann::json doc;
  doc["label"] = report.label;
  doc["epsilon"] = report.epsilon;
  doc["mean_offdiag_nlr"] = report.mean_offdiag_nlr;
  doc["values"] = value_names();
  doc["groups"] = group_names();
  doc["delta_s"] = matrix_json(report.delta_s);
  doc["leak"] = matrix_json(report.leak);
  doc["gain"] = report.gain;
  doc["nlr"] = matrix_json(report.nlr);
  doc["group_matrix"] = matrix_json(report.group_matrix);
  doc["group_normalized"] = matrix_json(report.group_normalized);
  doc["zero_rows"] = report.zero_rows;
  return doc;
}

LeakageReport report_from_json(const nlohmann::json& doc) {
  LeakageReport r;
  try {
    r.label = doc.value("label", std::string{});
    r.epsilon = doc.at("epsilon").get<double>();
    r.mean_offdiag_nlr = doc.at("mean_offdiag_nlr").get<double>();
    matrix_from_json(doc.at("delta_s"), r.delta_s);
    matrix_from_json(doc.at("leak"), r.leak);
    matrix_from_json(doc.at("nlr"), r.nlr);
    matrix_from_json(doc.at("group_matrix"), r.group_matrix);
    matrix_from_json(doc.at("group_normalized"), r.group_normalized);
    const auto& gain = doc.at("gain");
    VALSTEER_CHECK(gain.size() == kNumValues, ErrorCode::ParseError, "gain has wrong length");
    for (std::size_t j = 0; j < kNumValues; ++j) r.gain[j] = gain[j].get<double>();
    const auto& zero = doc.at("zero_rows");
    VALSTEER_CHECK(zero.size() == kNumGroups, ErrorCode::ParseError, "zero_rows has wrong length");
    for (std::size_t g = 0; g < kNumGroups; ++g) r.zero_rows[g] = zero[g].get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("leakage report: ") + e.what());
  }
  return r;
}

std::string render_report(const LeakageReport& report, ReportFormat format) {
  switch (format) {
    case ReportFormat::Json: return to_json(report).dump(2) + "\n";
    case ReportFormat::Svg:
      return svg_heatmap(report.group_normalized, group_names(), group_names(),
                         "Row-normalized group leakage" + (report.label.empty() ? "" : " (" + report.label + ")"),
                         false);
    case ReportFormat::Text: {
      std::string out;
      if (!report.label.empty()) out += "method: " + report.label + "\n";
      out += fmt::format("epsilon: {}\nmean off-diagonal NLR: {:.6f}\n\n", num(report.epsilon), report.mean_offdiag_nlr);
      out += "gain\n";
      for (std::size_t j = 0; j < kNumValues; ++j)
        out += fmt::format("  {:<16} {:.6f}\n", name_of(kAllValues[j]), report.gain[j]);
      out += "\n";
      text_matrix(out, "delta S (rows: steered value, columns: evaluated value)", report.delta_s,
                  value_names("steer:"), value_names());
      text_matrix(out, "NLR (diagonal excluded from the mean)", report.nlr, value_names("steer:"), value_names());
      text_matrix(out, "group leakage M (rows: evaluated group, columns: steered group)", report.group_matrix,
                  group_names(), group_names());
      text_matrix(out, "row-normalized group leakage", report.group_normalized, group_names(), group_names());
      for (std::size_t g = 0; g < kNumGroups; ++g)
        if (report.zero_rows[g]) out += fmt::format("note: group {} has no leakage mass\n", name_of(kAllGroups[g]));
      return out;
    }
    case ReportFormat::Csv: {
      std::string out;
      out += "# label," + report.label + "\n";
      out += "# epsilon," + num(report.epsilon) + "\n";
      out += "# mean_offdiag_nlr," + num(report.mean_offdiag_nlr) + "\n";
      std::array<std::array<double, kNumValues>, 1> gain_row{report.gain};
      csv_matrix(out, "gain", gain_row, std::array<std::string, 1>{"gain"}, value_names());
      csv_matrix(out, "delta_s", report.delta_s, value_names("steer:"), value_names());
      csv_matrix(out, "leak", report.leak, value_names("steer:"), value_names());
      csv_matrix(out, "nlr", report.nlr, value_names("steer:"), value_names());
      csv_matrix(out, "group_matrix", report.group_matrix, group_names(), group_names());
      csv_matrix(out, "group_normalized", report.group_normalized, group_names(), group_names());
      return out;
    }
  }
  throw Error(ErrorCode::UnsupportedFormat, "unsupported report format");
}

std::string render_nlr_heatmap(const LeakageReport& report) {
  return svg_heatmap(report.nlr, value_names("steer:"), value_names(),
                     "NLR" + (report.label.empty() ? "" : " (" + report.label + ")"), true);
}

std::string render_comparison(const std::vector<LeakageReport>& reports) {
  std::string out = fmt::format("{:<24} {:>18}\n", "method", "mean_offdiag_nlr");
  for (const auto& r : reports) out += fmt::format("{:<24} {:>18.6f}\n", r.label, r.mean_offdiag_nlr);
  return out;
}

CsrTable parse_csr_table(std::string_view text) {
  CsrTable table;
  std::vector<int> column_of;  // file column -> value index, -1 for the row label
  std::array<bool, kNumValues> have_row{};
  bool have_base = false;
  bool have_header = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string line = trim(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto cells = split_csv(line);
    const std::string where = "CSR table line " + std::to_string(line_no) + ": ";
    if (!have_header) {
      std::array<bool, kNumValues> seen{};
      column_of.assign(cells.size(), -1);
      for (std::size_t c = 1; c < cells.size(); ++c) {
        const auto v = parse_value(cells[c]);
        VALSTEER_CHECK(v.has_value(), ErrorCode::UnknownValue, where + "unknown value column '" + cells[c] + "'");
        VALSTEER_CHECK(!seen[index_of(*v)], ErrorCode::ParseError, where + "duplicate column '" + cells[c] + "'");
        seen[index_of(*v)] = true;
        column_of[c] = static_cast<int>(index_of(*v));
      }
      for (std::size_t j = 0; j < kNumValues; ++j)
        VALSTEER_CHECK(seen[j], ErrorCode::MissingValue,
                       where + "missing column '" + std::string(name_of(kAllValues[j])) + "'");
      have_header = true;
      continue;
    }
    VALSTEER_CHECK(cells.size() == column_of.size(), ErrorCode::ParseError,
                   where + "expected " + std::to_string(column_of.size()) + " cells");
    ValueVector row{};
    for (std::size_t c = 1; c < cells.size(); ++c) {
      std::size_t used = 0;
      double x = 0.0;
      try {
        x = std::stod(cells[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      VALSTEER_CHECK(used == cells[c].size() && used > 0, ErrorCode::ParseError,
                     where + "not a number: '" + cells[c] + "'");
      row[static_cast<std::size_t>(column_of[c])] = x;
    }
    const std::string& label = cells[0];
    if (label == "base") {
      VALSTEER_CHECK(!have_base, ErrorCode::ParseError, where + "duplicate base row");
      table.base = row;
      have_base = true;
    } else if (label.rfind("steer:", 0) == 0) {
      const auto v = parse_value(std::string_view(label).substr(6));
      VALSTEER_CHECK(v.has_value(), ErrorCode::UnknownValue, where + "unknown row '" + label + "'");
      VALSTEER_CHECK(!have_row[index_of(*v)], ErrorCode::ParseError, where + "duplicate row '" + label + "'");
      table.intervened[index_of(*v)] = row;
      have_row[index_of(*v)] = true;
    } else {
      throw Error(ErrorCode::ParseError, where + "row label must be 'base' or 'steer:<value>'");
    }
  }
  VALSTEER_CHECK(have_header, ErrorCode::ParseError, "CSR table is empty");
  VALSTEER_CHECK(have_base, ErrorCode::MissingValue, "CSR table has no base row");
  for (std::size_t i = 0; i < kNumValues; ++i)
    VALSTEER_CHECK(have_row[i], ErrorCode::MissingValue,
                   "CSR table has no row steer:" + std::string(name_of(kAllValues[i])));
  table.validate();
  return table;
}

CsrTable load_csr_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open CSR table " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csr_table(ss.str());
}

std::string csr_table_csv(const CsrTable& table) {
  std::string out = "row";
  for (auto v : kAllValues) out += "," + std::string(name_of(v));
  out += "\nbase";
  for (double x : table.base) out += "," + num(x);
  out += "\n";
  for (std::size_t i = 0; i < kNumValues; ++i) {
    out += "steer:" + std::string(name_of(kAllValues[i]));
    for (double x : table.intervened[i]) out += "," + num(x);
    out += "\n";
  }
  return out;
}

}  // namespace valsteer
