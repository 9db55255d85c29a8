#pragma once

#include <array>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "valsteer/taxonomy.hpp"

namespace valsteer {

using ValueVector = std::array<double, kNumValues>;
using ValueMatrix = std::array<ValueVector, kNumValues>;  // [steering i][evaluated j]
using GroupMatrix = std::array<std::array<double, kNumGroups>, kNumGroups>;

/// base[j] = CSR of the unsteered model on value j; intervened[i][j] = CSR on value j when steering value i.
struct CsrTable {
  ValueVector base{};
  ValueMatrix intervened{};

  /// Throws InvalidArgument unless every entry is finite and in [0, 1].
  void validate() const;
  friend bool operator==(const CsrTable&, const CsrTable&) = default;
};

inline constexpr double kDefaultEpsilon = 1e-6;

ValueMatrix delta_s(const CsrTable& table);
ValueMatrix leakage_mass(const ValueMatrix& delta);
/// max(intervened[j][j] - base[j], epsilon). Throws InvalidArgument for epsilon <= 0.
ValueVector gain(const CsrTable& table, double epsilon = kDefaultEpsilon);
/// leak[i][j] / gain[j]. The diagonal is filled in but ignored by summaries.
ValueMatrix nlr(const ValueMatrix& leak, const ValueVector& gain);
/// Mean over the 90 off-diagonal entries.
double mean_offdiag_nlr(const ValueMatrix& nlr);
/// M[g][h] = sum of leak[i][j] with j in g, i in h, i != j.
GroupMatrix group_leakage(const ValueMatrix& leak, const ValueTaxonomy& taxonomy);

struct RowNormalized {
  GroupMatrix matrix{};
  std::array<bool, kNumGroups> zero_rows{};
};

/// Nonzero rows are divided by their sum; all-zero rows stay zero and are flagged.
RowNormalized row_normalize(const GroupMatrix& m);

struct LeakageReport {
  ValueMatrix delta_s{};
  ValueMatrix leak{};
  ValueVector gain{};
  ValueMatrix nlr{};
  GroupMatrix group_matrix{};
  GroupMatrix group_normalized{};
  std::array<bool, kNumGroups> zero_rows{};
  double mean_offdiag_nlr = 0.0;
  double epsilon = kDefaultEpsilon;
  std::string label;

  friend bool operator==(const LeakageReport&, const LeakageReport&) = default;
};

LeakageReport build_report(const CsrTable& table, const ValueTaxonomy& taxonomy, double epsilon = kDefaultEpsilon,
                           std::string label = {});

enum class ReportFormat { Text, Csv, Json, Svg };

/// "text", "csv", "json", "svg". Throws UnsupportedFormat.
ReportFormat report_format_from_string(std::string_view name);
std::string_view extension_of(ReportFormat format) noexcept;

/// Deterministic bytes. Svg is the row-normalized group heatmap.
std::string render_report(const LeakageReport& report, ReportFormat format);
/// 10x10 NLR heatmap with the diagonal greyed out.
std::string render_nlr_heatmap(const LeakageReport& report);

nlohmann::json to_json(const LeakageReport& report);
LeakageReport report_from_json(const nlohmann::json& doc);

/// Side-by-side mean off-diagonal NLR for several methods.
std::string render_comparison(const std::vector<LeakageReport>& reports);

/// Header of value names, a `base` row and `steer:<value>` rows. Lines starting with '#' are skipped.
/// Throws ParseError with the line number, MissingValue for absent rows or columns.
CsrTable parse_csr_table(std::string_view text);
CsrTable load_csr_table(const std::string& path);
std::string csr_table_csv(const CsrTable& table);

}  // namespace valsteer
