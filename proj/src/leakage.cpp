#include "valsteer/leakage.hpp"

#include <cmath>

#include "valsteer/error.hpp"

namespace valsteer {

void CsrTable::validate() const {
  auto ok = [](double x) { return std::isfinite(x) && x >= 0.0 && x <= 1.0; };
  for (std::size_t j = 0; j < kNumValues; ++j) {
    VALSTEER_CHECK(ok(base[j]), ErrorCode::InvalidArgument,
                   "base CSR for " + std::string(name_of(kAllValues[j])) + " outside [0,1]");
    for (std::size_t i = 0; i < kNumValues; ++i)
      VALSTEER_CHECK(ok(intervened[i][j]), ErrorCode::InvalidArgument,
                     "CSR for steer:" + std::string(name_of(kAllValues[i])) + " on " +
                         std::string(name_of(kAllValues[j])) + " outside [0,1]");
  }
}

ValueMatrix delta_s(const CsrTable& table) {
  ValueMatrix out{};
  for (std::size_t i = 0; i < kNumValues; ++i)
    for (std::size_t j = 0; j < kNumValues; ++j) out[i][j] = table.intervened[i][j] - table.base[j];
  return out;
}

ValueMatrix leakage_mass(const ValueMatrix& delta) {
  ValueMatrix out{};
  for (std::size_t i = 0; i < kNumValues; ++i)
    for (std::size_t j = 0; j < kNumValues; ++j) out[i][j] = std::max(delta[i][j], 0.0);
  return out;
}

ValueVector gain(const CsrTable& table, double epsilon) {
  VALSTEER_CHECK(std::isfinite(epsilon) && epsilon > 0.0, ErrorCode::InvalidArgument, "epsilon must be > 0");
  ValueVector out{};
  for (std::size_t j = 0; j < kNumValues; ++j)
    out[j] = std::max(table.intervened[j][j] - table.base[j], epsilon);
  return out;
}

ValueMatrix nlr(const ValueMatrix& leak, const ValueVector& gain) {
  ValueMatrix out{};
  for (std::size_t i = 0; i < kNumValues; ++i)
    for (std::size_t j = 0; j < kNumValues; ++j) out[i][j] = leak[i][j] / gain[j];
  return out;
}

double mean_offdiag_nlr(const ValueMatrix& nlr) {
  double sum = 0.0;
  for (std::size_t i = 0; i < kNumValues; ++i)
    for (std::size_t j = 0; j < kNumValues; ++j)
      if (i != j) sum += nlr[i][j];
  return sum / static_cast<double>(kNumValues * (kNumValues - 1));
}

GroupMatrix group_leakage(const ValueMatrix& leak, const ValueTaxonomy& taxonomy) {
  GroupMatrix m{};
  for (std::size_t g = 0; g < kNumGroups; ++g)
    for (std::size_t h = 0; h < kNumGroups; ++h)
      for (std::size_t j = 0; j < kNumValues; ++j) {
        if (index_of(taxonomy.group_of(kAllValues[j])) != g) continue;
        for (std::size_t i = 0; i < kNumValues; ++i) {
          if (i == j || index_of(taxonomy.group_of(kAllValues[i])) != h) continue;
          m[g][h] += leak[i][j];
        }
      }
  return m;
}

RowNormalized row_normalize(const GroupMatrix& m) {
  RowNormalized out;
  for (std::size_t g = 0; g < kNumGroups; ++g) {
    double sum = 0.0;
    for (double x : m[g]) sum += x;
    if (sum == 0.0) {
      out.zero_rows[g] = true;
      continue;
    }
    for (std::size_t h = 0; h < kNumGroups; ++h) out.matrix[g][h] = m[g][h] / sum;
  }
  return out;
}

LeakageReport build_report(const CsrTable& table, const ValueTaxonomy& taxonomy, double epsilon, std::string label) {
  table.validate();
  LeakageReport r;
  r.epsilon = epsilon;
  r.label = std::move(label);
  r.delta_s = delta_s(table);
  r.leak = leakage_mass(r.delta_s);
  r.gain = gain(table, epsilon);
  r.nlr = nlr(r.leak, r.gain);
  r.mean_offdiag_nlr = mean_offdiag_nlr(r.nlr);
  r.group_matrix = group_leakage(r.leak, taxonomy);
  const auto normalized = row_normalize(r.group_matrix);
  r.group_normalized = normalized.matrix;
  r.zero_rows = normalized.zero_rows;
  return r;
}

}  // namespace valsteer
