#include <random>
#include <regex>

#include <gtest/gtest.h>

#include "leakage_oracle.hpp"
#include "test_util.hpp"
#include "valsteer/leakage.hpp"

using namespace valsteer;
using vtest::code_of;

namespace {

constexpr std::size_t A = index_of(ValueId::Achievement);

CsrTable null_table(double base = 0.3) {
  CsrTable t;
  t.base.fill(base);
  for (auto& row : t.intervened) row.fill(base);
  return t;
}

}  // namespace

TEST(DeltaS, WorkedExampleAndZeroRow) {
  auto t = null_table(0.1);
  t.base[A] = 0.06;
  t.intervened[A][A] = 0.52;
  t.intervened[A][A] = 0.52;
  const auto d = delta_s(t);
  EXPECT_NEAR(d[A][A], 0.46, 1e-15);
  for (std::size_t j = 0; j < kNumValues; ++j)
    if (j != A) {
      EXPECT_EQ(d[3][j], 0.0);
    }
  EXPECT_NEAR(gain(t)[A], 0.46, 1e-15);
}

TEST(LeakageMass, ClipsNegatives) {
  ValueMatrix d{};
  d[0][1] = -0.2;
  d[0][2] = 0.0;
  d[0][3] = 0.4;
  const auto l = leakage_mass(d);
  EXPECT_EQ(l[0][1], 0.0);
  EXPECT_EQ(l[0][2], 0.0);
  EXPECT_EQ(l[0][3], 0.4);
}

TEST(LeakageMass, ClippingIdentity) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    ValueMatrix d{}, neg{};
    for (std::size_t i = 0; i < kNumValues; ++i)
      for (std::size_t j = 0; j < kNumValues; ++j) {
        d[i][j] = u(rng);
        neg[i][j] = -d[i][j];
      }
    const auto a = leakage_mass(d);
    const auto b = leakage_mass(neg);
    for (std::size_t i = 0; i < kNumValues; ++i)
      for (std::size_t j = 0; j < kNumValues; ++j) {
        EXPECT_EQ(a[i][j], std::max(d[i][j], 0.0));
        EXPECT_EQ(a[i][j] + b[i][j], std::abs(d[i][j]));
      }
  }
}

TEST(Gain, EpsilonFloor) {
  auto t = null_table(0.5);
  t.intervened[2][2] = 0.3;  // negative raw gain
  const auto g = gain(t);
  EXPECT_EQ(g[2], kDefaultEpsilon);
  EXPECT_EQ(g[4], kDefaultEpsilon);
  EXPECT_EQ(gain(t, 0.01)[2], 0.01);
  EXPECT_EQ(code_of([&] { gain(t, 0.0); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(kDefaultEpsilon, 1e-6);
}

TEST(Nlr, RatioCases) {
  ValueMatrix leak{};
  ValueVector g{};
  g.fill(0.4);
  leak[1][2] = 0.4;
  const auto n = nlr(leak, g);
  EXPECT_EQ(n[1][2], 1.0);
  EXPECT_EQ(n[2][1], 0.0);
}

TEST(MeanNlr, Values) {
  ValueMatrix zero{};
  EXPECT_EQ(mean_offdiag_nlr(zero), 0.0);
  ValueMatrix m{};
  for (std::size_t i = 0; i < kNumValues; ++i)
    for (std::size_t j = 0; j < kNumValues; ++j) m[i][j] = i == j ? 50.0 : 0.673;
  EXPECT_NEAR(mean_offdiag_nlr(m), 0.673, 1e-12);
}

TEST(GroupLeakage, SingleEntryLandsInItsCell) {
  const auto tax = default_taxonomy();
  ValueMatrix leak{};
  const auto i = index_of(ValueId::Power);     // self-enhancement
  const auto j = index_of(ValueId::Tradition);  // conservation
  leak[i][j] = 0.3;
  const auto m = group_leakage(leak, tax);
  for (std::size_t g = 0; g < kNumGroups; ++g)
    for (std::size_t h = 0; h < kNumGroups; ++h) {
      const bool target = g == index_of(GroupId::Conservation) && h == index_of(GroupId::SelfEnhancement);
      EXPECT_EQ(m[g][h], target ? 0.3 : 0.0);
    }
  // Diagonal leak never enters the group matrix.
  ValueMatrix diag{};
  diag[i][i] = 0.9;
  for (const auto& row : group_leakage(diag, tax))
    for (double x : row) EXPECT_EQ(x, 0.0);
}

TEST(GroupLeakage, MassConservation) {
  std::mt19937_64 rng(2);
  const auto tax = default_taxonomy();
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = build_report(vtest::random_csr_table(rng), tax);
    // Same order as the group aggregation: by group cell, then evaluated value, then steering value.
    double by_cells = 0.0, by_leak = 0.0;
    for (std::size_t g = 0; g < kNumGroups; ++g)
      for (std::size_t h = 0; h < kNumGroups; ++h) {
        by_cells += r.group_matrix[g][h];
        double cell = 0.0;
        for (std::size_t j = 0; j < kNumValues; ++j)
          for (std::size_t i = 0; i < kNumValues; ++i)
            if (i != j && index_of(tax.group_of(kAllValues[j])) == g && index_of(tax.group_of(kAllValues[i])) == h)
              cell += r.leak[i][j];
        by_leak += cell;
      }
    EXPECT_EQ(by_cells, by_leak);
    double plain = 0.0;
    for (std::size_t i = 0; i < kNumValues; ++i)
      for (std::size_t j = 0; j < kNumValues; ++j)
        if (i != j) plain += r.leak[i][j];
    EXPECT_NEAR(by_cells, plain, 1e-12);
  }
}

TEST(RowNormalize, UniformZeroAndRandom) {
  GroupMatrix m{};
  m[0] = {1, 1, 1, 1};
  const auto n = row_normalize(m);
  for (double x : n.matrix[0]) EXPECT_EQ(x, 0.25);
  for (double x : n.matrix[1]) EXPECT_EQ(x, 0.0);
  EXPECT_FALSE(n.zero_rows[0]);
  EXPECT_TRUE(n.zero_rows[1]);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    GroupMatrix r{};
    for (auto& row : r)
      for (auto& x : row) x = u(rng);
    for (const auto& row : row_normalize(r).matrix) {
      double s = 0.0;
      for (double x : row) s += x;
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Report, NullInterventionIsAllZero) {
  const auto r = build_report(null_table(0.4), default_taxonomy());
  for (std::size_t i = 0; i < kNumValues; ++i) {
    EXPECT_EQ(r.gain[i], kDefaultEpsilon);
    for (std::size_t j = 0; j < kNumValues; ++j) {
      EXPECT_EQ(r.delta_s[i][j], 0.0);
      EXPECT_EQ(r.leak[i][j], 0.0);
      EXPECT_EQ(r.nlr[i][j], 0.0);
    }
  }
  EXPECT_EQ(r.mean_offdiag_nlr, 0.0);
  for (bool z : r.zero_rows) EXPECT_TRUE(z);
  EXPECT_EQ(r.epsilon, 1e-6);
}

TEST(Report, MatchesOracleOnRandomTables) {
  std::mt19937_64 rng(4);
  auto tax = default_taxonomy();
  for (int trial = 0; trial < 100; ++trial) {
    const auto t = vtest::random_csr_table(rng);
    const auto r = build_report(t, tax);
    EXPECT_LE(vtest::oracle_deviation(r, vtest::oracle_report(t, tax, kDefaultEpsilon)), 1e-9);
    for (std::size_t i = 0; i < kNumValues; ++i)
      for (std::size_t j = 0; j < kNumValues; ++j) {
        EXPECT_GE(r.leak[i][j], 0.0);
        EXPECT_GE(r.nlr[i][j], 0.0);
      }
  }
}

TEST(Report, ScaleBehaviour) {
  ValueMatrix leak{};
  ValueVector g{};
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (auto& x : g) x = u(rng);
  for (std::size_t i = 0; i < kNumValues; ++i)
    for (std::size_t j = 0; j < kNumValues; ++j) leak[i][j] = i == j ? 0.0 : u(rng);
  const double base = mean_offdiag_nlr(nlr(leak, g));
  for (double c : {0.5, 2.0, 7.0}) {
    ValueMatrix scaled = leak;
    for (auto& row : scaled)
      for (auto& x : row) x *= c;
    EXPECT_NEAR(mean_offdiag_nlr(nlr(scaled, g)), c * base, 1e-12 * c * base);
  }
}

TEST(Report, RejectsOutOfRangeTable) {
  auto t = null_table();
  t.intervened[3][4] = 1.2;
  EXPECT_EQ(code_of([&] { build_report(t, default_taxonomy()); }), ErrorCode::InvalidArgument);
  t.intervened[3][4] = NAN;
  EXPECT_EQ(code_of([&] { t.validate(); }), ErrorCode::InvalidArgument);
}

TEST(Render, DeterministicAndJsonRoundTrip) {
  std::mt19937_64 rng(6);
  const auto r = build_report(vtest::random_csr_table(rng), default_taxonomy(), 1e-6, "convA");
  for (auto f : {ReportFormat::Text, ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg})
    EXPECT_EQ(render_report(r, f), render_report(r, f));
  EXPECT_EQ(report_from_json(nlohmann::json::parse(render_report(r, ReportFormat::Json))), r);
  EXPECT_NE(render_report(r, ReportFormat::Json).find("\"mean_offdiag_nlr\""), std::string::npos);
  EXPECT_EQ(report_format_from_string("svg"), ReportFormat::Svg);
  EXPECT_EQ(code_of([] { report_format_from_string("pdf"); }), ErrorCode::UnsupportedFormat);
}

TEST(Render, GroupHeatmapAnnotationsMatchMatrix) {
  std::mt19937_64 rng(7);
  const auto r = build_report(vtest::random_csr_table(rng), default_taxonomy());
  const auto svg = render_report(r, ReportFormat::Svg);
  const std::regex cell(R"re(<text class="annotation" data-row="(\d+)" data-col="(\d+)"[^>]*>([^<]*)</text>)re");
  std::size_t count = 0;
  for (auto it = std::sregex_iterator(svg.begin(), svg.end(), cell); it != std::sregex_iterator(); ++it) {
    const auto g = std::stoul((*it)[1]);
    const auto h = std::stoul((*it)[2]);
    EXPECT_NEAR(std::stod((*it)[3]), r.group_normalized[g][h], 5e-4);
    ++count;
  }
  EXPECT_EQ(count, 16u);
  const std::regex rect(R"re(<rect class="cell")re");
  EXPECT_EQ(std::distance(std::sregex_iterator(svg.begin(), svg.end(), rect), std::sregex_iterator()), 16);

  const auto nlr_svg = render_nlr_heatmap(r);
  EXPECT_EQ(std::distance(std::sregex_iterator(nlr_svg.begin(), nlr_svg.end(), rect), std::sregex_iterator()), 100);
}

TEST(Render, ComparisonListsBothMethods) {
  CsrTable t = null_table(0.1);
  t.intervened[0][0] = 0.6;
  t.intervened[0][1] = 0.3;
  auto a = build_report(t, default_taxonomy(), 1e-6, "convA");
  auto b = build_report(t, default_taxonomy(), 1e-6, "neva");
  a.mean_offdiag_nlr = 0.673;
  b.mean_offdiag_nlr = 0.402;
  const auto text = render_comparison({a, b});
  EXPECT_NE(text.find("convA"), std::string::npos);
  EXPECT_NE(text.find("0.673"), std::string::npos);
  EXPECT_NE(text.find("0.402"), std::string::npos);
}

TEST(CsrTableText, RoundTripAndErrors) {
  std::mt19937_64 rng(8);
  const auto t = vtest::random_csr_table(rng);
  const auto text = csr_table_csv(t);
  EXPECT_EQ(parse_csr_table(text), t);
  EXPECT_EQ(parse_csr_table("# comment\n\n" + text), t);

  const std::string missing_row = text.substr(0, text.rfind("steer:"));
  EXPECT_EQ(code_of([&] { parse_csr_table(missing_row); }), ErrorCode::MissingValue);
  std::string bad_cell = text;
  bad_cell.replace(bad_cell.find("base,") + 5, 1, "x");
  try {
    parse_csr_table(bad_cell);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  std::string unknown = text;
  unknown.replace(unknown.find("achievement"), 11, "ambition000");
  EXPECT_EQ(code_of([&] { parse_csr_table(unknown); }), ErrorCode::UnknownValue);
}
