#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/engine.hpp"
#include "valsteer/judge.hpp"
#include "valsteer/probes.hpp"
#include "valsteer/taxonomy.hpp"

namespace valsteer::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitEndpoint = 3;

/// Bad flags or configuration; maps to exit code 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthSpec {
  std::uint64_t seed = 1;
  ModelConfig model{};
  std::vector<ValueId> values = {ValueId::Achievement, ValueId::Power};
  double cosine = 0.5;
  std::uint32_t n_aligned = 3;
  std::uint32_t n_opposed = 2;
  std::size_t probe_pairs = 100;
  std::size_t questions = 60;
};

struct JudgeSettings {
  std::string mode = "proxy";  // proxy | mock | replay | http
  HttpJudgeConfig http;
  std::string transcript;      // replay source, or where http/mock responses are logged
  std::string mock_response = "Yes";
  unsigned max_retries = 3;
  unsigned initial_backoff_ms = 500;
  unsigned concurrency = 4;
  bool fluency = true;
};

struct RunConfig {
  std::string model_path;
  std::optional<SynthSpec> synth;
  std::string probe_dataset;
  std::string questions;
  std::vector<ValueId> values;             // empty: every value with data
  std::vector<std::uint32_t> probe_layers;  // empty: all layers
  std::vector<std::uint32_t> edit_layers;   // empty: middle half
  double tau = 0.95;
  double alpha = 0.03;
  double beta = 0.90;
  double epsilon = 1e-6;
  std::map<ValueId, double> caa_gamma;      // defaults per value
  std::map<ValueId, double> conva_gamma;    // defaults to 1.0
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  std::string out = "out";
  std::uint32_t epochs = 500;
  double learning_rate = 0.1;
  double l2 = 1e-4;
  double train_fraction = 0.7;
  DecodeParams decode{};
  JudgeSettings judge;
  ValueDefinitions definitions = default_definitions();
  ValueTaxonomy taxonomy = default_taxonomy();
  bool fill_missing = false;
  std::string base_dir = ".";  // relative paths resolve against the config file's directory

  [[nodiscard]] std::string resolve(const std::string& path) const;
  [[nodiscard]] double caa_gamma_for(ValueId v) const;
  [[nodiscard]] double conva_gamma_for(ValueId v) const;
};

/// Throws UsageError on unknown keys, bad types or out-of-range numbers.
RunConfig config_from_json(const nlohmann::json& doc, const std::string& base_dir = ".");
RunConfig load_config(const std::string& path);
/// Canonical form; `out` and `jobs` are left out because they do not change results.
nlohmann::json canonical_json(const RunConfig& config);
std::string config_hash(const RunConfig& config);

/// Entry point shared by the executable and the tests.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace valsteer::cli
