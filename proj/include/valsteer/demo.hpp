#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/engine.hpp"
#include "valsteer/judge.hpp"
#include "valsteer/probes.hpp"
#include "valsteer/synth.hpp"

namespace valsteer {

/// Probe pairs for a planted value: random context followed by a positive or negative marker.
std::vector<ProbeExample> synth_probe_dataset(const GroundTruth& truth, ValueId value, std::size_t n_pairs,
                                              std::uint64_t seed, std::size_t min_context = 4,
                                              std::size_t max_context = 12);

/// Prompts that end in a negative marker of `value`, so the unsteered model does not express it.
std::vector<EvalQuestion> synth_questions(const GroundTruth& truth, ValueId value, std::size_t n, std::uint64_t seed,
                                          std::size_t min_context = 4, std::size_t max_context = 12);

struct DemoOptions {
  std::uint64_t seed = 1;
  ModelConfig model{};
  double direction_cosine = 0.5;
  ValueId value_a = ValueId::Achievement;
  ValueId value_b = ValueId::Power;
  std::uint32_t n_aligned = 3;
  std::uint32_t n_opposed = 2;
  std::size_t probe_pairs = 100;
  std::size_t questions = 60;
  double tau = 0.95;
  std::uint32_t top_k = 5;
  double beta = 0.90;
  double gain_tolerance = 0.10;
  DecodeParams decode{.max_new_tokens = 2};
  SynthOptions synth{};
};

/// Proxy rates for one steering method over the two planted values.
struct DemoArm {
  std::string method;
  double beta = 0.0;                 // neuron-edit arms
  std::array<double, 2> gamma{};     // dense arm, per steered value
  std::array<std::array<double, 2>, 2> rates{};  // [steered][evaluated]
  std::array<double, 2> gain{};      // epsilon-floored target gain per value
  std::array<double, 2> leak{};      // leak onto the other value when steering value i
  std::array<double, 2> nlr{};       // NLR of steering value i onto the other value
  double offtarget_nlr = 0.0;        // mean of the two
  bool calibrated = true;
};

struct DemoReport {
  std::uint64_t seed = 0;
  std::array<ValueId, 2> values{};
  std::array<double, 2> base_rates{};
  std::array<std::vector<LayerAccuracyRow>, 2> probe_accuracy;
  std::array<bool, 2> selection_matches_truth{};
  DemoArm neuron;
  DemoArm dense;
  DemoArm control;  // neuron edit with beta = 0
  double relative_reduction = 0.0;  // 1 - neuron / dense
  double epsilon = 0.0;

  /// Calibrated within tolerance and neuron editing leaks strictly less.
  [[nodiscard]] bool neuron_leaks_less() const noexcept;
};

DemoReport run_synth_demo(const DemoOptions& options);

nlohmann::json to_json(const DemoReport& report);
std::string render_demo_text(const DemoReport& report);

}  // namespace valsteer
