#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/engine.hpp"
#include "valsteer/neurons.hpp"
#include "valsteer/probes.hpp"

namespace valsteer {

/// m * (1 + sign(m) * sign(s) * beta). Throws UndefinedSign for s == 0; m == 0 returns 0.
double edit_activation(double m, double s, double beta);

struct EditConfig {
  double alpha = 0.03;
  double beta = 0.90;
  std::set<std::uint32_t> layers;

  /// alpha 0.03, beta 0.90, middle half of the layers.
  static EditConfig defaults(std::uint32_t n_layers);
};

/// [ceil(L/4), floor(3L/4)), never empty.
std::set<std::uint32_t> middle_half_layers(std::uint32_t n_layers);

enum class PlanKind { NeuronEdit, DenseProbe, DenseCaa };

std::string_view to_string(PlanKind kind) noexcept;
/// Throws UnknownPlanKind.
PlanKind plan_kind_from_string(std::string_view name);

struct NeuronEditPayload {
  double alpha = 0.0;
  double beta = 0.0;
  std::vector<EditHook> hooks;

  friend bool operator==(const NeuronEditPayload&, const NeuronEditPayload&) = default;
};

struct DenseLayer {
  std::uint32_t layer = 0;
  std::vector<float> vector;
  double gamma = 0.0;

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct DensePayload {
  std::vector<DenseLayer> layers;

  friend bool operator==(const DensePayload&, const DensePayload&) = default;
};

struct SteeringPlan {
  PlanKind kind = PlanKind::NeuronEdit;
  ValueId value = ValueId::Achievement;
  std::string probe_hash;
  std::variant<NeuronEditPayload, DensePayload> payload;

  [[nodiscard]] Interventions interventions() const;
  friend bool operator==(const SteeringPlan&, const SteeringPlan&) = default;
};

/// Throws LayerMismatch when the selection touches layers outside config.layers.
SteeringPlan plan_neuron_edit(const NeuronSelection& selection, const EditConfig& config);

/// + gamma * W_l/|W_l| after every kept layer. Throws NoKeptLayers.
SteeringPlan plan_dense_probe(const ProbeSet& probes, ValueId value, double gamma);

using FeaturePair = std::pair<std::vector<float>, std::vector<float>>;  // (h+, h-)

/// Mean over pairs of (h+ - h-) per layer, added as + gamma * vector. Throws EmptyPairs.
SteeringPlan plan_dense_caa(const std::map<std::uint32_t, std::vector<FeaturePair>>& pairs, double gamma,
                            ValueId value = ValueId::Achievement);

/// Groups examples by pair_id and returns (positive, negative) feature rows per layer.
std::map<std::uint32_t, std::vector<FeaturePair>> matched_pairs(std::span<const ProbeExample> examples,
                                                                const std::map<std::uint32_t, LayerFeatures>& features);

std::vector<TokenId> steer_generate(const TransformerModel& model, const SteeringPlan& plan,
                                    std::span<const TokenId> prompt, const DecodeParams& params);

inline constexpr int kPlanFormatVersion = 1;

nlohmann::json to_json(const SteeringPlan& plan);
/// Throws UnknownPlanKind, FormatVersionMismatch, ParseError.
SteeringPlan plan_from_json(const nlohmann::json& doc);
void save_plan(const SteeringPlan& plan, const std::string& path);
SteeringPlan load_plan(const std::string& path);

/// Per-value CAA coefficients (LLaMA-3-8B column of the published hyperparameter table).
double default_caa_gamma(ValueId value);

}  // namespace valsteer
