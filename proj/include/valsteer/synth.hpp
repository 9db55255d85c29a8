#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/engine.hpp"
#include "valsteer/taxonomy.hpp"

namespace valsteer {

struct PlantedValue {
  ValueId value = ValueId::Achievement;
  std::vector<float> direction;  // unit norm, length d_model
  std::uint32_t n_aligned = 3;
  std::uint32_t n_opposed = 2;
};

struct PlantedLayer {
  std::vector<std::uint32_t> aligned;
  std::vector<std::uint32_t> opposed;

  friend bool operator==(const PlantedLayer&, const PlantedLayer&) = default;
};

/// Ground truth for one planted value.
///
/// Marker tokens carry +/- the planted direction in their embedding, so a sequence
/// ending in a positive marker "expresses" the value. The response token is written
/// by the unembedding along the planted neurons' direction but has a neutral
/// embedding: steering can make the model emit it, and reading it back carries no
/// value signal.
struct PlantedTruth {
  ValueId value = ValueId::Achievement;
  std::vector<float> direction;
  std::vector<PlantedLayer> layers;  // one entry per model layer
  std::vector<TokenId> positive_markers;
  std::vector<TokenId> negative_markers;
  TokenId response_token = 0;

  friend bool operator==(const PlantedTruth&, const PlantedTruth&) = default;
};

struct GroundTruth {
  std::uint64_t seed = 0;
  std::vector<PlantedTruth> values;
  std::vector<TokenId> context_tokens;

  /// Throws Error(UnknownValue) when the value was not planted.
  [[nodiscard]] const PlantedTruth& find(ValueId value) const;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

nlohmann::json to_json(const GroundTruth& truth);
GroundTruth ground_truth_from_json(const nlohmann::json& doc);

/// Scale knobs for the planted construction. Defaults are what the demo and tests use.
struct SynthOptions {
  std::vector<double> marker_strengths = {0.8, 1.2, 1.6, 2.0};
  double marker_noise = 0.3;
  double context_noise = 0.6;
  double position_noise = 0.1;
  double planted_norm = 0.25;    // |v_k| of aligned neurons; opposed ones are rescaled to cancel
  double random_norm = 0.25;     // |v_k| of unplanted neurons
  double planted_key_scale = 0.5;
  double response_strength = 2.0;
  double attention_noise = 0.05;
  double value_mix = 0.5;
};

struct SynthModel {
  TransformerModel model;
  GroundTruth truth;
};

inline constexpr double kPlantedMinCosine = 0.8;
inline constexpr double kUnplantedMaxCosine = 0.2;

/// Builds a random model with planted value neurons in every layer.
/// Deterministic per seed. Throws InfeasibleConstraint when the cosine constraints
/// cannot be met (too many planted neurons, too small d_model, directions too close).
SynthModel synth_model(std::uint64_t seed, const ModelConfig& config, std::span<const PlantedValue> planted,
                       const SynthOptions& options = {});

std::vector<float> random_unit_vector(std::mt19937_64& rng, std::size_t d);

/// Two unit vectors with the given mutual cosine.
std::pair<std::vector<float>, std::vector<float>> unit_pair_with_cosine(std::uint64_t seed, std::size_t d,
                                                                        double cosine);

}  // namespace valsteer
