#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/engine.hpp"
#include "valsteer/probes.hpp"
#include "valsteer/taxonomy.hpp"

namespace valsteer {

struct NeuronScore {
  std::uint32_t layer = 0;
  std::uint32_t neuron = 0;
  double s = 0.0;  // cos(v_k, W); 0 when |v_k| = 0
};

/// One score per neuron of probe.layer. Throws ShapeMismatch.
std::vector<NeuronScore> similarity_scores(const TransformerModel& model, const Probe& probe);

struct SelectedNeuron {
  std::uint32_t neuron = 0;
  double s = 0.0;

  friend bool operator==(const SelectedNeuron&, const SelectedNeuron&) = default;
};

struct LayerSelection {
  std::uint32_t n_neurons = 0;
  std::uint32_t k = 0;
  std::vector<SelectedNeuron> aligned;  // s > 0, ordered by |s| desc then index
  std::vector<SelectedNeuron> opposed;  // s < 0

  friend bool operator==(const LayerSelection&, const LayerSelection&) = default;
};

struct NeuronSelection {
  ValueId value = ValueId::Achievement;
  double alpha = 0.0;
  std::string probe_hash;
  std::map<std::uint32_t, LayerSelection> layers;

  friend bool operator==(const NeuronSelection&, const NeuronSelection&) = default;
};

/// K = ceil(alpha * N), at least 1.
std::uint32_t top_k_count(double alpha, std::uint32_t n_neurons);

/// Indices of the k largest |s|, ties broken by lower index.
std::vector<std::uint32_t> top_k_by_magnitude(const std::vector<double>& scores, std::size_t k);

/// Signed Top-K per layer. Scores must cover each layer's neurons 0..N-1 exactly once
/// (IncompleteScores otherwise). Zero scores inside the Top-K stay agnostic.
NeuronSelection select_neurons(const std::map<std::uint32_t, std::vector<NeuronScore>>& scores, double alpha,
                               ValueId value = ValueId::Achievement);

/// Scores and selects on every kept layer of `value`. Throws NoKeptLayers.
NeuronSelection build_selection_for_value(const TransformerModel& model, const ProbeSet& probes, ValueId value,
                                          double alpha);

inline constexpr int kSelectionStoreVersion = 1;

nlohmann::json to_json(const NeuronSelection& selection);
NeuronSelection selection_from_json(const nlohmann::json& doc);
void save_selection(const NeuronSelection& selection, const std::string& path);
NeuronSelection load_selection(const std::string& path);
/// Throws StaleSelection when the probes changed since the selection was built.
void check_selection_fresh(const NeuronSelection& selection, const ProbeSet& probes);

}  // namespace valsteer
