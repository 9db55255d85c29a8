#include "valsteer/neurons.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "valsteer/error.hpp"

namespace valsteer {

std::vector<NeuronScore> similarity_scores(const TransformerModel& model, const Probe& probe) {
  const auto& cfg = model.config();
  VALSTEER_CHECK(probe.layer < cfg.n_layers, ErrorCode::ShapeMismatch, "probe layer beyond model depth");
  VALSTEER_CHECK(probe.direction.size() == cfg.d_model, ErrorCode::ShapeMismatch, "probe width != d_model");
  const auto& values = model.weights().layers[probe.layer].ffn_value_vectors;
  const std::span<const float> w(probe.direction);
  std::vector<NeuronScore> out(cfg.n_neurons);
  for (std::uint32_t k = 0; k < cfg.n_neurons; ++k) out[k] = {probe.layer, k, cosine(values.row(k), w)};
  return out;
}

std::uint32_t top_k_count(double alpha, std::uint32_t n_neurons) {
  VALSTEER_CHECK(alpha > 0.0 && alpha <= 1.0, ErrorCode::InvalidArgument, "alpha must be in (0, 1]");
  // The small slack keeps products such as 0.3 * 10 from rounding up to 4.
  const double raw = alpha * static_cast<double>(n_neurons);
  const auto k = static_cast<std::uint32_t>(std::ceil(raw - 1e-9));
  return std::clamp<std::uint32_t>(k, 1, n_neurons);
}

std::vector<std::uint32_t> top_k_by_magnitude(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::uint32_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0u);
  k = std::min(k, idx.size());
  const auto by_magnitude = [&](std::uint32_t a, std::uint32_t b) {
    const double ma = std::abs(scores[a]);
    const double mb = std::abs(scores[b]);
    return ma != mb ? ma > mb : a < b;
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), by_magnitude);
  idx.resize(k);
  return idx;
}

NeuronSelection select_neurons(const std::map<std::uint32_t, std::vector<NeuronScore>>& scores, double alpha,
                               ValueId value) {
  NeuronSelection sel;
  sel.value = value;
  sel.alpha = alpha;
  for (const auto& [layer, layer_scores] : scores) {
    const auto n = static_cast<std::uint32_t>(layer_scores.size());
    VALSTEER_CHECK(n > 0, ErrorCode::IncompleteScores, "no scores for layer " + std::to_string(layer));
    std::vector<double> s(n, 0.0);
    std::vector<bool> seen(n, false);
    for (const auto& sc : layer_scores) {
      VALSTEER_CHECK(sc.layer == layer && sc.neuron < n && !seen[sc.neuron], ErrorCode::IncompleteScores,
                     "scores for layer " + std::to_string(layer) + " do not cover each neuron exactly once");
      VALSTEER_CHECK(std::isfinite(sc.s), ErrorCode::InvalidArgument, "non-finite similarity score");
      seen[sc.neuron] = true;
      s[sc.neuron] = sc.s;
    }

    LayerSelection ls;
    ls.n_neurons = n;
    ls.k = top_k_count(alpha, n);
    for (auto k : top_k_by_magnitude(s, ls.k)) {
      if (s[k] > 0.0) {
        ls.aligned.push_back({k, s[k]});
      } else if (s[k] < 0.0) {
        ls.opposed.push_back({k, s[k]});
      }
    }
    sel.layers[layer] = std::move(ls);
  }
  return sel;
}

NeuronSelection build_selection_for_value(const TransformerModel& model, const ProbeSet& probes, ValueId value,
                                          double alpha) {
  const auto kept = probes.kept_layers(value);
  VALSTEER_CHECK(!kept.empty(), ErrorCode::NoKeptLayers, "no kept probe layers for " + std::string(name_of(value)));
  std::map<std::uint32_t, std::vector<NeuronScore>> scores;
  for (auto l : kept) scores[l] = similarity_scores(model, probes.get(value, l));
  auto sel = select_neurons(scores, alpha, value);
  sel.probe_hash = probe_store_hash(probes, value);
  return sel;
}

nlohmann::json to_json(const NeuronSelection& sel) {
  nlohmann::json doc;
  doc["format_version"] = kSelectionStoreVersion;
  doc["value"] = std::string(name_of(sel.value));
  doc["alpha"] = sel.alpha;
  doc["probe_hash"] = sel.probe_hash;
  doc["layers"] = nlohmann::json::array();
  auto pairs = [](const std::vector<SelectedNeuron>& xs) {
    auto arr = nlohmann::json::array();
    for (const auto& x : xs) arr.push_back(nlohmann::json::array({x.neuron, x.s}));
    return arr;
  };
  for (const auto& [layer, ls] : sel.layers)
    doc["layers"].push_back({{"layer", layer},
                             {"n_neurons", ls.n_neurons},
                             {"k", ls.k},
                             {"aligned", pairs(ls.aligned)},
                             {"opposed", pairs(ls.opposed)}});
  return doc;
}

NeuronSelection selection_from_json(const nlohmann::json& doc) {
  NeuronSelection sel;
  try {
    const int version = doc.at("format_version").get<int>();
    VALSTEER_CHECK(version == kSelectionStoreVersion, ErrorCode::FormatVersionMismatch,
                   "selection store version " + std::to_string(version) + " unsupported");
    sel.value = value_from_name(doc.at("value").get<std::string>());
    sel.alpha = doc.at("alpha").get<double>();
    sel.probe_hash = doc.at("probe_hash").get<std::string>();
    auto read_pairs = [](const nlohmann::json& arr) {
      std::vector<SelectedNeuron> out;
      for (const auto& p : arr) out.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<double>()});
      return out;
    };
    for (const auto& item : doc.at("layers")) {
      LayerSelection ls;
      ls.n_neurons = item.at("n_neurons").get<std::uint32_t>();
      ls.k = item.at("k").get<std::uint32_t>();
      ls.aligned = read_pairs(item.at("aligned"));
      ls.opposed = read_pairs(item.at("opposed"));
      for (const auto& a : ls.aligned)
        VALSTEER_CHECK(a.s > 0.0 && a.neuron < ls.n_neurons, ErrorCode::ParseError, "bad aligned entry");
      for (const auto& o : ls.opposed)
        VALSTEER_CHECK(o.s < 0.0 && o.neuron < ls.n_neurons, ErrorCode::ParseError, "bad opposed entry");
      sel.layers[item.at("layer").get<std::uint32_t>()] = std::move(ls);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("selection store: ") + e.what());
  }
  return sel;
}

void save_selection(const NeuronSelection& selection, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << to_json(selection).dump(2) << "\n";
}

NeuronSelection load_selection(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open selection " + path);
  try {
    return selection_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::ParseError, path + ": " + e.what());
  }
}

void check_selection_fresh(const NeuronSelection& selection, const ProbeSet& probes) {
  const auto current = probe_store_hash(probes, selection.value);
  VALSTEER_CHECK(current == selection.probe_hash, ErrorCode::StaleSelection,
                 "selection for " + std::string(name_of(selection.value)) + " was built from probe store " +
                     selection.probe_hash.substr(0, 12) + " but current store is " + current.substr(0, 12));
}

}  // namespace valsteer
