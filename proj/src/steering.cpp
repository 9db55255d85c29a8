#include "valsteer/steering.hpp"

#include <cmath>
#include <fstream>

#include "valsteer/error.hpp"
#include "valsteer/hashing.hpp"

namespace valsteer {

double edit_activation(double m, double s, double beta) {
  VALSTEER_CHECK(s != 0.0 && !std::isnan(s), ErrorCode::UndefinedSign, "similarity score has no sign");
  VALSTEER_CHECK(std::isfinite(beta) && beta >= 0.0, ErrorCode::InvalidArgument, "beta must be finite and >= 0");
  return edited_activation(m, s > 0.0 ? 1 : -1, beta);
}

std::set<std::uint32_t> middle_half_layers(std::uint32_t n_layers) {
  VALSTEER_CHECK(n_layers >= 1, ErrorCode::InvalidArgument, "model has no layers");
  const std::uint32_t begin = (n_layers + 3) / 4;
  const std::uint32_t end = std::max(begin + 1, (3 * n_layers) / 4);
  std::set<std::uint32_t> out;
  for (std::uint32_t l = begin; l < std::min(end, n_layers); ++l) out.insert(l);
  if (out.empty()) out.insert(n_layers - 1);
  return out;
}

EditConfig EditConfig::defaults(std::uint32_t n_layers) {
  EditConfig c;
  c.layers = middle_half_layers(n_layers);
  return c;
}

std::string_view to_string(PlanKind kind) noexcept {
  switch (kind) {
    case PlanKind::NeuronEdit: return "neuron-edit";
    case PlanKind::DenseProbe: return "dense-probe";
    case PlanKind::DenseCaa: return "dense-caa";
  }
  return "unknown";
}

PlanKind plan_kind_from_string(std::string_view name) {
  if (name == "neuron-edit") return PlanKind::NeuronEdit;
  if (name == "dense-probe") return PlanKind::DenseProbe;
  if (name == "dense-caa") return PlanKind::DenseCaa;
  throw Error(ErrorCode::UnknownPlanKind, "unknown plan kind '" + std::string(name) + "'");
}

Interventions SteeringPlan::interventions() const {
  Interventions iv;
  if (const auto* neuron = std::get_if<NeuronEditPayload>(&payload)) {
    iv.edits = neuron->hooks;
  } else {
    for (const auto& dl : std::get<DensePayload>(payload).layers)
      iv.additions.push_back({dl.layer, dl.vector, dl.gamma});
  }
  return iv;
}

SteeringPlan plan_neuron_edit(const NeuronSelection& selection, const EditConfig& config) {
  VALSTEER_CHECK(std::isfinite(config.beta) && config.beta >= 0.0, ErrorCode::InvalidArgument,
                 "beta must be finite and >= 0");
  NeuronEditPayload payload;
  payload.alpha = config.alpha;
  payload.beta = config.beta;
  for (const auto& [layer, ls] : selection.layers) {
    VALSTEER_CHECK(config.layers.contains(layer), ErrorCode::LayerMismatch,
                   "selection layer " + std::to_string(layer) + " is not editable");
    EditHook hook;
    hook.layer = layer;
    for (const auto& a : ls.aligned) hook.edits.push_back({a.neuron, +1, config.beta});
    for (const auto& o : ls.opposed) hook.edits.push_back({o.neuron, -1, config.beta});
    payload.hooks.push_back(std::move(hook));
  }
  SteeringPlan plan;
  plan.kind = PlanKind::NeuronEdit;
  plan.value = selection.value;
  plan.probe_hash = selection.probe_hash;
  plan.payload = std::move(payload);
  return plan;
}

SteeringPlan plan_dense_probe(const ProbeSet& probes, ValueId value, double gamma) {
  VALSTEER_CHECK(std::isfinite(gamma), ErrorCode::InvalidArgument, "gamma must be finite");
  const auto kept = probes.kept_layers(value);
  VALSTEER_CHECK(!kept.empty(), ErrorCode::NoKeptLayers, "no kept probe layers for " + std::string(name_of(value)));
  DensePayload payload;
  for (auto l : kept) {
    const auto& w = probes.get(value, l).direction;
    const double n = norm(std::span<const float>(w));
    VALSTEER_CHECK(n > 0.0, ErrorCode::InvalidArgument, "kept probe has a zero direction");
    DenseLayer dl{l, std::vector<float>(w.size()), gamma};
    for (std::size_t j = 0; j < w.size(); ++j) dl.vector[j] = static_cast<float>(w[j] / n);
    payload.layers.push_back(std::move(dl));
  }
  SteeringPlan plan;
  plan.kind = PlanKind::DenseProbe;
  plan.value = value;
  plan.probe_hash = probe_store_hash(probes, value);
  plan.payload = std::move(payload);
  return plan;
}

SteeringPlan plan_dense_caa(const std::map<std::uint32_t, std::vector<FeaturePair>>& pairs, double gamma,
                            ValueId value) {
  VALSTEER_CHECK(std::isfinite(gamma), ErrorCode::InvalidArgument, "gamma must be finite");
  VALSTEER_CHECK(!pairs.empty(), ErrorCode::EmptyPairs, "no layers with matched pairs");
  DensePayload payload;
  for (const auto& [layer, layer_pairs] : pairs) {
    VALSTEER_CHECK(!layer_pairs.empty(), ErrorCode::EmptyPairs, "no matched pairs at layer " + std::to_string(layer));
    const std::size_t d = layer_pairs.front().first.size();
    std::vector<double> acc(d, 0.0);
    for (const auto& [pos, neg] : layer_pairs) {
      VALSTEER_CHECK(pos.size() == d && neg.size() == d, ErrorCode::ShapeMismatch, "pair width mismatch");
      for (std::size_t j = 0; j < d; ++j) acc[j] += static_cast<double>(pos[j]) - static_cast<double>(neg[j]);
    }
    DenseLayer dl{layer, std::vector<float>(d), gamma};
    for (std::size_t j = 0; j < d; ++j) dl.vector[j] = static_cast<float>(acc[j] / static_cast<double>(layer_pairs.size()));
    payload.layers.push_back(std::move(dl));
  }
  SteeringPlan plan;
  plan.kind = PlanKind::DenseCaa;
  plan.value = value;
  plan.payload = std::move(payload);
  return plan;
}

std::map<std::uint32_t, std::vector<FeaturePair>> matched_pairs(std::span<const ProbeExample> examples,
                                                                const std::map<std::uint32_t, LayerFeatures>& features) {
  std::map<std::string, std::pair<long, long>> by_pair;  // pair_id -> (pos row, neg row)
  std::vector<std::string> order;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto [it, inserted] = by_pair.try_emplace(examples[i].pair_id, -1, -1);
    if (inserted) order.push_back(examples[i].pair_id);
    (examples[i].label == 1 ? it->second.first : it->second.second) = static_cast<long>(i);
  }
  std::map<std::uint32_t, std::vector<FeaturePair>> out;
  for (const auto& [layer, lf] : features) {
    auto& dest = out[layer];
    for (const auto& id : order) {
      const auto [pos, neg] = by_pair[id];
      if (pos < 0 || neg < 0) continue;
      const auto hp = lf.features.row(static_cast<std::size_t>(pos));
      const auto hn = lf.features.row(static_cast<std::size_t>(neg));
      dest.emplace_back(std::vector<float>(hp.begin(), hp.end()), std::vector<float>(hn.begin(), hn.end()));
    }
  }
  return out;
}

std::vector<TokenId> steer_generate(const TransformerModel& model, const SteeringPlan& plan,
                                    std::span<const TokenId> prompt, const DecodeParams& params) {
  return generate(model, prompt, params, plan.interventions());
}

double default_caa_gamma(ValueId value) {
  static constexpr double kGamma[kNumValues] = {0.20, 0.20, 0.05, 0.30, 0.30, 0.20, 0.20, 0.11, 0.08, 0.215};
  return kGamma[index_of(value)];
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const SteeringPlan& plan) {
  nlohmann::json doc;
  doc["format_version"] = kPlanFormatVersion;
  doc["kind"] = std::string(to_string(plan.kind));
  doc["value"] = std::string(name_of(plan.value));
  doc["probe_hash"] = plan.probe_hash;
  if (const auto* neuron = std::get_if<NeuronEditPayload>(&plan.payload)) {
    VALSTEER_CHECK(plan.kind == PlanKind::NeuronEdit, ErrorCode::InvalidArgument, "plan kind/payload mismatch");
    doc["hyper"] = {{"alpha", neuron->alpha}, {"beta", neuron->beta}};
    auto hooks = nlohmann::json::array();
    for (const auto& hook : neuron->hooks) {
      auto entries = nlohmann::json::array();
      for (const auto& e : hook.edits) entries.push_back(nlohmann::json::array({e.neuron, e.sign_s, e.beta}));
      hooks.push_back({{"layer", hook.layer}, {"entries", entries}});
    }
    doc["payload"] = {{"hooks", hooks}};
  } else {
    VALSTEER_CHECK(plan.kind != PlanKind::NeuronEdit, ErrorCode::InvalidArgument, "plan kind/payload mismatch");
    const auto& dense = std::get<DensePayload>(plan.payload);
    auto layers = nlohmann::json::array();
    for (const auto& dl : dense.layers)
      layers.push_back({{"layer", dl.layer}, {"gamma", dl.gamma}, {"vector", encode_f32(dl.vector)}});
    doc["hyper"] = {{"gamma", dense.layers.empty() ? 0.0 : dense.layers.front().gamma}};
    doc["payload"] = {{"layers", layers}};
  }
  return doc;
}

SteeringPlan plan_from_json(const nlohmann::json& doc) {
  SteeringPlan plan;
  try {
    const int version = doc.at("format_version").get<int>();
    VALSTEER_CHECK(version == kPlanFormatVersion, ErrorCode::FormatVersionMismatch,
                   "plan format version " + std::to_string(version) + " unsupported");
    plan.kind = plan_kind_from_string(doc.at("kind").get<std::string>());
    plan.value = value_from_name(doc.at("value").get<std::string>());
    plan.probe_hash = doc.at("probe_hash").get<std::string>();
    const auto& payload = doc.at("payload");
    if (plan.kind == PlanKind::NeuronEdit) {
      NeuronEditPayload p;
      p.alpha = doc.at("hyper").at("alpha").get<double>();
      p.beta = doc.at("hyper").at("beta").get<double>();
      for (const auto& h : payload.at("hooks")) {
        EditHook hook;
        hook.layer = h.at("layer").get<std::uint32_t>();
        for (const auto& e : h.at("entries")) {
          NeuronEdit edit{e.at(0).get<std::uint32_t>(), e.at(1).get<int>(), e.at(2).get<double>()};
          VALSTEER_CHECK(edit.sign_s == 1 || edit.sign_s == -1, ErrorCode::ParseError, "edit sign must be +/-1");
          hook.edits.push_back(edit);
        }
        p.hooks.push_back(std::move(hook));
      }
      plan.payload = std::move(p);
    } else {
      DensePayload p;
      for (const auto& l : payload.at("layers"))
        p.layers.push_back({l.at("layer").get<std::uint32_t>(), decode_f32(l.at("vector").get<std::string>()),
                            l.at("gamma").get<double>()});
      plan.payload = std::move(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("plan: ") + e.what());
  }
  return plan;
}

void save_plan(const SteeringPlan& plan, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path);
  out << to_json(plan).dump(2) << "\n";
}

SteeringPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open plan " + path);
  try {
    return plan_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::ParseError, path + ": " + e.what());
  }
}

}  // namespace valsteer
