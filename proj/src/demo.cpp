#include "valsteer/demo.hpp"

#include <cmath>
#include <random>

#include <fmt/format.h>

#include "valsteer/error.hpp"
#include "valsteer/leakage.hpp"
#include "valsteer/neurons.hpp"
#include "valsteer/steering.hpp"

namespace valsteer {

namespace {

std::vector<TokenId> random_context(std::mt19937_64& rng, const GroundTruth& truth, std::size_t min_len,
                                    std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<std::size_t> pick(0, truth.context_tokens.size() - 1);
  std::vector<TokenId> out(len(rng));
  for (auto& t : out) t = truth.context_tokens[pick(rng)];
  return out;
}

std::string as_text(const std::vector<TokenId>& tokens) {
  return ByteTokenizer().decode(tokens);
}

bool matches_truth(const NeuronSelection& selection, const PlantedTruth& truth) {
  if (selection.layers.empty()) return false;
  for (const auto& [layer, ls] : selection.layers) {
    std::vector<std::uint32_t> aligned;
    std::vector<std::uint32_t> opposed;
    for (const auto& n : ls.aligned) aligned.push_back(n.neuron);
    for (const auto& n : ls.opposed) opposed.push_back(n.neuron);
    std::sort(aligned.begin(), aligned.end());
    std::sort(opposed.begin(), opposed.end());
    if (aligned != truth.layers.at(layer).aligned || opposed != truth.layers.at(layer).opposed) return false;
  }
  return true;
}

struct DemoContext {
  const TransformerModel& model;
  const ProbeSet& probes;
  std::array<ValueId, 2> values;
  std::array<std::vector<EvalQuestion>, 2> questions;
  DecodeParams decode;
  ByteTokenizer tokenizer;

  double rate(std::size_t evaluated, const SteeringPlan* plan) const {
    return proxy_csr(probes, values[evaluated], model, tokenizer, questions[evaluated], plan, decode).rate;
  }
};

// Fills gain, leak and NLR from the rates through the leakage metric suite.
void score_arm(DemoArm& arm, const std::array<ValueId, 2>& values, const std::array<double, 2>& base, double epsilon) {
  CsrTable table;
  for (std::size_t j = 0; j < 2; ++j) {
    table.base[index_of(values[j])] = base[j];
    for (std::size_t i = 0; i < 2; ++i) table.intervened[index_of(values[i])][index_of(values[j])] = arm.rates[i][j];
  }
  // Unplanted values are left at zero in both rows so they add neither gain nor leak.
  for (std::size_t i = 0; i < kNumValues; ++i)
    if (kAllValues[i] != values[0] && kAllValues[i] != values[1])
      for (std::size_t j = 0; j < 2; ++j) table.intervened[i][index_of(values[j])] = base[j];
  const auto report = build_report(table, default_taxonomy(), epsilon, arm.method);
  for (std::size_t i = 0; i < 2; ++i) {
    const std::size_t self = index_of(values[i]);
    const std::size_t other = index_of(values[1 - i]);
    arm.gain[i] = report.gain[self];
    arm.leak[i] = report.leak[self][other];
    arm.nlr[i] = report.nlr[self][other];
  }
  arm.offtarget_nlr = 0.5 * (arm.nlr[0] + arm.nlr[1]);
}

}  // namespace

std::vector<ProbeExample> synth_probe_dataset(const GroundTruth& truth, ValueId value, std::size_t n_pairs,
                                              std::uint64_t seed, std::size_t min_context, std::size_t max_context) {
  const auto& pt = truth.find(value);
  VALSTEER_CHECK(!pt.positive_markers.empty() && min_context <= max_context, ErrorCode::InvalidArgument,
                 "bad synthetic dataset request");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> marker(0, pt.positive_markers.size() - 1);
  std::vector<ProbeExample> out;
  for (std::size_t i = 0; i < n_pairs; ++i) {
    auto context = random_context(rng, truth, min_context, max_context);
    const std::size_t m = marker(rng);
    for (int label : {1, 0}) {
      ProbeExample ex;
      ex.tokens = context;
      ex.tokens.push_back(label == 1 ? pt.positive_markers[m] : pt.negative_markers[m]);
      ex.label = label;
      ex.value = value;
      ex.pair_id = fmt::format("{}-{:04}", name_of(value), i);
      ex.text = as_text(ex.tokens);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

std::vector<EvalQuestion> synth_questions(const GroundTruth& truth, ValueId value, std::size_t n, std::uint64_t seed,
                                          std::size_t min_context, std::size_t max_context) {
  const auto& pt = truth.find(value);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> marker(0, pt.negative_markers.size() - 1);
  std::vector<EvalQuestion> out;
  for (std::size_t i = 0; i < n; ++i) {
    auto tokens = random_context(rng, truth, min_context, max_context);
    tokens.push_back(pt.negative_markers[marker(rng)]);
    out.push_back({value, fmt::format("{}-q{:04}", name_of(value), i), as_text(tokens)});
  }
  return out;
}

bool DemoReport::neuron_leaks_less() const noexcept {
  return neuron.calibrated && dense.calibrated && neuron.offtarget_nlr < dense.offtarget_nlr;
}

DemoReport run_synth_demo(const DemoOptions& opt) {
  VALSTEER_CHECK(opt.value_a != opt.value_b, ErrorCode::InvalidArgument, "demo needs two distinct values");
  VALSTEER_CHECK(opt.top_k >= 1 && opt.top_k <= opt.model.n_neurons, ErrorCode::InvalidArgument, "bad top_k");
  DemoReport report;
  report.seed = opt.seed;
  report.values = {opt.value_a, opt.value_b};
  report.epsilon = kDefaultEpsilon;

  const auto [dir_a, dir_b] = unit_pair_with_cosine(opt.seed, opt.model.d_model, opt.direction_cosine);
  const std::vector<PlantedValue> planted = {{opt.value_a, dir_a, opt.n_aligned, opt.n_opposed},
                                             {opt.value_b, dir_b, opt.n_aligned, opt.n_opposed}};
  const SynthModel sm = synth_model(opt.seed, opt.model, planted, opt.synth);
  const auto layers = middle_half_layers(opt.model.n_layers);

  std::vector<ProbeExample> examples;
  for (std::size_t v = 0; v < 2; ++v) {
    auto part = synth_probe_dataset(sm.truth, report.values[v], opt.probe_pairs, opt.seed * 1000 + 11 + v);
    examples.insert(examples.end(), part.begin(), part.end());
  }
  ProbeHyper hyper;
  hyper.seed = opt.seed;
  const ProbeSet probes = train_probes(sm.model, examples, layers, SplitRatio{}, hyper, opt.tau);

  // ceil(alpha * N) == K for alpha = K / N.
  const double alpha = static_cast<double>(opt.top_k) / static_cast<double>(opt.model.n_neurons);
  EditConfig config;
  config.alpha = alpha;
  config.beta = opt.beta;
  config.layers = layers;

  DemoContext ctx{sm.model, probes, report.values, {}, opt.decode, {}};
  std::array<SteeringPlan, 2> neuron_plans;
  std::array<SteeringPlan, 2> control_plans;
  for (std::size_t v = 0; v < 2; ++v) {
    report.probe_accuracy[v].clear();
    for (const auto& row : layer_accuracy_report(probes))
      if (row.value == report.values[v]) report.probe_accuracy[v].push_back(row);
    const auto selection = build_selection_for_value(sm.model, probes, report.values[v], alpha);
    report.selection_matches_truth[v] = matches_truth(selection, sm.truth.find(report.values[v]));
    neuron_plans[v] = plan_neuron_edit(selection, config);
    EditConfig zero = config;
    zero.beta = 0.0;
    control_plans[v] = plan_neuron_edit(selection, zero);
    ctx.questions[v] = synth_questions(sm.truth, report.values[v], opt.questions, opt.seed * 1000 + 21 + v);
  }

  for (std::size_t j = 0; j < 2; ++j) report.base_rates[j] = ctx.rate(j, nullptr);

  report.neuron.method = "neuron-edit";
  report.neuron.beta = opt.beta;
  report.control.method = "neuron-edit-beta0";
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      report.neuron.rates[i][j] = ctx.rate(j, &neuron_plans[i]);
      report.control.rates[i][j] = ctx.rate(j, &control_plans[i]);
    }

  // Dense arm: smallest gamma whose target gain reaches the lower edge of the tolerance band.
  report.dense.method = "dense-probe";
  for (std::size_t i = 0; i < 2; ++i) {
    const double target = report.neuron.rates[i][i] - report.base_rates[i];
    auto dense_gain = [&](double gamma) {
      const auto plan = plan_dense_probe(probes, report.values[i], gamma);
      return ctx.rate(i, &plan) - report.base_rates[i];
    };
    double gamma = 0.0;
    bool ok = target > 0.0;
    if (ok) {
      const double floor_gain = (1.0 - opt.gain_tolerance) * target;
      double lo = 0.0;
      double hi = 1.0;
      while (dense_gain(hi) < floor_gain && hi < 1e4) hi *= 2.0;
      for (int iter = 0; iter < 40; ++iter) {
        const double mid = 0.5 * (lo + hi);
        (dense_gain(mid) >= floor_gain ? hi : lo) = mid;
      }
      gamma = hi;
      ok = std::abs(dense_gain(gamma) - target) <= opt.gain_tolerance * target;
    }
    report.dense.gamma[i] = gamma;
    report.dense.calibrated = report.dense.calibrated && ok;
    const auto plan = plan_dense_probe(probes, report.values[i], gamma);
    for (std::size_t j = 0; j < 2; ++j) report.dense.rates[i][j] = ctx.rate(j, &plan);
  }
  report.neuron.calibrated = report.dense.calibrated;

  score_arm(report.neuron, report.values, report.base_rates, report.epsilon);
  score_arm(report.dense, report.values, report.base_rates, report.epsilon);
  score_arm(report.control, report.values, report.base_rates, report.epsilon);
  report.relative_reduction =
      report.dense.offtarget_nlr > 0.0 ? 1.0 - report.neuron.offtarget_nlr / report.dense.offtarget_nlr : 0.0;
  return report;
}

nlohmann::json to_json(const DemoReport& r) {
  auto arm = [](const DemoArm& a) {
    return nlohmann::json{{"method", a.method},       {"beta", a.beta}, {"gamma", a.gamma},
                          {"rates", a.rates},         {"gain", a.gain}, {"leak", a.leak},
                          {"nlr", a.nlr},             {"offtarget_nlr", a.offtarget_nlr},
                          {"calibrated", a.calibrated}};
  };
  nlohmann::json probes = nlohmann::json::array();
  for (const auto& rows : r.probe_accuracy)
    for (const auto& row : rows)
      probes.push_back({{"value", std::string(name_of(row.value))},
                        {"layer", row.layer},
                        {"val_accuracy", row.accuracy},
                        {"kept", row.kept}});
  return {
      {"seed", r.seed},
      {"values", {std::string(name_of(r.values[0])), std::string(name_of(r.values[1]))}},
      {"proxy_note", "rates are probe-based proxies, not judged CSR"},
      {"base_rates", r.base_rates},
      {"probes", probes},
      {"selection_matches_truth", r.selection_matches_truth},
      {"neuron_edit", arm(r.neuron)},
      {"dense_probe", arm(r.dense)},
      {"control_beta0", arm(r.control)},
      {"relative_reduction", r.relative_reduction},
      {"epsilon", r.epsilon},
      {"neuron_leaks_less", r.neuron_leaks_less()},
  };
}

std::string render_demo_text(const DemoReport& r) {
  std::string out;
  out += fmt::format("synthetic demo, seed {}\n", r.seed);
  out += fmt::format("values: {} / {} (proxy rates, not judged CSR)\n", name_of(r.values[0]), name_of(r.values[1]));
  out += fmt::format("base proxy rates: {:.4f} {:.4f}\n", r.base_rates[0], r.base_rates[1]);
  out += fmt::format("selection matches planted neurons: {} {}\n", r.selection_matches_truth[0],
                     r.selection_matches_truth[1]);
  for (const DemoArm* a : {&r.neuron, &r.dense, &r.control}) {
    out += fmt::format("{:<18} gain {:.4f} {:.4f}  leak {:.4f} {:.4f}  off-target NLR {:.6f}", a->method, a->gain[0],
                       a->gain[1], a->leak[0], a->leak[1], a->offtarget_nlr);
    if (a == &r.dense) out += fmt::format("  gamma {:.6f} {:.6f}", a->gamma[0], a->gamma[1]);
    out += "\n";
  }
  out += fmt::format("calibrated: {}\n", r.dense.calibrated);
  out += fmt::format("relative NLR reduction: {:.4f}\n", r.relative_reduction);
  out += fmt::format("neuron editing leaks less: {}\n", r.neuron_leaks_less());
  return out;
}

}  // namespace valsteer
