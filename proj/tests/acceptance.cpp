// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "leakage_oracle.hpp"
#include "test_util.hpp"
#include "valsteer/cli.hpp"
#include "valsteer/demo.hpp"
#include "valsteer/judge.hpp"
#include "valsteer/leakage.hpp"
#include "valsteer/neurons.hpp"
#include "valsteer/probes.hpp"
#include "valsteer/steering.hpp"
#include "valsteer/synth.hpp"

namespace fs = std::filesystem;
using namespace valsteer;

namespace {

/// Collects failures for one criterion; the first few are printed.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (failures_ <= 5) messages_.push_back(what);
  }
  [[nodiscard]] bool ok() const noexcept { return failures_ == 0; }
  [[nodiscard]] std::size_t failures() const noexcept { return failures_; }
  [[nodiscard]] const std::vector<std::string>& messages() const noexcept { return messages_; }
  std::string note;

 private:
  std::size_t failures_ = 0;
  std::vector<std::string> messages_;
};

struct Criterion {
  int id;
  std::string name;
  double limit_seconds;  // 0: no runtime bound
  std::function<void(Check&)> body;
};

double sgn(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

std::vector<float> planted_unit(std::mt19937_64& rng, std::size_t d) { return random_unit_vector(rng, d); }

SynthModel planted_model(std::uint64_t seed) {
  const auto [a, b] = unit_pair_with_cosine(seed, 32, 0.5);
  const std::vector<PlantedValue> planted = {{ValueId::Achievement, a, 3, 2}, {ValueId::Power, b, 3, 2}};
  return synth_model(seed, ModelConfig{}, planted);
}

// --- 1 ------------------------------------------------------------------------

void editing_rule(Check& c) {
  std::vector<double> ms = {-3.5, -1.0, -0.4, -1e-9, 0.0, 1e-9, 0.2, 0.5, 1.0, 4.25};
  std::vector<double> ss = {-0.9, -0.3, -1e-6, 1e-6, 0.2, 0.3, 1.0};
  std::vector<double> betas = {0.0, 0.25, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.5};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int i = 0; i < 200; ++i) ms.push_back(u(rng));
  std::size_t cases = 0;
  for (double m : ms)
    for (double s : ss)
      for (double beta : betas) {
        const double expected = m * (1.0 + sgn(m) * sgn(s) * beta);
        const double got = edit_activation(m, s, beta);
        c.expect(std::abs(got - expected) <= 1e-12, fmt::format("m={} s={} beta={}: {} vs {}", m, s, beta, got, expected));
        ++cases;
      }
  // Worked values for every sign combination at the default beta.
  c.expect(std::abs(edit_activation(0.5, 0.2, 0.9) - 0.95) <= 1e-12, "(+,+)");
  c.expect(std::abs(edit_activation(-0.4, 0.3, 0.9) + 0.04) <= 1e-12, "(-,+)");
  c.expect(std::abs(edit_activation(-0.4, -0.3, 0.9) + 0.76) <= 1e-12, "(-,-)");
  c.expect(std::abs(edit_activation(0.5, -0.2, 0.9) - 0.05) <= 1e-12, "(+,-)");

  // beta = 0 on every neuron of every layer leaves the forward pass bit-for-bit unchanged.
  const auto sm = planted_model(11);
  Interventions zero;
  for (std::uint32_t l = 0; l < sm.model.config().n_layers; ++l) {
    EditHook hook;
    hook.layer = l;
    for (std::uint32_t k = 0; k < sm.model.config().n_neurons; ++k) hook.edits.push_back({k, k % 2 ? 1 : -1, 0.0});
    zero.edits.push_back(hook);
  }
  const auto spec = CaptureSpec::everything(sm.model.config());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 r(seed);
    std::vector<TokenId> tokens(12);
    for (auto& t : tokens) t = sm.truth.context_tokens[r() % sm.truth.context_tokens.size()];
    const auto a = forward(sm.model, tokens, spec);
    const auto b = forward(sm.model, tokens, spec, zero);
    const auto& la = a.logits.data();
    const auto& lb = b.logits.data();
    c.expect(la.size() == lb.size() && std::memcmp(la.data(), lb.data(), la.size() * sizeof(float)) == 0,
             "beta=0 logits differ");
    for (const auto& [l, h] : a.residual_last_token)
      c.expect(std::memcmp(h.data(), b.residual_last_token.at(l).data(), h.size() * sizeof(float)) == 0,
               fmt::format("beta=0 residual differs at layer {}", l));
  }
  c.note = fmt::format("{} grid cases", cases);
}

// --- 2 ------------------------------------------------------------------------

void projection_monotonicity(Check& c) {
  const auto sm = planted_model(21);
  const auto& cfg = sm.model.config();
  std::mt19937_64 rng(22);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::size_t triples = 0;
  for (int trial = 0; trial < 24; ++trial) {
    // Target direction: a planted one or a random one.
    std::vector<float> w = trial % 3 == 2 ? planted_unit(rng, cfg.d_model) : sm.truth.values[trial % 2].direction;
    const std::uint32_t layer = static_cast<std::uint32_t>(trial % cfg.n_layers);
    Probe probe;
    probe.layer = layer;
    probe.direction = w;
    const auto scores = similarity_scores(sm.model, probe);
    const double beta = unit(rng);
    EditHook hook;
    hook.layer = layer;
    for (const auto& sc : scores)
      if (sc.s != 0.0) hook.edits.push_back({sc.neuron, sc.s > 0 ? 1 : -1, beta});
    Interventions iv;
    iv.edits.push_back(hook);

    std::vector<TokenId> tokens(16);
    for (auto& t : tokens) t = static_cast<TokenId>(rng() % cfg.vocab_size);
    CaptureSpec spec;
    spec.activation_layers = {layer};
    spec.logits = LogitsCapture::None;
    const auto trace = forward(sm.model, tokens, spec, iv);
    const auto& before = trace.neuron_activations.at(layer);
    const auto& after = trace.edited_activations.at(layer);
    for (std::size_t t = 0; t < before.rows(); ++t)
      for (const auto& e : hook.edits) {
        const double cosv = scores[e.neuron].s;
        const double m = before(t, e.neuron);
        const double m_edit = after(t, e.neuron);
        c.expect(m_edit * cosv >= m * cosv - 1e-10,
                 fmt::format("layer {} neuron {} token {}: {} < {}", layer, e.neuron, t, m_edit * cosv, m * cosv));
        ++triples;
      }
  }
  c.expect(triples >= 10000, fmt::format("only {} triples", triples));
  c.note = fmt::format("{} triples", triples);
}

// --- 3 ------------------------------------------------------------------------

void probe_pipeline(Check& c) {
  // Planted separable pairs in d = 32: a shared context vector with +/- a margin along u.
  constexpr std::size_t d = 32;
  constexpr std::size_t n_pairs = 100;
  std::mt19937_64 rng(31);
  std::normal_distribution<double> normal;
  std::vector<double> u(d);
  for (auto& x : u) x = normal(rng);
  const double nu = std::sqrt(std::inner_product(u.begin(), u.end(), u.begin(), 0.0));
  for (auto& x : u) x /= nu;

  std::vector<ProbeExample> examples;
  std::vector<std::vector<double>> rows;
  for (std::size_t p = 0; p < n_pairs; ++p) {
    std::vector<double> z(d);
    for (auto& x : z) x = normal(rng);
    const double along = std::inner_product(z.begin(), z.end(), u.begin(), 0.0);
    const double margin = 1.0 + std::abs(normal(rng));
    for (int label : {1, 0}) {
      std::vector<double> h(d);
      for (std::size_t j = 0; j < d; ++j) h[j] = z[j] - along * u[j] + (label ? margin : -margin) * u[j];
      ProbeExample ex;
      ex.tokens = {static_cast<TokenId>(rows.size())};
      ex.label = label;
      ex.pair_id = fmt::format("pair-{}", p);
      examples.push_back(ex);
      rows.push_back(h);
    }
  }
  const auto [train, val] = split_dataset(examples, SplitRatio{}, 7);
  c.expect(train.size() == 140 && val.size() == 60, fmt::format("split {}/{}", train.size(), val.size()));
  std::map<std::string, int> side;
  for (const auto& ex : train) side[ex.pair_id] |= 1;
  for (const auto& ex : val) side[ex.pair_id] |= 2;
  for (const auto& [id, s] : side) c.expect(s != 3, "pair " + id + " split across train and val");

  auto gather = [&](const std::vector<ProbeExample>& part) {
    LayerFeatures f;
    f.features = MatrixD(part.size(), d);
    for (std::size_t i = 0; i < part.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) f.features(i, j) = rows[part[i].tokens[0]][j];
      f.labels.push_back(part[i].label);
    }
    return f;
  };
  const auto tr = gather(train);
  const auto va = gather(val);
  ProbeSet set;
  Probe probe = train_probe(tr.features, tr.labels, ProbeHyper{});
  probe.value = ValueId::Benevolence;
  probe.layer = 0;
  set.add(probe);
  ValidationFeatures vf;
  vf[ValueId::Benevolence][0] = va;
  const auto filtered = validate_and_filter(set, vf, 0.95);
  const double acc = filtered.get(ValueId::Benevolence, 0).val_accuracy;
  c.expect(acc >= 0.95, fmt::format("validation accuracy {}", acc));
  c.expect(filtered.kept_layers(ValueId::Benevolence).contains(0), "probe not kept at tau 0.95");

  // Analytic gradient against central differences of an independent loss.
  auto loss_ref = [&](const std::vector<double>& w, double b, const LayerFeatures& f, const std::vector<int>& y) {
    double total = 0.0;
    for (std::size_t i = 0; i < f.features.rows(); ++i) {
      double z = b;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * f.features(i, j);
      total += y[i] ? std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    }
    return total / static_cast<double>(f.features.rows()) + 0.5 * 1e-4 * std::inner_product(w.begin(), w.end(), w.begin(), 0.0);
  };
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<int> y = tr.labels;
    for (std::size_t i = 0; i < 10; ++i) y[(trial * 31 + i * 7) % y.size()] ^= 1;  // break separability
    std::vector<double> w(d);
    for (auto& x : w) x = 0.5 * normal(rng);
    const double b = 0.3 * normal(rng);
    const auto obj = probe_objective(w, b, tr.features, y, 1e-4);
    const double h = 1e-6;
    auto rel = [](double a, double n) { return std::abs(a - n) / std::max(1e-8, std::abs(a) + std::abs(n)); };
    for (std::size_t j = 0; j < d; ++j) {
      auto wp = w, wm = w;
      wp[j] += h;
      wm[j] -= h;
      const double fd = (loss_ref(wp, b, tr, y) - loss_ref(wm, b, tr, y)) / (2 * h);
      worst = std::max(worst, rel(obj.grad_w[j], fd));
    }
    const double fd_b = (loss_ref(w, b + h, tr, y) - loss_ref(w, b - h, tr, y)) / (2 * h);
    worst = std::max(worst, rel(obj.grad_b, fd_b));
  }
  c.expect(worst < 1e-5, fmt::format("gradient relative error {}", worst));

  // The same pipeline end to end on a planted model: the middle layers must be kept.
  const auto sm = planted_model(3);
  const auto model_examples = synth_probe_dataset(sm.truth, ValueId::Achievement, 100, 33);
  const auto probes = train_probes(sm.model, model_examples, {1, 2}, SplitRatio{}, ProbeHyper{}, 0.95);
  for (std::uint32_t l : {1u, 2u}) {
    c.expect(probes.get(ValueId::Achievement, l).val_accuracy >= 0.95,
             fmt::format("planted model layer {} accuracy {}", l, probes.get(ValueId::Achievement, l).val_accuracy));
    c.expect(probes.kept_layers(ValueId::Achievement).contains(l), fmt::format("layer {} not kept", l));
  }
  c.note = fmt::format("val acc {:.3f}, grad rel err {:.2e}", acc, worst);
}

// --- 4 ------------------------------------------------------------------------

std::vector<std::uint32_t> sorted_ids(const std::vector<SelectedNeuron>& xs) {
  std::vector<std::uint32_t> out;
  for (const auto& x : xs) out.push_back(x.neuron);
  std::sort(out.begin(), out.end());
  return out;
}

void neuron_identification(Check& c) {
  std::size_t layers_checked = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto sm = planted_model(seed);
    const auto n = sm.model.config().n_neurons;
    c.expect(n == 64, "N != 64");
    const double alpha = 5.0 / 64.0;
    c.expect(top_k_count(alpha, n) == 5, "K != 5");
    for (const auto& pt : sm.truth.values) {
      std::map<std::uint32_t, std::vector<NeuronScore>> scores;
      Probe probe;
      probe.value = pt.value;
      probe.direction = pt.direction;
      for (std::uint32_t l = 0; l < sm.model.config().n_layers; ++l) {
        probe.layer = l;
        scores[l] = similarity_scores(sm.model, probe);
      }
      const auto sel = select_neurons(scores, alpha, pt.value);
      for (const auto& [l, ls] : sel.layers) {
        c.expect(sorted_ids(ls.aligned) == pt.layers[l].aligned,
                 fmt::format("seed {} {} layer {} aligned set", seed, name_of(pt.value), l));
        c.expect(sorted_ids(ls.opposed) == pt.layers[l].opposed,
                 fmt::format("seed {} {} layer {} opposed set", seed, name_of(pt.value), l));
        ++layers_checked;
      }
    }
  }

  // Top-K against a full stable sort by |s| descending.
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    std::vector<double> s(n);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (auto& x : s) x = trial % 4 == 0 ? std::round(u(rng) * 4.0) / 4.0 : u(rng);  // ties on every 4th
    const std::size_t k = 1 + rng() % n;
    std::vector<std::uint32_t> order(n);
    std::iota(order.begin(), order.end(), 0u);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return std::abs(s[a]) > std::abs(s[b]); });
    order.resize(k);
    auto got = top_k_by_magnitude(s, k);
    std::sort(order.begin(), order.end());
    std::sort(got.begin(), got.end());
    c.expect(got == order, fmt::format("top-k mismatch on trial {}", trial));
  }
  c.note = fmt::format("{} planted layers, 1000 top-k vectors", layers_checked);
}

// --- 5 ------------------------------------------------------------------------

void leakage_oracle(Check& c) {
  const auto tax = default_taxonomy();
  std::mt19937_64 rng(51);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto table = vtest::random_csr_table(rng);
    const auto report = build_report(table, tax, 1e-6);
    const auto oracle = vtest::oracle_report(table, tax, 1e-6);
    worst = std::max(worst, vtest::oracle_deviation(report, oracle));

    for (std::size_t g = 0; g < kNumGroups; ++g) {
      const double row = std::accumulate(report.group_normalized[g].begin(), report.group_normalized[g].end(), 0.0);
      if (report.zero_rows[g])
        c.expect(row == 0.0, "zero row is not zero");
      else
        c.expect(std::abs(row - 1.0) <= 1e-9, fmt::format("group row {} sums to {}", g, row));
    }
    // Clipping identity: leak = max(delta, 0) and delta = leak - max(-delta, 0), exactly.
    double leak_total = 0.0;
    for (std::size_t i = 0; i < kNumValues; ++i)
      for (std::size_t j = 0; j < kNumValues; ++j) {
        const double dlt = report.delta_s[i][j];
        c.expect(report.leak[i][j] == std::max(dlt, 0.0), "leak is not the clipped delta");
        c.expect(report.leak[i][j] - std::max(-dlt, 0.0) == dlt, "clipping identity");
        if (i != j) leak_total += report.leak[i][j];
      }
    // Mass conservation: the group matrix redistributes exactly the off-diagonal leak.
    double group_total = 0.0;
    for (const auto& row : report.group_matrix)
      for (double x : row) group_total += x;
    c.expect(std::abs(group_total - leak_total) <= 1e-12, fmt::format("mass {} vs {}", group_total, leak_total));
  }
  // Mass conservation holds exactly when a single off-diagonal cell leaks.
  CsrTable one;
  for (std::size_t i = 0; i < kNumValues; ++i) one.intervened[i][i] = 0.5;
  one.intervened[2][7] = 0.375;
  const auto single = build_report(one, tax);
  double single_total = 0.0;
  for (const auto& row : single.group_matrix)
    for (double x : row) single_total += x;
  c.expect(single_total == 0.375, "single-cell mass not exact");
  c.expect(worst <= 1e-9, fmt::format("oracle deviation {}", worst));
  c.note = fmt::format("max oracle deviation {:.2e}", worst);
}

// --- 6 ------------------------------------------------------------------------

void leakage_reduction(Check& c) {
  std::string summary;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    DemoOptions opt;
    opt.seed = seed;
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = run_synth_demo(opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(secs < 60.0, fmt::format("seed {} took {:.1f} s", seed, secs));
    c.expect(opt.model.n_layers == 4 && opt.direction_cosine == 0.5, "demo shape");
    for (std::size_t i = 0; i < 2; ++i) {
      const double target = r.neuron.gain[i];
      c.expect(target > 0.0 && std::abs(r.dense.gain[i] - target) <= 0.10 * target,
               fmt::format("seed {} value {} gains {} vs {} not within 10%", seed, i, r.dense.gain[i], target));
    }
    c.expect(r.neuron.offtarget_nlr < r.dense.offtarget_nlr,
             fmt::format("seed {} neuron NLR {} >= dense {}", seed, r.neuron.offtarget_nlr, r.dense.offtarget_nlr));
    c.expect(r.relative_reduction >= 0.20, fmt::format("seed {} reduction {}", seed, r.relative_reduction));
    summary += fmt::format("{}{:.2f}", summary.empty() ? "" : " ", r.relative_reduction);
  }
  c.note = "relative reductions " + summary;
}

// --- 7 ------------------------------------------------------------------------

void judge_aggregation(Check& c) {
  EvaluateOptions opts;
  opts.sleep = [](std::chrono::milliseconds) {};
  opts.concurrency = 4;

  std::vector<std::string> csr_prompts;
  for (int i = 0; i < 100; ++i)
    csr_prompts.push_back(build_csr_prompt(ValueId::Achievement, definition_for(default_definitions(), ValueId::Achievement),
                                           fmt::format("question {}", i), fmt::format("answer {}", i)));
  MockJudge csr_judge("No");
  for (int i = 0; i < 52; ++i) csr_judge.script(csr_prompts[(i * 37) % 100], "Yes");
  const auto csr = evaluate(csr_judge, VerdictKind::Csr, csr_prompts, opts);
  c.expect(csr_rate(csr.verdicts) == 0.52, fmt::format("CSR rate {}", csr_rate(csr.verdicts)));
  c.expect(csr.excluded == 0, "CSR exclusions");

  std::vector<std::string> fr_prompts;
  for (int i = 0; i < 100; ++i) fr_prompts.push_back(build_fr_prompt(fmt::format("answer {}", i)));
  MockJudge fr_judge("False");
  for (int i = 0; i < 98; ++i) fr_judge.script(fr_prompts[i], "True");
  const auto fr = evaluate(fr_judge, VerdictKind::Fr, fr_prompts, opts);
  c.expect(fr_rate(fr.verdicts) == 0.98, fmt::format("FR rate {}", fr_rate(fr.verdicts)));

  // Two unparseable replies leave 50 yes out of 98 counted, and both are reported.
  MockJudge mixed("No");
  for (int i = 0; i < 50; ++i) mixed.script(csr_prompts[i], "Yes.");
  mixed.script(csr_prompts[98], "I cannot tell");
  mixed.script(csr_prompts[99], "");
  const auto m = evaluate(mixed, VerdictKind::Csr, csr_prompts, opts);
  c.expect(m.excluded == 2, fmt::format("excluded {}", m.excluded));
  c.expect(csr_rate(m.verdicts) == 50.0 / 98.0, fmt::format("mixed rate {}", csr_rate(m.verdicts)));
  c.note = "0.52 / 0.98, 2 excluded";
}

// --- 8 ------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> files;
  if (!fs::exists(root)) return files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files[fs::relative(e.path(), root).string()] = slurp(e.path());
  return files;
}

void determinism(Check& c) {
  const auto dir = vtest::scratch_dir("acceptance_roundtrip");
  const auto sm = planted_model(8);

  // Weights.
  save_weights(sm.model, (dir / "m.nstr").string());
  const auto back = load_weights((dir / "m.nstr").string());
  c.expect(serialize_weights(back) == serialize_weights(sm.model), "weights round-trip");
  c.expect(back.config() == sm.model.config(), "weights config round-trip");

  // Probes.
  const auto examples = synth_probe_dataset(sm.truth, ValueId::Power, 60, 81);
  const auto probes = train_probes(sm.model, examples, {1, 2}, SplitRatio{}, ProbeHyper{.epochs = 200}, 0.9);
  save_probe_store(probes, ValueId::Power, (dir / "power.json").string());
  ProbeSet probes_back;
  load_probe_store((dir / "power.json").string(), probes_back);
  c.expect(probes_back.all() == probes.all(), "probe round-trip");
  c.expect(probes_back.kept_layers(ValueId::Power) == probes.kept_layers(ValueId::Power), "kept layers round-trip");

  // Selection and plans.
  if (!probes.kept_layers(ValueId::Power).empty()) {
    const auto sel = build_selection_for_value(sm.model, probes, ValueId::Power, 0.1);
    save_selection(sel, (dir / "sel.json").string());
    c.expect(load_selection((dir / "sel.json").string()) == sel, "selection round-trip");
    EditConfig ec;
    ec.alpha = 0.1;
    ec.layers = {1, 2};
    const std::vector<SteeringPlan> plans = {plan_neuron_edit(sel, ec), plan_dense_probe(probes, ValueId::Power, 0.7)};
    for (std::size_t i = 0; i < plans.size(); ++i) {
      const auto path = (dir / fmt::format("plan{}.json", i)).string();
      save_plan(plans[i], path);
      c.expect(load_plan(path) == plans[i], fmt::format("plan {} round-trip", i));
    }
  } else {
    c.expect(false, "no kept power probe for the selection round-trip");
  }

  // Every CLI command twice with the same config and seed.
  nlohmann::json cfg = {{"synth", {{"questions", 8}}}, {"fill_missing", true}, {"seed", 3}};
  std::ofstream(dir / "config.json") << cfg.dump(2);
  const std::vector<std::vector<std::string>> steps = {
      {"probe-train"},
      {"select"},
      {"generate", "--method", "base"},
      {"generate", "--method", "neva"},
      {"generate", "--method", "conva"},
      {"generate", "--method", "caa"},
      {"eval"},
      {"leakage"},
      {"synth-demo"},
      {"verify"},
  };
  for (const char* run : {"a", "b"}) {
    for (const auto& step : steps) {
      std::vector<std::string> args = {"--config", (dir / "config.json").string(), "--out", (dir / run).string()};
      args.insert(args.end(), step.begin(), step.end());
      std::ostringstream out;
      std::ostringstream err;
      const int code = cli::run(args, out, err);
      c.expect(code == 0, fmt::format("run {} `{}` exited {}: {}", run, step.front(), code, err.str()));
    }
  }
  const auto a = tree(dir / "a");
  const auto b = tree(dir / "b");
  c.expect(!a.empty() && a == b, "CLI outputs differ between identical runs");
  for (const char* must : {"manifest.json", "leakage/neva.json", "demo/seed-3.json", "plans/caa-power.json"})
    c.expect(a.contains(must), std::string("missing output ") + must);
  c.note = fmt::format("{} CLI output files identical", a.size());
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {1, "editing-rule exactness", 1.0, editing_rule},
      {2, "projection monotonicity", 0.0, projection_monotonicity},
      {3, "probe pipeline", 30.0, probe_pipeline},
      {4, "neuron identification", 10.0, neuron_identification},
      {5, "leakage metric oracle", 5.0, leakage_oracle},
      {6, "leakage-reduction analogue", 300.0, leakage_reduction},
      {7, "judge aggregation", 1.0, judge_aggregation},
      {8, "determinism and round-trips", 0.0, determinism},
  };
  int failed = 0;
  for (const auto& cr : criteria) {
    Check check;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.body(check);
    } catch (const std::exception& e) {
      check.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cr.limit_seconds > 0.0)
      check.expect(secs < cr.limit_seconds, fmt::format("runtime {:.2f} s over {:.0f} s", secs, cr.limit_seconds));
    std::cout << fmt::format("{} criterion {}: {} ({:.2f} s){}\n", check.ok() ? "PASS" : "FAIL", cr.id, cr.name, secs,
                             check.note.empty() ? "" : " - " + check.note);
    for (const auto& m : check.messages()) std::cout << "    " << m << "\n";
    if (check.failures() > check.messages().size())
      std::cout << fmt::format("    ... {} more\n", check.failures() - check.messages().size());
    if (!check.ok()) ++failed;
  }
  std::cout << fmt::format("{} of {} criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
