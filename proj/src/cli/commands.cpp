#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "valsteer/cli.hpp"
#include "valsteer/demo.hpp"
#include "valsteer/error.hpp"
#include "valsteer/hashing.hpp"
#include "valsteer/leakage.hpp"
#include "valsteer/neurons.hpp"
#include "valsteer/steering.hpp"
#include "valsteer/synth.hpp"

#ifndef VALSTEER_VERSION
#define VALSTEER_VERSION "dev"
#endif

namespace valsteer::cli {

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<nlohmann::json> read_jsonl(const fs::path& path) {
  std::vector<nlohmann::json> out;
  if (!fs::exists(path)) return out;
  std::ifstream in(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::parse_error& e) {
      throw Error(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<fs::path> files_with_extension(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ext) out.push_back(entry.path());
  std::sort(out.begin(), out.end());
  return out;
}

/// Shared state for one command invocation.
class Session {
 public:
  Session(RunConfig config, std::ostream& out, std::ostream& err)
      : cfg(std::move(config)), hash(config_hash(cfg)), root(cfg.out), out(out), err(err) {
    const auto manifest_path = root / "manifest.json";
    if (fs::exists(manifest_path)) {
      try {
        const auto doc = nlohmann::json::parse(read_file(manifest_path));
        for (const auto& [rel, sha] : doc.at("files").items()) manifest_[rel] = sha.get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, "manifest.json: " + std::string(e.what()));
      }
    }
  }

  RunConfig cfg;
  std::string hash;
  fs::path root;
  std::ostream& out;
  std::ostream& err;

  [[nodiscard]] nlohmann::json provenance() const {
    return {{"tool_version", VALSTEER_VERSION}, {"config_hash", hash}};
  }
  [[nodiscard]] std::string provenance_comment() const {
    return fmt::format("tool_version={} config_hash={}", VALSTEER_VERSION, hash);
  }

  fs::path path(const std::string& rel) const { return root / rel; }

  void write_text(const std::string& rel, const std::string& content) {
    const auto p = path(rel);
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot write " + p.string());
    f << content;
    f.close();
    record(rel);
  }

  void write_json(const std::string& rel, nlohmann::json doc) {
    doc["provenance"] = provenance();
    write_text(rel, doc.dump(2, ' ', false, nlohmann::json::error_handler_t::replace) + "\n");
  }

  void append_line(const std::string& rel, const nlohmann::json& rec) {
    const auto p = path(rel);
    fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary | std::ios::app);
    if (!f) throw Error(ErrorCode::IoFailure, "cannot append to " + p.string());
    f << rec.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) << "\n";
  }

  void record(const std::string& rel) { manifest_[rel] = sha256_hex(read_file(path(rel))); }

  void save_manifest() {
    nlohmann::json files = nlohmann::json::object();
    for (const auto& [rel, sha] : manifest_) files[rel] = sha;
    fs::create_directories(root);
    std::ofstream f(root / "manifest.json", std::ios::binary | std::ios::trunc);
    f << nlohmann::json{{"tool_version", VALSTEER_VERSION}, {"files", files}}.dump(2) << "\n";
  }

  [[nodiscard]] const std::map<std::string, std::string>& manifest() const noexcept { return manifest_; }

  // --- inputs -------------------------------------------------------------

  const TransformerModel& model() {
    if (!model_) {
      if (!cfg.model_path.empty()) {
        model_ = std::make_unique<TransformerModel>(load_weights(cfg.resolve(cfg.model_path)));
      } else {
        auto sm = build_synth();
        model_ = std::make_unique<TransformerModel>(std::move(sm.model));
        truth_ = std::move(sm.truth);
      }
    }
    return *model_;
  }

  std::vector<ProbeExample> probe_examples() {
    std::vector<ProbeExample> all;
    if (!cfg.probe_dataset.empty()) {
      all = load_dataset(cfg.resolve(cfg.probe_dataset), tokenizer);
    } else {
      const auto& truth = synth_truth();
      for (std::size_t v = 0; v < cfg.synth->values.size(); ++v) {
        auto part = synth_probe_dataset(truth, cfg.synth->values[v], cfg.synth->probe_pairs,
                                        cfg.synth->seed * 1000 + 11 + v);
        all.insert(all.end(), part.begin(), part.end());
      }
    }
    if (cfg.values.empty()) return all;
    std::vector<ProbeExample> out;
    for (auto& ex : all)
      if (wanted(ex.value)) out.push_back(std::move(ex));
    return out;
  }

  std::vector<EvalQuestion> questions(const std::string& override_path) {
    const std::string path = override_path.empty() ? cfg.questions : override_path;
    if (!path.empty()) return load_questions(override_path.empty() ? cfg.resolve(path) : path);
    const auto& truth = synth_truth();
    std::vector<EvalQuestion> all;
    for (std::size_t v = 0; v < cfg.synth->values.size(); ++v) {
      auto part = synth_questions(truth, cfg.synth->values[v], cfg.synth->questions, cfg.synth->seed * 1000 + 21 + v);
      all.insert(all.end(), part.begin(), part.end());
    }
    return all;
  }

  ProbeSet load_probes() {
    ProbeSet probes;
    const auto files = files_with_extension(path("probes"), ".json");
    if (files.empty()) throw Error(ErrorCode::NoKeptLayers, "no probe stores under " + path("probes").string() +
                                                                "; run probe-train first");
    for (const auto& f : files) load_probe_store(f.string(), probes);
    return probes;
  }

  [[nodiscard]] bool wanted(ValueId v) const {
    return cfg.values.empty() || std::find(cfg.values.begin(), cfg.values.end(), v) != cfg.values.end();
  }

  [[nodiscard]] std::set<std::uint32_t> edit_layers() {
    if (cfg.edit_layers.empty()) return middle_half_layers(model().config().n_layers);
    return {cfg.edit_layers.begin(), cfg.edit_layers.end()};
  }

  ByteTokenizer tokenizer;

 private:
  SynthModel build_synth() {
    if (!cfg.synth) throw UsageError("config needs model_path or synth");
    const auto& spec = *cfg.synth;
    std::vector<PlantedValue> planted;
    if (spec.values.size() == 2) {
      const auto [a, b] = unit_pair_with_cosine(spec.seed, spec.model.d_model, spec.cosine);
      planted = {{spec.values[0], a, spec.n_aligned, spec.n_opposed}, {spec.values[1], b, spec.n_aligned, spec.n_opposed}};
    } else {
      std::mt19937_64 rng(spec.seed);
      for (auto v : spec.values)
        planted.push_back({v, random_unit_vector(rng, spec.model.d_model), spec.n_aligned, spec.n_opposed});
    }
    return synth_model(spec.seed, spec.model, planted);
  }

  const GroundTruth& synth_truth() {
    if (!cfg.synth) throw UsageError("no dataset path configured and no synth spec to generate one");
    if (!truth_) {
      auto sm = build_synth();
      truth_ = std::move(sm.truth);
      if (!model_ && cfg.model_path.empty()) model_ = std::make_unique<TransformerModel>(std::move(sm.model));
    }
    return *truth_;
  }

  std::map<std::string, std::string> manifest_;
  std::unique_ptr<TransformerModel> model_;
  std::optional<GroundTruth> truth_;
};

// ---------------------------------------------------------------------------

int cmd_probe_train(Session& s) {
  const auto& model = s.model();
  const auto examples = s.probe_examples();
  std::set<std::uint32_t> layers(s.cfg.probe_layers.begin(), s.cfg.probe_layers.end());
  if (layers.empty())
    for (std::uint32_t l = 0; l < model.config().n_layers; ++l) layers.insert(l);
  ProbeHyper hyper{s.cfg.epochs, s.cfg.learning_rate, s.cfg.l2, s.cfg.seed};
  const SplitRatio ratio{s.cfg.train_fraction, 1.0 - s.cfg.train_fraction};
  const ProbeSet probes = train_probes(model, examples, layers, ratio, hyper, s.cfg.tau, s.cfg.jobs);

  std::size_t kept = 0;
  for (auto v : probes.values()) {
    s.write_json("probes/" + std::string(name_of(v)) + ".json", probe_store_document(probes, v));
    kept += probes.kept_layers(v).size();
  }
  std::string csv = "# " + s.provenance_comment() + "\nvalue,layer,val_accuracy,kept\n";
  s.out << fmt::format("{:<16} {:>5} {:>12} {:>5}\n", "value", "layer", "val_accuracy", "kept");
  for (const auto& row : layer_accuracy_report(probes)) {
    csv += fmt::format("{},{},{:.17g},{}\n", name_of(row.value), row.layer, row.accuracy, row.kept ? 1 : 0);
    s.out << fmt::format("{:<16} {:>5} {:>12.4f} {:>5}\n", name_of(row.value), row.layer, row.accuracy,
                         row.kept ? "yes" : "no");
  }
  s.write_text("probe_accuracy.csv", csv);
  s.save_manifest();
  if (kept == 0) {
    s.err << fmt::format("error: no probe reached validation accuracy tau={}; nothing can be selected\n", s.cfg.tau);
    return kExitData;
  }
  return kExitOk;
}

int cmd_select(Session& s) {
  const auto& model = s.model();
  const ProbeSet probes = s.load_probes();
  const auto editable = s.edit_layers();
  std::size_t written = 0;
  for (auto v : probes.values()) {
    if (!s.wanted(v)) continue;
    if (probes.kept_layers(v).empty()) {
      s.err << fmt::format("warning: {} has no kept probe layers; skipped\n", name_of(v));
      continue;
    }
    auto selection = build_selection_for_value(model, probes, v, s.cfg.alpha);
    std::erase_if(selection.layers, [&](const auto& kv) { return !editable.contains(kv.first); });
    if (selection.layers.empty()) {
      s.err << fmt::format("warning: no kept layer of {} is editable; skipped\n", name_of(v));
      continue;
    }
    s.write_json("selections/" + std::string(name_of(v)) + ".json", to_json(selection));
    for (const auto& [layer, ls] : selection.layers)
      s.out << fmt::format("{:<16} layer {:>3}: K={} aligned={} opposed={}\n", name_of(v), layer, ls.k,
                           ls.aligned.size(), ls.opposed.size());
    ++written;
  }
  s.save_manifest();
  if (written == 0) {
    s.err << "error: no value had kept, editable probe layers\n";
    return kExitData;
  }
  return kExitOk;
}

std::optional<SteeringPlan> build_plan(Session& s, const std::string& method, ValueId v, const ProbeSet* probes,
                                       const std::vector<ProbeExample>* examples) {
  if (method == "neva") {
    const auto rel = "selections/" + std::string(name_of(v)) + ".json";
    if (!fs::exists(s.path(rel)))
      throw Error(ErrorCode::NoKeptLayers, "missing selection " + s.path(rel).string() + "; run select first");
    const auto selection = load_selection(s.path(rel).string());
    check_selection_fresh(selection, *probes);
    EditConfig config;
    config.alpha = s.cfg.alpha;
    config.beta = s.cfg.beta;
    config.layers = s.edit_layers();
    return plan_neuron_edit(selection, config);
  }
  if (method == "conva") return plan_dense_probe(*probes, v, s.cfg.conva_gamma_for(v));
  if (method == "caa") {
    std::vector<ProbeExample> mine;
    for (const auto& ex : *examples)
      if (ex.value == v) mine.push_back(ex);
    const auto features = extract_features(s.model(), mine, s.edit_layers(), s.cfg.jobs);
    return plan_dense_caa(matched_pairs(mine, features), s.cfg.caa_gamma_for(v), v);
  }
  return std::nullopt;
}

std::set<std::string> completed_ids(const fs::path& path) {
  std::set<std::string> ids;
  for (const auto& rec : read_jsonl(path)) ids.insert(rec.at("id").get<std::string>());
  return ids;
}

int cmd_generate(Session& s, const std::string& method, const std::string& prompts_path,
                 const std::vector<std::string>& value_names) {
  static const std::set<std::string> kMethods = {"neva", "conva", "caa", "base"};
  if (!kMethods.contains(method)) throw UsageError("--method must be one of neva, conva, caa, base");
  const auto& model = s.model();
  const auto questions = s.questions(prompts_path);
  if (questions.empty()) throw Error(ErrorCode::EmptyDataset, "no prompts to generate from");

  std::vector<ValueId> steer_values;
  for (const auto& name : value_names) {
    const auto v = parse_value(name);
    if (!v) throw UsageError("unknown value '" + name + "'");
    steer_values.push_back(*v);
  }
  std::optional<ProbeSet> probes;
  std::vector<ProbeExample> examples;
  if (method == "neva" || method == "conva") probes = s.load_probes();
  if (method == "caa") examples = s.probe_examples();
  if (steer_values.empty() && method != "base") {
    std::set<ValueId> available;
    if (method == "neva") {
      for (const auto& f : files_with_extension(s.path("selections"), ".json"))
        if (auto v = parse_value(f.stem().string())) available.insert(*v);
    } else if (method == "conva") {
      for (auto v : probes->values())
        if (!probes->kept_layers(v).empty()) available.insert(v);
    } else {
      for (const auto& ex : examples) available.insert(ex.value);
    }
    for (auto v : available)
      if (s.wanted(v)) steer_values.push_back(v);
    if (steer_values.empty()) throw Error(ErrorCode::NoKeptLayers, "no steering artifacts for method " + method);
  }

  struct Steer {
    std::string name;
    std::optional<SteeringPlan> plan;
  };
  std::vector<Steer> steers;
  if (method == "base") {
    steers.push_back({"base", std::nullopt});
  } else {
    for (auto v : steer_values) {
      auto plan = build_plan(s, method, v, probes ? &*probes : nullptr, &examples);
      s.write_json("plans/" + method + "-" + std::string(name_of(v)) + ".json", to_json(*plan));
      steers.push_back({std::string(name_of(v)), std::move(plan)});
    }
  }

  for (const auto& steer : steers) {
    const std::string rel = "generations/" + method + "-" + steer.name + ".jsonl";
    const auto done = completed_ids(s.path(rel));
    const Interventions iv = steer.plan ? steer.plan->interventions() : Interventions{};
    nlohmann::json hyper = nlohmann::json::object();
    if (steer.plan) hyper = to_json(*steer.plan).at("hyper");
    std::size_t made = 0;
    for (const auto& q : questions) {
      if (done.contains(q.id)) continue;
      const auto prompt = s.tokenizer.encode(q.prompt_text);
      const auto tokens = generate(model, prompt, s.cfg.decode, iv);
      const std::span<const TokenId> completion(tokens.data() + prompt.size(), tokens.size() - prompt.size());
      s.append_line(rel, {{"id", q.id},
                          {"method", method},
                          {"steer", steer.name},
                          {"value", std::string(name_of(q.value))},
                          {"prompt", q.prompt_text},
                          {"completion", s.tokenizer.decode(completion)},
                          {"tokens", tokens},
                          {"hyper", hyper},
                          {"decode", to_json(s.cfg.decode)},
                          {"seed", s.cfg.seed},
                          {"tool_version", VALSTEER_VERSION},
                          {"config_hash", s.hash}});
      ++made;
    }
    s.record(rel);
    s.out << fmt::format("{}: {} new, {} already present\n", rel, made, done.size());
  }
  s.save_manifest();
  return kExitOk;
}

// --- eval --------------------------------------------------------------------

std::unique_ptr<JudgeClient> make_client(Session& s) {
  const auto& j = s.cfg.judge;
  if (j.mode == "mock") return std::make_unique<MockJudge>(j.mock_response);
  if (j.mode == "replay") {
    if (j.transcript.empty()) throw UsageError("judge.mode=replay needs judge.transcript");
    return std::make_unique<ReplayJudge>(s.cfg.resolve(j.transcript));
  }
  try {
    return make_http_judge(j.http);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InvalidArgument) throw;
    throw UsageError(e.what());
  }
}

void eval_file(Session& s, const fs::path& gen_file, const ProbeSet* probes, JudgeClient* client,
               TranscriptWriter* transcript) {
  const std::string rel = "verdicts/" + gen_file.filename().string();
  const auto done = completed_ids(s.path(rel));
  std::vector<nlohmann::json> pending;
  for (auto& rec : read_jsonl(gen_file))
    if (!done.contains(rec.at("id").get<std::string>())) pending.push_back(std::move(rec));
  if (pending.empty()) return;

  const std::string method = pending.front().at("method").get<std::string>();
  const std::string steer = pending.front().at("steer").get<std::string>();

  if (s.cfg.judge.mode == "proxy") {
    Interventions iv;
    if (steer != "base") iv = load_plan(s.path("plans/" + method + "-" + steer + ".json").string()).interventions();
    for (const auto& rec : pending) {
      const ValueId v = value_from_name(rec.at("value").get<std::string>());
      nlohmann::json verdict = {{"id", rec.at("id")}, {"method", method}, {"steer", steer},
                                {"value", rec.at("value")}, {"kind", "proxy"}};
      const auto kept = probes->kept_layers(v);
      if (kept.empty()) {
        verdict["parse_ok"] = false;
        verdict["label"] = nullptr;
        verdict["note"] = "no kept probe for value";
      } else {
        const std::uint32_t layer = *kept.rbegin();
        CaptureSpec capture;
        capture.residual_layers = {layer};
        capture.logits = LogitsCapture::None;
        const auto tokens = rec.at("tokens").get<std::vector<TokenId>>();
        const auto trace = forward(s.model(), tokens, capture, iv);
        const double score = probe_score(probes->get(v, layer), trace.residual_last_token.at(layer));
        verdict["parse_ok"] = true;
        verdict["label"] = score > 0.5;
        verdict["score"] = score;
        verdict["layer"] = layer;
      }
      s.append_line(rel, verdict);
    }
    s.record(rel);
    return;
  }

  EvaluateOptions opts;
  opts.max_retries = s.cfg.judge.max_retries;
  opts.initial_backoff = std::chrono::milliseconds(s.cfg.judge.initial_backoff_ms);
  opts.concurrency = s.cfg.judge.concurrency;
  opts.transcript = transcript;
  constexpr std::size_t kChunk = 32;
  for (std::size_t begin = 0; begin < pending.size(); begin += kChunk) {
    const std::size_t end = std::min(pending.size(), begin + kChunk);
    std::vector<std::string> csr_prompts;
    std::vector<std::string> fr_prompts;
    std::vector<std::size_t> asked;  // indices with a nonblank answer
    for (std::size_t i = begin; i < end; ++i) {
      const auto& rec = pending[i];
      const std::string answer = rec.at("completion").get<std::string>();
      if (answer.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      const ValueId v = value_from_name(rec.at("value").get<std::string>());
      csr_prompts.push_back(
          build_csr_prompt(v, definition_for(s.cfg.definitions, v), rec.at("prompt").get<std::string>(), answer));
      if (s.cfg.judge.fluency) fr_prompts.push_back(build_fr_prompt(answer));
      asked.push_back(i);
    }
    const auto csr = evaluate(*client, VerdictKind::Csr, csr_prompts, opts);
    EvaluationResult fr;
    if (s.cfg.judge.fluency) fr = evaluate(*client, VerdictKind::Fr, fr_prompts, opts);
    std::size_t a = 0;
    for (std::size_t i = begin; i < end; ++i) {
      const auto& rec = pending[i];
      nlohmann::json verdict = {{"id", rec.at("id")}, {"method", method}, {"steer", steer},
                                {"value", rec.at("value")}, {"kind", "csr"}};
      if (a < asked.size() && asked[a] == i) {
        const auto& c = csr.verdicts[a];
        verdict["parse_ok"] = c.parse_ok;
        verdict["label"] = c.label ? nlohmann::json(*c.label) : nlohmann::json(nullptr);
        verdict["raw_response"] = c.raw_response;
        if (s.cfg.judge.fluency) {
          const auto& f = fr.verdicts[a];
          verdict["fr"] = {{"parse_ok", f.parse_ok},
                           {"label", f.label ? nlohmann::json(*f.label) : nlohmann::json(nullptr)},
                           {"raw_response", f.raw_response}};
        }
        ++a;
      } else {
        verdict["parse_ok"] = false;
        verdict["label"] = nullptr;
        verdict["note"] = "empty completion";
      }
      s.append_line(rel, verdict);
    }
  }
  s.record(rel);
}

struct Tally {
  std::size_t yes = 0;
  std::size_t ok = 0;
  std::size_t excluded = 0;
};

int cmd_eval(Session& s) {
  const auto gen_files = files_with_extension(s.path("generations"), ".jsonl");
  if (gen_files.empty()) throw Error(ErrorCode::EmptyDataset, "no generations found; run generate first");
  const bool proxy = s.cfg.judge.mode == "proxy";

  std::optional<ProbeSet> probes;
  std::unique_ptr<JudgeClient> client;
  std::unique_ptr<TranscriptWriter> transcript;
  if (proxy) {
    probes = s.load_probes();
  } else {
    std::set<ValueId> needed;
    for (const auto& f : gen_files)
      for (const auto& rec : read_jsonl(f)) needed.insert(value_from_name(rec.at("value").get<std::string>()));
    std::vector<std::string> missing;
    for (auto v : needed)
      if (!s.cfg.definitions.contains(v)) missing.emplace_back(name_of(v));
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      throw UsageError("no value definition configured for: " + list + " (set config.definitions)");
    }
    client = make_client(s);
    if (s.cfg.judge.mode != "replay") {
      const std::string path =
          s.cfg.judge.transcript.empty() ? s.path("judge_transcript.jsonl").string() : s.cfg.resolve(s.cfg.judge.transcript);
      transcript = std::make_unique<TranscriptWriter>(path);
    }
  }
  for (const auto& f : gen_files) eval_file(s, f, probes ? &*probes : nullptr, client.get(), transcript.get());

  // Aggregate per method: cells[steer][value].
  std::map<std::string, std::map<std::string, std::map<ValueId, Tally>>> csr;
  std::map<std::string, std::map<std::string, Tally>> fluency;
  for (const auto& f : files_with_extension(s.path("verdicts"), ".jsonl")) {
    for (const auto& rec : read_jsonl(f)) {
      const auto method = rec.at("method").get<std::string>();
      const auto steer = rec.at("steer").get<std::string>();
      auto& t = csr[method][steer][value_from_name(rec.at("value").get<std::string>())];
      if (rec.at("parse_ok").get<bool>()) {
        ++t.ok;
        if (rec.at("label").get<bool>()) ++t.yes;
      } else {
        ++t.excluded;
      }
      if (rec.contains("fr")) {
        auto& ft = fluency[method][steer];
        if (rec["fr"].at("parse_ok").get<bool>()) {
          ++ft.ok;
          if (rec["fr"].at("label").get<bool>()) ++ft.yes;
        } else {
          ++ft.excluded;
        }
      }
    }
  }

  auto rate_of = [](const Tally& t) -> std::optional<double> {
    if (t.ok == 0) return std::nullopt;
    return static_cast<double>(t.yes) / static_cast<double>(t.ok);
  };
  std::map<ValueId, double> base;
  if (auto it = csr.find("base"); it != csr.end())
    for (const auto& [v, t] : it->second["base"])
      if (auto r = rate_of(t)) base[v] = *r;

  std::size_t excluded_total = 0;
  for (const auto& [method, by_steer] : csr) {
    nlohmann::json frag;
    frag["method"] = method;
    frag["kind"] = proxy ? "proxy" : "judge";
    if (proxy) frag["note"] = "probe-based proxy rates; not comparable to judged CSR";
    nlohmann::json cells = nlohmann::json::object();
    nlohmann::json excluded = nlohmann::json::object();
    for (const auto& [steer, by_value] : by_steer) {
      for (const auto& [v, t] : by_value) {
        const auto r = rate_of(t);
        cells[steer][std::string(name_of(v))] = r ? nlohmann::json(*r) : nlohmann::json(nullptr);
        excluded[steer][std::string(name_of(v))] = t.excluded;
        excluded_total += t.excluded;
      }
    }
    frag["cells"] = cells;
    frag["excluded"] = excluded;
    if (method == "base") {
      s.write_json("csr/base.json", frag);
      continue;
    }
    CsrTable table;
    std::vector<std::string> missing;
    std::vector<std::string> filled;
    for (std::size_t j = 0; j < kNumValues; ++j) {
      const ValueId vj = kAllValues[j];
      if (base.contains(vj)) {
        table.base[j] = base[vj];
      } else {
        missing.push_back("base:" + std::string(name_of(vj)));
      }
    }
    for (std::size_t i = 0; i < kNumValues; ++i) {
      const std::string steer(name_of(kAllValues[i]));
      for (std::size_t j = 0; j < kNumValues; ++j) {
        std::optional<double> r;
        if (auto sit = by_steer.find(steer); sit != by_steer.end())
          if (auto vit = sit->second.find(kAllValues[j]); vit != sit->second.end()) r = rate_of(vit->second);
        if (r) {
          table.intervened[i][j] = *r;
        } else {
          table.intervened[i][j] = table.base[j];
          const std::string cell = "steer:" + steer + "/" + std::string(name_of(kAllValues[j]));
          missing.push_back(cell);
          filled.push_back(cell);
        }
      }
    }
    frag["missing"] = missing;
    s.write_json("csr/" + method + ".json", frag);
    if (!missing.empty())
      s.err << fmt::format("warning: CSR table for {} is incomplete ({} of 110 cells missing)\n", method,
                           missing.size());
    if (missing.empty() || s.cfg.fill_missing) {
      std::string csv = "# " + s.provenance_comment() + "\n";
      csv += fmt::format("# method={} kind={}\n", method, proxy ? "proxy" : "judge");
      if (!filled.empty())
        csv += fmt::format("# {} missing cells filled as null interventions (fill_missing)\n", missing.size());
      csv += csr_table_csv(table);
      s.write_text("csr/" + method + ".csv", csv);
    }
    s.out << fmt::format("{}: {} cells measured, {} missing\n", method, 110 - missing.size(), missing.size());
  }
  if (!fluency.empty()) {
    nlohmann::json fr = nlohmann::json::object();
    for (const auto& [method, by_steer] : fluency)
      for (const auto& [steer, t] : by_steer) {
        const auto r = rate_of(t);
        fr[method][steer] = {{"rate", r ? nlohmann::json(*r) : nlohmann::json(nullptr)}, {"excluded", t.excluded}};
      }
    s.write_json("fluency.json", {{"fluency", fr}});
  }
  if (excluded_total > 0) s.err << fmt::format("note: {} verdicts excluded as unparseable\n", excluded_total);
  s.save_manifest();
  return kExitOk;
}

// --- leakage, demo, verify ---------------------------------------------------------

int cmd_leakage(Session& s, std::vector<std::string> tables) {
  if (tables.empty())
    for (const auto& f : files_with_extension(s.path("csr"), ".csv")) tables.push_back(f.string());
  if (tables.empty()) throw Error(ErrorCode::MissingValue, "no CSR tables given and none under " + s.path("csr").string());
  std::vector<LeakageReport> reports;
  for (const auto& t : tables) {
    const auto table = load_csr_table(t);
    const std::string label = fs::path(t).stem().string();
    auto report = build_report(table, s.cfg.taxonomy, s.cfg.epsilon, label);
    const std::string stem = "leakage/" + label;
    const std::string comment = s.provenance_comment();
    s.write_text(stem + ".txt", "# " + comment + "\n" + render_report(report, ReportFormat::Text));
    s.write_text(stem + ".csv", "# " + comment + "\n" + render_report(report, ReportFormat::Csv));
    s.write_json(stem + ".json", to_json(report));
    s.write_text(stem + ".svg", "<!-- " + comment + " -->\n" + render_report(report, ReportFormat::Svg));
    s.write_text(stem + "-nlr.svg", "<!-- " + comment + " -->\n" + render_nlr_heatmap(report));
    s.out << fmt::format("{}: mean off-diagonal NLR {:.6f}\n", label, report.mean_offdiag_nlr);
    reports.push_back(std::move(report));
  }
  if (reports.size() > 1) s.write_text("leakage/comparison.txt", "# " + s.provenance_comment() + "\n" +
                                                                      render_comparison(reports));
  s.save_manifest();
  return kExitOk;
}

int cmd_synth_demo(Session& s, unsigned runs, bool do_export) {
  bool all_ok = true;
  for (unsigned r = 0; r < std::max(1u, runs); ++r) {
    DemoOptions opt;
    opt.seed = s.cfg.seed + r;
    if (s.cfg.synth) {
      opt.model = s.cfg.synth->model;
      opt.direction_cosine = s.cfg.synth->cosine;
      opt.n_aligned = s.cfg.synth->n_aligned;
      opt.n_opposed = s.cfg.synth->n_opposed;
      if (s.cfg.synth->values.size() == 2) {
        opt.value_a = s.cfg.synth->values[0];
        opt.value_b = s.cfg.synth->values[1];
      }
    }
    // The demo keeps its own short decode; config.decode is for generate.
    const auto report = run_synth_demo(opt);
    const std::string stem = fmt::format("demo/seed-{}", opt.seed);
    s.write_json(stem + ".json", to_json(report));
    const auto text = render_demo_text(report);
    s.write_text(stem + ".txt", "# " + s.provenance_comment() + "\n" + text);
    s.out << text << "\n";
    all_ok = all_ok && report.neuron_leaks_less();
  }
  if (do_export) {
    if (!s.cfg.synth) s.cfg.synth = SynthSpec{};
    const auto& model = s.model();
    s.write_text("synth/model.nstr", [&] {
      const auto bytes = serialize_weights(model);
      return std::string(bytes.begin(), bytes.end());
    }());
    std::string dataset;
    for (const auto& ex : s.probe_examples()) dataset += to_json(ex).dump() + "\n";
    s.write_text("synth/probes.jsonl", dataset);
    std::string qs;
    for (const auto& q : s.questions({}))
      qs += nlohmann::json{{"value", std::string(name_of(q.value))}, {"id", q.id}, {"prompt_text", q.prompt_text}}
                .dump() +
            "\n";
    s.write_text("synth/questions.jsonl", qs);
    s.out << "exported synthetic model and datasets to " << s.path("synth").string() << "\n";
  }
  s.save_manifest();
  if (!all_ok) {
    s.err << "error: neuron editing did not leak less than calibrated dense steering on every seed\n";
    return kExitData;
  }
  return kExitOk;
}

int cmd_verify(Session& s) {
  if (!fs::exists(s.path("manifest.json"))) {
    s.err << "error: no manifest.json under " << s.root.string() << "\n";
    return kExitData;
  }
  std::size_t bad = 0;
  for (const auto& [rel, sha] : s.manifest()) {
    const auto p = s.path(rel);
    if (!fs::exists(p)) {
      s.out << "MISSING  " << rel << "\n";
      ++bad;
    } else if (sha256_hex(read_file(p)) != sha) {
      s.out << "MISMATCH " << rel << "\n";
      ++bad;
    } else {
      s.out << "ok       " << rel << "\n";
    }
  }
  s.out << fmt::format("{} files checked, {} problems\n", s.manifest().size(), bad);
  return bad == 0 ? kExitOk : kExitData;
}

int exit_code_for(ErrorCode code) {
  return code == ErrorCode::EndpointUnreachable || code == ErrorCode::RateLimited ? kExitEndpoint : kExitData;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Neuron-level value steering toolkit", "valsteer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(VALSTEER_VERSION));

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
  std::optional<std::string> out_dir;
  app.add_option("--config", config_path, "JSON configuration file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Random seed (overrides config)");
  app.add_option("--jobs", jobs, "Worker threads (overrides config)")->check(CLI::PositiveNumber);
  app.add_option("--out", out_dir, "Output directory (overrides config)");

  auto* probe_train = app.add_subcommand("probe-train", "Train per-layer value probes and apply the accuracy filter");
  auto* select = app.add_subcommand("select", "Select signed Top-K value neurons from kept probes");
  auto* gen = app.add_subcommand("generate", "Generate answers with a steering method");
  std::string method;
  std::string prompts;
  std::vector<std::string> gen_values;
  gen->add_option("--method", method, "neva | conva | caa | base")->required();
  gen->add_option("--prompts", prompts, "Questions file (overrides config.questions)")->check(CLI::ExistingFile);
  gen->add_option("--value", gen_values, "Steer only these values");
  auto* eval = app.add_subcommand("eval", "Judge or proxy-score generations and assemble CSR tables");
  auto* leak = app.add_subcommand("leakage", "Compute leakage reports from CSR tables");
  std::vector<std::string> tables;
  leak->add_option("--table", tables, "CSR table file(s); defaults to <out>/csr/*.csv")->check(CLI::ExistingFile);
  auto* demo = app.add_subcommand("synth-demo", "Run the planted-model leakage comparison");
  unsigned runs = 1;
  bool do_export = false;
  demo->add_option("--runs", runs, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  demo->add_flag("--export", do_export, "Also write the synthetic model and datasets");
  auto* verify = app.add_subcommand("verify", "Re-check output hashes against manifest.json");
  for (auto* sub : {probe_train, select, gen, eval, leak, demo, verify}) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg = config_path.empty() ? config_from_json({{"synth", nlohmann::json::object()}})
                                        : load_config(config_path);
    if (seed) cfg.seed = *seed;
    if (jobs) cfg.jobs = *jobs;
    if (out_dir) cfg.out = *out_dir;
    Session s(std::move(cfg), out, err);
    if (probe_train->parsed()) return cmd_probe_train(s);
    if (select->parsed()) return cmd_select(s);
    if (gen->parsed()) return cmd_generate(s, method, prompts, gen_values);
    if (eval->parsed()) return cmd_eval(s);
    if (leak->parsed()) return cmd_leakage(s, tables);
    if (demo->parsed()) return cmd_synth_demo(s, runs, do_export);
    if (verify->parsed()) return cmd_verify(s);
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace valsteer::cli
