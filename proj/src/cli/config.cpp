#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "valsteer/cli.hpp"
#include "valsteer/error.hpp"
#include "valsteer/hashing.hpp"
#include "valsteer/steering.hpp"

namespace valsteer::cli {

namespace fs = std::filesystem;

namespace {

void check_keys(const nlohmann::json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw UsageError(where + " must be an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.contains(key)) throw UsageError("unknown config key '" + where + "." + key + "'");
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError("config: " + msg);
}

std::vector<ValueId> value_list(const nlohmann::json& j) {
  std::vector<ValueId> out;
  for (const auto& name : j) {
    const auto v = parse_value(name.get<std::string>());
    require(v.has_value(), "unknown value '" + name.get<std::string>() + "'");
    out.push_back(*v);
  }
  return out;
}

std::map<ValueId, double> read_gamma(const nlohmann::json& j, const std::string& key) {
  if (!j.is_object()) throw UsageError(key + " must be an object of value -> number");
  std::map<ValueId, double> out;
  for (const auto& [name, g] : j.items()) {
    const auto v = parse_value(name);
    require(v.has_value(), key + ": unknown value '" + name + "'");
    require(g.is_number() && std::isfinite(g.get<double>()), key + "." + name + " must be a finite number");
    out[*v] = g.get<double>();
  }
  return out;
}

nlohmann::json gamma_json(const std::map<ValueId, double>& m) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [v, g] : m) out[std::string(name_of(v))] = g;
  return out;
}

nlohmann::json values_json(const std::vector<ValueId>& vs) {
  auto out = nlohmann::json::array();
  for (auto v : vs) out.push_back(std::string(name_of(v)));
  return out;
}

}  // namespace

std::string RunConfig::resolve(const std::string& path) const {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

double RunConfig::caa_gamma_for(ValueId v) const {
  const auto it = caa_gamma.find(v);
  return it == caa_gamma.end() ? default_caa_gamma(v) : it->second;
}

double RunConfig::conva_gamma_for(ValueId v) const {
  const auto it = conva_gamma.find(v);
  return it == conva_gamma.end() ? 1.0 : it->second;
}

RunConfig config_from_json(const nlohmann::json& doc, const std::string& base_dir) {
  RunConfig c;
  c.base_dir = base_dir;
  check_keys(doc,
             {"model_path", "synth", "probe_dataset", "questions", "values", "probe_layers", "edit_layers", "tau",
              "alpha", "beta", "epsilon", "caa_gamma", "conva_gamma", "seed", "jobs", "out", "probe", "decode", "judge",
              "definitions", "taxonomy", "fill_missing"},
             "config");
  try {
    c.model_path = doc.value("model_path", c.model_path);
    if (doc.contains("synth")) {
      const auto& s = doc.at("synth");
      check_keys(s, {"seed", "model", "values", "cosine", "n_aligned", "n_opposed", "probe_pairs", "questions"},
                 "synth");
      SynthSpec spec;
      spec.seed = s.value("seed", spec.seed);
      if (s.contains("model")) spec.model = model_config_from_json(s.at("model"));
      if (s.contains("values")) spec.values = value_list(s.at("values"));
      spec.cosine = s.value("cosine", spec.cosine);
      spec.n_aligned = s.value("n_aligned", spec.n_aligned);
      spec.n_opposed = s.value("n_opposed", spec.n_opposed);
      spec.probe_pairs = s.value("probe_pairs", spec.probe_pairs);
      spec.questions = s.value("questions", spec.questions);
      require(std::abs(spec.cosine) < 1.0, "synth.cosine must be in (-1, 1)");
      require(!spec.values.empty(), "synth.values must not be empty");
      c.synth = spec;
    }
    c.probe_dataset = doc.value("probe_dataset", c.probe_dataset);
    c.questions = doc.value("questions", c.questions);
    if (doc.contains("values")) c.values = value_list(doc.at("values"));
    c.probe_layers = doc.value("probe_layers", c.probe_layers);
    c.edit_layers = doc.value("edit_layers", c.edit_layers);
    c.tau = doc.value("tau", c.tau);
    c.alpha = doc.value("alpha", c.alpha);
    c.beta = doc.value("beta", c.beta);
    c.epsilon = doc.value("epsilon", c.epsilon);
    if (doc.contains("caa_gamma")) c.caa_gamma = read_gamma(doc.at("caa_gamma"), "caa_gamma");
    if (doc.contains("conva_gamma")) c.conva_gamma = read_gamma(doc.at("conva_gamma"), "conva_gamma");
    c.seed = doc.value("seed", c.seed);
    c.jobs = doc.value("jobs", c.jobs);
    c.out = doc.value("out", c.out);
    if (doc.contains("probe")) {
      const auto& p = doc.at("probe");
      check_keys(p, {"epochs", "learning_rate", "l2", "train_fraction"}, "probe");
      c.epochs = p.value("epochs", c.epochs);
      c.learning_rate = p.value("learning_rate", c.learning_rate);
      c.l2 = p.value("l2", c.l2);
      c.train_fraction = p.value("train_fraction", c.train_fraction);
    }
    if (doc.contains("decode")) c.decode = decode_params_from_json(doc.at("decode"));
    if (doc.contains("judge")) {
      const auto& j = doc.at("judge");
      check_keys(j,
                 {"mode", "base_url", "path", "model", "api_key_env", "timeout_seconds", "transcript", "mock_response",
                  "max_retries", "initial_backoff_ms", "concurrency", "fluency"},
                 "judge");
      c.judge.mode = j.value("mode", c.judge.mode);
      c.judge.http = http_judge_config_from_json(j);
      c.judge.transcript = j.value("transcript", c.judge.transcript);
      c.judge.mock_response = j.value("mock_response", c.judge.mock_response);
      c.judge.max_retries = j.value("max_retries", c.judge.max_retries);
      c.judge.initial_backoff_ms = j.value("initial_backoff_ms", c.judge.initial_backoff_ms);
      c.judge.concurrency = j.value("concurrency", c.judge.concurrency);
      c.judge.fluency = j.value("fluency", c.judge.fluency);
    }
    if (doc.contains("definitions")) c.definitions = definitions_from_json(doc.at("definitions"));
    if (doc.contains("taxonomy")) {
      const auto& t = doc.at("taxonomy");
      c.taxonomy = t.is_string() ? load_taxonomy_file(c.resolve(t.get<std::string>())) : load_taxonomy(t);
    }
    c.fill_missing = doc.value("fill_missing", c.fill_missing);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }

  require(std::isfinite(c.tau) && c.tau >= 0.0, "tau must be a finite number >= 0");
  require(c.alpha > 0.0 && c.alpha <= 1.0, "alpha must be in (0, 1]");
  require(std::isfinite(c.beta) && c.beta >= 0.0, "beta must be finite and >= 0");
  require(std::isfinite(c.epsilon) && c.epsilon > 0.0, "epsilon must be > 0");
  require(c.jobs >= 1, "jobs must be >= 1");
  require(c.learning_rate > 0.0 && c.l2 >= 0.0, "probe.learning_rate must be > 0 and probe.l2 >= 0");
  require(c.train_fraction > 0.0 && c.train_fraction < 1.0, "probe.train_fraction must be in (0, 1)");
  require(c.judge.concurrency >= 1, "judge.concurrency must be >= 1");
  static const std::set<std::string> kModes = {"proxy", "mock", "replay", "http"};
  require(kModes.contains(c.judge.mode), "judge.mode must be one of proxy, mock, replay, http");
  require(!c.model_path.empty() || c.synth.has_value(), "either model_path or synth is required");
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError(path + ": " + e.what());
  }
  const auto dir = fs::path(path).parent_path();
  return config_from_json(doc, dir.empty() ? "." : dir.string());
}

nlohmann::json canonical_json(const RunConfig& c) {
  nlohmann::json doc;
  doc["model_path"] = c.model_path;
  if (c.synth) {
    doc["synth"] = {{"seed", c.synth->seed},          {"model", to_json(c.synth->model)},
                    {"values", values_json(c.synth->values)}, {"cosine", c.synth->cosine},
                    {"n_aligned", c.synth->n_aligned}, {"n_opposed", c.synth->n_opposed},
                    {"probe_pairs", c.synth->probe_pairs}, {"questions", c.synth->questions}};
  }
  doc["probe_dataset"] = c.probe_dataset;
  doc["questions"] = c.questions;
  doc["values"] = values_json(c.values);
  doc["probe_layers"] = c.probe_layers;
  doc["edit_layers"] = c.edit_layers;
  doc["tau"] = c.tau;
  doc["alpha"] = c.alpha;
  doc["beta"] = c.beta;
  doc["epsilon"] = c.epsilon;
  doc["caa_gamma"] = gamma_json(c.caa_gamma);
  doc["conva_gamma"] = gamma_json(c.conva_gamma);
  doc["seed"] = c.seed;
  doc["probe"] = {{"epochs", c.epochs}, {"learning_rate", c.learning_rate}, {"l2", c.l2},
                  {"train_fraction", c.train_fraction}};
  doc["decode"] = to_json(c.decode);
  doc["judge"] = {{"mode", c.judge.mode},
                  {"base_url", c.judge.http.base_url},
                  {"path", c.judge.http.path},
                  {"model", c.judge.http.model},
                  {"api_key_env", c.judge.http.api_key_env},
                  {"timeout_seconds", c.judge.http.timeout_seconds},
                  {"transcript", c.judge.transcript},
                  {"mock_response", c.judge.mock_response},
                  {"max_retries", c.judge.max_retries},
                  {"initial_backoff_ms", c.judge.initial_backoff_ms},
                  {"concurrency", c.judge.concurrency},
                  {"fluency", c.judge.fluency}};
  nlohmann::json defs = nlohmann::json::object();
  for (const auto& [v, text] : c.definitions) defs[std::string(name_of(v))] = text;
  doc["definitions"] = defs;
  doc["taxonomy"] = to_json(c.taxonomy);
  doc["fill_missing"] = c.fill_missing;
  return doc;
}

std::string config_hash(const RunConfig& config) { return sha256_hex(canonical_json(config).dump()); }

}  // namespace valsteer::cli
