#include "valsteer/probes.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <future>
#include <random>

#include "valsteer/error.hpp"

namespace valsteer {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + e^z) without overflow.
double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

std::string parse_error_at(const std::string& path, std::size_t line, const std::string& msg) {
  return path + ":" + std::to_string(line) + ": " + msg;
}

}  // namespace

std::vector<ProbeExample> load_dataset(const std::string& path, const Tokenizer& tokenizer) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open dataset " + path);
  std::vector<ProbeExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, parse_error_at(path, line_no, e.what()));
    }
    try {
      ProbeExample ex;
      const auto value = parse_value(rec.at("value").get<std::string>());
      if (!value) throw Error(ErrorCode::UnknownValue, parse_error_at(path, line_no, "unknown value"));
      ex.value = *value;
      ex.label = rec.at("label").get<int>();
      if (ex.label != 0 && ex.label != 1)
        throw Error(ErrorCode::ParseError, parse_error_at(path, line_no, "label must be 0 or 1"));
      ex.text = rec.at("text").get<std::string>();
      if (ex.text.empty()) throw Error(ErrorCode::ParseError, parse_error_at(path, line_no, "empty text"));
      const auto& pid = rec.at("pair_id");
      ex.pair_id = pid.is_string() ? pid.get<std::string>() : pid.dump();
      ex.tokens = tokenizer.encode(ex.text);
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::ParseError, parse_error_at(path, line_no, e.what()));
    }
  }
  return out;
}

nlohmann::json to_json(const ProbeExample& ex) {
  return {{"value", std::string(name_of(ex.value))}, {"label", ex.label}, {"text", ex.text}, {"pair_id", ex.pair_id}};
}

std::map<std::uint32_t, LayerFeatures> extract_features(const TransformerModel& model,
                                                        std::span<const ProbeExample> examples,
                                                        const std::set<std::uint32_t>& layers, unsigned jobs) {
  const std::size_t d = model.config().d_model;
  std::map<std::uint32_t, LayerFeatures> out;
  for (auto l : layers) {
    VALSTEER_CHECK(l < model.config().n_layers, ErrorCode::ShapeMismatch, "feature layer out of range");
    out[l].features = MatrixD(examples.size(), d);
    out[l].labels.resize(examples.size());
  }
  CaptureSpec capture;
  capture.residual_layers = layers;
  capture.logits = LogitsCapture::None;

  auto run_range = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const auto trace = forward(model, examples[i].tokens, capture);
      for (auto l : layers) {
        const auto& h = trace.residual_last_token.at(l);
        auto row = out[l].features.row(i);
        std::copy(h.begin(), h.end(), row.begin());
        out[l].labels[i] = examples[i].label;
      }
    }
  };

  jobs = std::max(1u, jobs);
  if (jobs == 1 || examples.size() < 2 * jobs) {
    run_range(0, examples.size());
  } else {
    std::vector<std::future<void>> tasks;
    const std::size_t chunk = (examples.size() + jobs - 1) / jobs;
    for (std::size_t begin = 0; begin < examples.size(); begin += chunk)
      tasks.push_back(std::async(std::launch::async, run_range, begin, std::min(begin + chunk, examples.size())));
    for (auto& t : tasks) t.get();
  }
  return out;
}

std::pair<std::vector<ProbeExample>, std::vector<ProbeExample>> split_dataset(std::span<const ProbeExample> examples,
                                                                              SplitRatio ratio, std::uint64_t seed) {
  VALSTEER_CHECK(!examples.empty(), ErrorCode::EmptyDataset, "no examples to split");
  VALSTEER_CHECK(ratio.train >= 0.0 && ratio.val >= 0.0 && std::abs(ratio.train + ratio.val - 1.0) <= 1e-9,
                 ErrorCode::InvalidArgument, "split ratio must be nonnegative and sum to 1");

  std::vector<std::string> pair_order;
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    auto [it, inserted] = members.try_emplace(examples[i].pair_id);
    if (inserted) pair_order.push_back(examples[i].pair_id);
    it->second.push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(pair_order.begin(), pair_order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(ratio.train * static_cast<double>(pair_order.size())));

  std::pair<std::vector<ProbeExample>, std::vector<ProbeExample>> out;
  for (std::size_t p = 0; p < pair_order.size(); ++p) {
    auto& dest = p < n_train ? out.first : out.second;
    for (auto i : members[pair_order[p]]) dest.push_back(examples[i]);
  }
  return out;
}

ProbeObjective probe_objective(std::span<const double> w, double b, const MatrixD& features,
                               std::span<const int> labels, double l2) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  VALSTEER_CHECK(w.size() == d && labels.size() == n, ErrorCode::ShapeMismatch, "probe objective shape mismatch");
  ProbeObjective obj;
  obj.grad_w.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto h = features.row(i);
    const double z = dot(w, h) + b;
    const double y = labels[i];
    obj.loss += softplus(z) - y * z;
    const double r = sigmoid(z) - y;
    for (std::size_t j = 0; j < d; ++j) obj.grad_w[j] += r * h[j];
    obj.grad_b += r;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  obj.loss *= inv_n;
  obj.grad_b *= inv_n;
  double wsq = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    obj.grad_w[j] = obj.grad_w[j] * inv_n + l2 * w[j];
    wsq += w[j] * w[j];
  }
  obj.loss += 0.5 * l2 * wsq;
  return obj;
}

Probe train_probe(const MatrixD& features, std::span<const int> labels, const ProbeHyper& hyper,
                  std::vector<double>* loss_history) {
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  VALSTEER_CHECK(labels.size() == n, ErrorCode::ShapeMismatch, "label count does not match feature rows");
  VALSTEER_CHECK(n >= 2, ErrorCode::DegenerateLabels, "need at least two examples");
  const bool has_pos = std::find(labels.begin(), labels.end(), 1) != labels.end();
  const bool has_neg = std::find(labels.begin(), labels.end(), 0) != labels.end();
  VALSTEER_CHECK(has_pos && has_neg, ErrorCode::DegenerateLabels, "training labels contain a single class");
  VALSTEER_CHECK(hyper.learning_rate > 0.0 && hyper.l2 >= 0.0, ErrorCode::InvalidArgument, "bad probe hyperparameters");

  std::vector<double> w(d, 0.0);
  double b = 0.0;
  auto current = probe_objective(w, b, features, labels, hyper.l2);
  VALSTEER_CHECK(std::isfinite(current.loss), ErrorCode::NonFiniteLoss, "initial probe loss is not finite");
  if (loss_history) loss_history->assign(1, current.loss);

  std::vector<double> w_next(d);
  for (std::uint32_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    double lr = hyper.learning_rate;
    for (int attempt = 0;; ++attempt) {
      for (std::size_t j = 0; j < d; ++j) w_next[j] = w[j] - lr * current.grad_w[j];
      const double b_next = b - lr * current.grad_b;
      auto next = probe_objective(w_next, b_next, features, labels, hyper.l2);
      VALSTEER_CHECK(std::isfinite(next.loss), ErrorCode::NonFiniteLoss,
                     "probe loss became non-finite at epoch " + std::to_string(epoch));
      if (next.loss <= current.loss || attempt >= 60) {
        if (next.loss <= current.loss) {
          w.swap(w_next);
          b = b_next;
          current = std::move(next);
        }
        break;
      }
      lr *= 0.5;
    }
    if (loss_history) loss_history->push_back(current.loss);
  }

  Probe probe;
  probe.direction.resize(d);
  for (std::size_t j = 0; j < d; ++j) probe.direction[j] = static_cast<float>(w[j]);
  probe.bias = b;
  probe.train_meta = hyper;
  return probe;
}

double probe_logit(const Probe& probe, std::span<const float> hidden) {
  VALSTEER_CHECK(hidden.size() == probe.direction.size(), ErrorCode::ShapeMismatch,
                 "hidden vector length " + std::to_string(hidden.size()) + " != probe width " +
                     std::to_string(probe.direction.size()));
  return dot(std::span<const float>(probe.direction), hidden) + probe.bias;
}

double probe_score(const Probe& probe, std::span<const float> hidden) { return sigmoid(probe_logit(probe, hidden)); }

double probe_accuracy(const Probe& probe, const MatrixD& features, std::span<const int> labels) {
  VALSTEER_CHECK(features.rows() == labels.size() && features.cols() == probe.direction.size(),
                 ErrorCode::ShapeMismatch, "accuracy shape mismatch");
  if (labels.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double z = dot(std::span<const float>(probe.direction), features.row(i)) + probe.bias;
    const int predicted = sigmoid(z) > 0.5 ? 1 : 0;
    correct += predicted == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

// ---------------------------------------------------------------------------

void ProbeSet::add(Probe probe) {
  const auto key = std::make_pair(probe.value, probe.layer);
  probes_[key] = std::move(probe);
}

void ProbeSet::set_kept(ValueId value, std::uint32_t layer, bool kept) {
  VALSTEER_CHECK(contains(value, layer), ErrorCode::InvalidArgument, "no probe for value/layer");
  if (kept) {
    kept_[value].insert(layer);
  } else if (auto it = kept_.find(value); it != kept_.end()) {
    it->second.erase(layer);
  }
}

const Probe& ProbeSet::get(ValueId value, std::uint32_t layer) const {
  auto it = probes_.find({value, layer});
  VALSTEER_CHECK(it != probes_.end(), ErrorCode::InvalidArgument,
                 "no probe for " + std::string(name_of(value)) + " at layer " + std::to_string(layer));
  return it->second;
}

bool ProbeSet::contains(ValueId value, std::uint32_t layer) const { return probes_.contains({value, layer}); }

std::vector<const Probe*> ProbeSet::probes_for(ValueId value) const {
  std::vector<const Probe*> out;
  for (const auto& [key, probe] : probes_)
    if (key.first == value) out.push_back(&probe);
  return out;
}

std::set<std::uint32_t> ProbeSet::kept_layers(ValueId value) const {
  auto it = kept_.find(value);
  return it == kept_.end() ? std::set<std::uint32_t>{} : it->second;
}

std::set<ValueId> ProbeSet::values() const {
  std::set<ValueId> out;
  for (const auto& [key, probe] : probes_) out.insert(key.first);
  return out;
}

ProbeSet validate_and_filter(const ProbeSet& probes, const ValidationFeatures& val, double tau) {
  VALSTEER_CHECK(std::isfinite(tau), ErrorCode::InvalidArgument, "tau must be finite");
  ProbeSet out;
  out.tau = tau;
  for (const auto& [key, probe] : probes.all()) {
    Probe p = probe;
    bool have_val = false;
    if (auto vit = val.find(key.first); vit != val.end()) {
      if (auto lit = vit->second.find(key.second); lit != vit->second.end() && !lit->second.labels.empty()) {
        p.val_accuracy = probe_accuracy(p, lit->second.features, lit->second.labels);
        have_val = true;
      }
    }
    out.add(p);
    if (have_val && p.val_accuracy >= tau) out.set_kept(key.first, key.second, true);
  }
  return out;
}

std::vector<LayerAccuracyRow> layer_accuracy_report(const ProbeSet& probes) {
  std::vector<LayerAccuracyRow> rows;
  for (const auto& [key, probe] : probes.all())
    rows.push_back({key.first, key.second, probe.val_accuracy, probes.kept_layers(key.first).contains(key.second)});
  return rows;
}

ProbeSet train_probes(const TransformerModel& model, std::span<const ProbeExample> examples,
                      const std::set<std::uint32_t>& layers, SplitRatio ratio, const ProbeHyper& hyper, double tau,
                      unsigned jobs) {
  VALSTEER_CHECK(!examples.empty(), ErrorCode::EmptyDataset, "no probe examples");
  VALSTEER_CHECK(!layers.empty(), ErrorCode::InvalidArgument, "no probe layers requested");
  std::map<ValueId, std::vector<ProbeExample>> by_value;
  for (const auto& ex : examples) by_value[ex.value].push_back(ex);

  struct Task {
    ValueId value;
    std::uint32_t layer;
    const LayerFeatures* train;
  };
  std::map<ValueId, std::map<std::uint32_t, LayerFeatures>> train_features;
  ValidationFeatures val_features;
  std::vector<Task> tasks;
  for (const auto& [value, items] : by_value) {
    auto [train, val] = split_dataset(items, ratio, hyper.seed);
    VALSTEER_CHECK(!train.empty(), ErrorCode::EmptyDataset,
                   "no training pairs for " + std::string(name_of(value)));
    train_features[value] = extract_features(model, train, layers, jobs);
    val_features[value] = extract_features(model, val, layers, jobs);
  }
  for (const auto& [value, per_layer] : train_features)
    for (const auto& [layer, lf] : per_layer) tasks.push_back({value, layer, &lf});

  std::vector<Probe> trained(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < tasks.size(); i = next.fetch_add(1)) {
      Probe p = train_probe(tasks[i].train->features, tasks[i].train->labels, hyper);
      p.value = tasks[i].value;
      p.layer = tasks[i].layer;
      trained[i] = std::move(p);
    }
  };
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(tasks.size())));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::future<void>> running;
    for (unsigned t = 0; t < jobs; ++t) running.push_back(std::async(std::launch::async, worker));
    for (auto& r : running) r.get();
  }

  ProbeSet raw;
  for (auto& p : trained) raw.add(std::move(p));
  return validate_and_filter(raw, val_features, tau);
}

}  // namespace valsteer
