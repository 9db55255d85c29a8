#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/engine.hpp"
#include "valsteer/matrix.hpp"
#include "valsteer/taxonomy.hpp"

namespace valsteer {

/// One labelled example; positive/negative examples sharing pair_id form a context-controlled pair.
struct ProbeExample {
  std::vector<TokenId> tokens;
  int label = 0;  // 1 = expresses the value, 0 = violates it
  ValueId value = ValueId::Achievement;
  std::string pair_id;
  std::string text;
};

/// Reads line-delimited records {value, label, text, pair_id}. Errors carry file:line.
std::vector<ProbeExample> load_dataset(const std::string& path, const Tokenizer& tokenizer);
nlohmann::json to_json(const ProbeExample& example);

struct LayerFeatures {
  MatrixD features;  // n_examples x d
  std::vector<int> labels;
};

/// Row i of layer l is h_T^l of forward(model, examples[i]).
std::map<std::uint32_t, LayerFeatures> extract_features(const TransformerModel& model,
                                                        std::span<const ProbeExample> examples,
                                                        const std::set<std::uint32_t>& layers,
                                                        unsigned jobs = 1);

struct SplitRatio {
  double train = 0.7;
  double val = 0.3;
};

/// Pair-preserving split; deterministic per seed. Throws EmptyDataset, InvalidArgument.
std::pair<std::vector<ProbeExample>, std::vector<ProbeExample>> split_dataset(std::span<const ProbeExample> examples,
                                                                              SplitRatio ratio, std::uint64_t seed);

struct ProbeHyper {
  std::uint32_t epochs = 500;
  double learning_rate = 0.1;
  double l2 = 1e-4;
  std::uint64_t seed = 0;

  friend bool operator==(const ProbeHyper&, const ProbeHyper&) = default;
};

struct Probe {
  ValueId value = ValueId::Achievement;
  std::uint32_t layer = 0;
  std::vector<float> direction;  // W
  double bias = 0.0;             // b
  double val_accuracy = 0.0;
  ProbeHyper train_meta;

  friend bool operator==(const Probe&, const Probe&) = default;
};

/// Mean binary cross-entropy plus (l2/2)|W|^2, and its analytic gradient.
struct ProbeObjective {
  double loss = 0.0;
  std::vector<double> grad_w;
  double grad_b = 0.0;
};

ProbeObjective probe_objective(std::span<const double> w, double b, const MatrixD& features,
                               std::span<const int> labels, double l2);

/// Full-batch gradient descent from zero. A step that would raise the loss is retried
/// at half the learning rate, so the recorded loss never increases.
/// Throws DegenerateLabels, NonFiniteLoss, ShapeMismatch.
Probe train_probe(const MatrixD& features, std::span<const int> labels, const ProbeHyper& hyper,
                  std::vector<double>* loss_history = nullptr);

double probe_logit(const Probe& probe, std::span<const float> hidden);
/// sigma(W.h + b). Throws ShapeMismatch.
double probe_score(const Probe& probe, std::span<const float> hidden);
/// Fraction of rows classified correctly at threshold 0.5.
double probe_accuracy(const Probe& probe, const MatrixD& features, std::span<const int> labels);

/// All trained probes plus which layers passed the accuracy filter.
class ProbeSet {
 public:
  void add(Probe probe);
  void set_kept(ValueId value, std::uint32_t layer, bool kept);

  [[nodiscard]] const Probe& get(ValueId value, std::uint32_t layer) const;
  [[nodiscard]] bool contains(ValueId value, std::uint32_t layer) const;
  [[nodiscard]] std::vector<const Probe*> probes_for(ValueId value) const;
  [[nodiscard]] std::set<std::uint32_t> kept_layers(ValueId value) const;
  [[nodiscard]] std::set<ValueId> values() const;
  [[nodiscard]] const std::map<std::pair<ValueId, std::uint32_t>, Probe>& all() const noexcept { return probes_; }

  double tau = 0.95;

 private:
  std::map<std::pair<ValueId, std::uint32_t>, Probe> probes_;
  std::map<ValueId, std::set<std::uint32_t>> kept_;
};

using ValidationFeatures = std::map<ValueId, std::map<std::uint32_t, LayerFeatures>>;

/// Recomputes val_accuracy for every probe that has validation data and keeps exactly
/// those with accuracy >= tau.
ProbeSet validate_and_filter(const ProbeSet& probes, const ValidationFeatures& val, double tau);

struct LayerAccuracyRow {
  ValueId value;
  std::uint32_t layer;
  double accuracy;
  bool kept;
};

std::vector<LayerAccuracyRow> layer_accuracy_report(const ProbeSet& probes);

/// Full offline pass: per value, split pairs, extract features, train one probe per layer,
/// then keep the layers whose validation accuracy reaches tau. Training across
/// (value, layer) runs on up to `jobs` threads; results do not depend on `jobs`.
ProbeSet train_probes(const TransformerModel& model, std::span<const ProbeExample> examples,
                      const std::set<std::uint32_t>& layers, SplitRatio ratio, const ProbeHyper& hyper, double tau,
                      unsigned jobs = 1);

// Probe store: one document per value.
inline constexpr int kProbeStoreVersion = 1;

nlohmann::json probe_store_document(const ProbeSet& probes, ValueId value);
std::string probe_store_text(const ProbeSet& probes, ValueId value);
/// sha256 of the canonical store text; used as provenance by selections and plans.
std::string probe_store_hash(const ProbeSet& probes, ValueId value);
void save_probe_store(const ProbeSet& probes, ValueId value, const std::string& path);
/// Merges the document's probes into `into`. Throws FormatVersionMismatch, ParseError.
void read_probe_store(const nlohmann::json& doc, ProbeSet& into);
void load_probe_store(const std::string& path, ProbeSet& into);

}  // namespace valsteer
