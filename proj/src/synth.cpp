#include "valsteer/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "valsteer/error.hpp"

namespace valsteer {

namespace {

using Vec = std::vector<double>;

constexpr std::size_t kMaxPlanted = 6;
constexpr char kResponseBytes[kMaxPlanted] = {'@', '#', '$', '%', '&', '*'};

double vdot(const Vec& a, const Vec& b) { return std::inner_product(a.begin(), a.end(), b.begin(), 0.0); }
double vnorm(const Vec& a) { return std::sqrt(vdot(a, a)); }

void axpy(double alpha, const Vec& x, Vec& y) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

Vec scaled(const Vec& a, double s) {
  Vec out(a);
  for (auto& x : out) x *= s;
  return out;
}

/// Removes components along an orthonormal basis.
void project_out(Vec& v, const std::vector<Vec>& basis) {
  for (const auto& q : basis) axpy(-vdot(v, q), q, v);
}

/// Gram-Schmidt; returns false on (near) linear dependence.
bool orthonormalize(const std::vector<Vec>& vs, std::vector<Vec>& basis) {
  basis.clear();
  for (const auto& v : vs) {
    Vec r = v;
    project_out(r, basis);
    project_out(r, basis);
    const double n = vnorm(r);
    if (n < 1e-6) return false;
    basis.push_back(scaled(r, 1.0 / n));
  }
  return true;
}

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}

  double normal() { return normal_(rng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }

  Vec gaussian(std::size_t d, double sd = 1.0) {
    Vec v(d);
    for (auto& x : v) x = sd * normal();
    return v;
  }

  /// Unit vector orthogonal to `basis`.
  Vec unit_orthogonal(std::size_t d, const std::vector<Vec>& basis) {
    for (;;) {
      Vec v = gaussian(d);
      project_out(v, basis);
      project_out(v, basis);
      const double n = vnorm(v);
      if (n > 1e-3) return scaled(v, 1.0 / n);
    }
  }

  std::vector<std::uint32_t> choose(std::vector<std::uint32_t>& pool, std::size_t count) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      const std::size_t j = pick(rng_);
      out.push_back(pool[j]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
    }
    std::sort(out.begin(), out.end());
    return out;
  }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

void set_row(MatrixF& m, std::size_t r, const Vec& v) {
  auto row = m.row(r);
  for (std::size_t j = 0; j < v.size(); ++j) row[j] = static_cast<float>(v[j]);
}

Vec to_vec(std::span<const float> xs) { return Vec(xs.begin(), xs.end()); }

MatrixF near_identity(Sampler& s, std::size_t d, double diag, double noise) {
  MatrixF m(d, d);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = static_cast<float>((i == j ? diag : 0.0) + noise * s.normal());
  return m;
}

MatrixF gaussian_matrix(Sampler& s, std::size_t rows, std::size_t cols, double sd) {
  MatrixF m(rows, cols);
  for (auto& x : m.data()) x = static_cast<float>(sd * s.normal());
  return m;
}

}  // namespace

const PlantedTruth& GroundTruth::find(ValueId value) const {
  for (const auto& v : values)
    if (v.value == value) return v;
  throw Error(ErrorCode::UnknownValue, "value not planted: " + std::string(name_of(value)));
}

std::vector<float> random_unit_vector(std::mt19937_64& rng, std::size_t d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec v(d);
  double n = 0.0;
  while (n < 1e-6) {
    for (auto& x : v) x = normal(rng);
    n = vnorm(v);
  }
  std::vector<float> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = static_cast<float>(v[i] / n);
  return out;
}

std::pair<std::vector<float>, std::vector<float>> unit_pair_with_cosine(std::uint64_t seed, std::size_t d,
                                                                        double cosine) {
  VALSTEER_CHECK(d >= 2 && std::abs(cosine) <= 1.0, ErrorCode::InvalidArgument, "bad unit pair request");
  Sampler s(seed);
  const Vec a = s.unit_orthogonal(d, {});
  const Vec b = s.unit_orthogonal(d, {a});
  Vec c = scaled(a, cosine);
  axpy(std::sqrt(1.0 - cosine * cosine), b, c);
  const double n = vnorm(c);
  std::vector<float> fa(a.begin(), a.end());
  std::vector<float> fc(d);
  for (std::size_t i = 0; i < d; ++i) fc[i] = static_cast<float>(c[i] / n);
  return {fa, fc};
}

SynthModel synth_model(std::uint64_t seed, const ModelConfig& config, std::span<const PlantedValue> planted,
                       const SynthOptions& opt) {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t n_neurons = config.n_neurons;
  const std::size_t P = planted.size();

  VALSTEER_CHECK(P <= kMaxPlanted, ErrorCode::InfeasibleConstraint, "at most 6 planted values are supported");
  VALSTEER_CHECK(config.vocab_size >= 128, ErrorCode::InfeasibleConstraint,
                 "synthetic models need a byte-level vocabulary (>= 128 tokens)");
  VALSTEER_CHECK(d >= P + 2, ErrorCode::InfeasibleConstraint, "d_model too small for the planted directions");
  VALSTEER_CHECK(!opt.marker_strengths.empty(), ErrorCode::InvalidArgument, "need at least one marker strength");

  std::size_t planted_total = 0;
  std::vector<Vec> dirs;
  for (const auto& pv : planted) {
    VALSTEER_CHECK(pv.direction.size() == d, ErrorCode::ShapeMismatch, "planted direction has wrong length");
    Vec u = to_vec(pv.direction);
    VALSTEER_CHECK(std::abs(vnorm(u) - 1.0) <= 1e-4, ErrorCode::InvalidArgument, "planted direction must be unit norm");
    dirs.push_back(u);
    planted_total += pv.n_aligned + pv.n_opposed;
    for (const auto& other : planted)
      VALSTEER_CHECK(&other == &pv || other.value != pv.value, ErrorCode::InvalidArgument, "value planted twice");
  }
  VALSTEER_CHECK(planted_total <= n_neurons, ErrorCode::InfeasibleConstraint,
                 "planted neuron count exceeds neurons per layer");

  std::vector<Vec> span_basis;
  VALSTEER_CHECK(orthonormalize(dirs, span_basis), ErrorCode::InfeasibleConstraint,
                 "planted directions are linearly dependent");

  // Target direction for each value's neurons: the part of u_p orthogonal to every other
  // planted direction, so planted neurons of one value stay at cosine 0 with the others.
  std::vector<Vec> targets;
  std::vector<double> target_cos;
  for (std::size_t p = 0; p < P; ++p) {
    std::vector<Vec> others;
    for (std::size_t q = 0; q < P; ++q)
      if (q != p) others.push_back(dirs[q]);
    std::vector<Vec> other_basis;
    orthonormalize(others, other_basis);
    Vec t = dirs[p];
    project_out(t, other_basis);
    const double c = vnorm(t);
    targets.push_back(scaled(t, 1.0 / c));
    target_cos.push_back(c);
  }

  Sampler s(seed);
  const Vec bias_dir = s.unit_orthogonal(d, span_basis);
  std::vector<Vec> span_and_bias = span_basis;
  span_and_bias.push_back(bias_dir);

  GroundTruth truth;
  truth.seed = seed;

  // Vocabulary layout.
  std::vector<bool> reserved(config.vocab_size, false);
  for (std::size_t p = 0; p < P; ++p) {
    PlantedTruth pt;
    pt.value = planted[p].value;
    pt.direction = planted[p].direction;
    for (std::size_t i = 0; i < opt.marker_strengths.size() && i < 4; ++i) {
      pt.positive_markers.push_back(static_cast<TokenId>('A' + 4 * p + i));
      pt.negative_markers.push_back(static_cast<TokenId>('a' + 4 * p + i));
    }
    pt.response_token = static_cast<TokenId>(kResponseBytes[p]);
    for (TokenId t : pt.positive_markers) reserved[t] = true;
    for (TokenId t : pt.negative_markers) reserved[t] = true;
    reserved[pt.response_token] = true;
    truth.values.push_back(std::move(pt));
  }
  for (TokenId t = 32; t < 127; ++t)
    if (!reserved[t]) truth.context_tokens.push_back(t);

  Weights w;
  w.token_embedding = MatrixF(config.vocab_size, d);
  w.unembedding = MatrixF(config.vocab_size, d);
  for (TokenId tok = 0; tok < config.vocab_size; ++tok) {
    Vec e = bias_dir;
    axpy(opt.context_noise, s.unit_orthogonal(d, span_and_bias), e);
    set_row(w.token_embedding, tok, e);
    set_row(w.unembedding, tok, e);
  }
  for (std::size_t p = 0; p < P; ++p) {
    auto& pt = truth.values[p];
    for (std::size_t i = 0; i < pt.positive_markers.size(); ++i) {
      const double mu = opt.marker_strengths[i];
      for (int sign : {+1, -1}) {
        const TokenId tok = sign > 0 ? pt.positive_markers[i] : pt.negative_markers[i];
        Vec e = bias_dir;
        axpy(opt.marker_noise, s.unit_orthogonal(d, span_and_bias), e);
        Vec unembed = e;
        axpy(sign * mu, dirs[p], e);
        set_row(w.token_embedding, tok, e);
        set_row(w.unembedding, tok, unembed);
      }
    }
    Vec e = bias_dir;
    axpy(opt.marker_noise, s.unit_orthogonal(d, span_and_bias), e);
    set_row(w.token_embedding, pt.response_token, e);
    Vec out = bias_dir;
    axpy(opt.response_strength, targets[p], out);
    set_row(w.unembedding, pt.response_token, out);
  }

  w.position_embedding = MatrixF(config.max_seq_len, d);
  for (std::size_t t = 0; t < config.max_seq_len; ++t)
    set_row(w.position_embedding, t, scaled(s.unit_orthogonal(d, span_and_bias), opt.position_noise));
  w.final_norm.assign(d, 1.0f);

  const double eta_options[] = {0.25, 0.0};
  w.layers.resize(config.n_layers);
  for (std::size_t p = 0; p < P; ++p) truth.values[p].layers.resize(config.n_layers);

  for (std::uint32_t l = 0; l < config.n_layers; ++l) {
    auto& layer = w.layers[l];
    layer.attn_norm.assign(d, 1.0f);
    layer.ffn_norm.assign(d, 1.0f);
    layer.wq = gaussian_matrix(s, d, d, opt.attention_noise);
    layer.wk = gaussian_matrix(s, d, d, opt.attention_noise);
    layer.wv = near_identity(s, d, opt.value_mix, opt.attention_noise);
    layer.wo = near_identity(s, d, 1.0, opt.attention_noise);
    layer.ffn_in = MatrixF(n_neurons, d);
    layer.ffn_value_vectors = MatrixF(n_neurons, d);
    if (config.ffn_kind == FfnKind::Gated) layer.ffn_gate = MatrixF(n_neurons, d);

    std::vector<std::uint32_t> pool(n_neurons);
    std::iota(pool.begin(), pool.end(), 0u);
    std::vector<bool> is_planted(n_neurons, false);

    for (std::size_t p = 0; p < P; ++p) {
      auto& truth_layer = truth.values[p].layers[l];
      truth_layer.aligned = s.choose(pool, planted[p].n_aligned);
      truth_layer.opposed = s.choose(pool, planted[p].n_opposed);

      double eta = -1.0;
      for (double candidate : eta_options) {
        if (target_cos[p] / std::sqrt(1.0 + candidate * candidate) >= kPlantedMinCosine + 0.01) {
          eta = candidate;
          break;
        }
      }
      VALSTEER_CHECK(eta >= 0.0, ErrorCode::InfeasibleConstraint,
                     "planted directions too close: cannot reach cosine 0.8 while keeping others at 0");

      const double opposed_norm =
          planted[p].n_opposed == 0 ? 0.0
                                    : opt.planted_norm * planted[p].n_aligned / static_cast<double>(planted[p].n_opposed);
      auto plant = [&](std::uint32_t k, double sign, double magnitude) {
        Vec v = targets[p];
        axpy(eta, s.unit_orthogonal(d, span_and_bias), v);
        v = scaled(v, sign * magnitude / vnorm(v));
        set_row(layer.ffn_value_vectors, k, v);
        Vec key = scaled(bias_dir, opt.planted_key_scale);
        axpy(0.1 * opt.planted_key_scale, s.unit_orthogonal(d, span_and_bias), key);
        set_row(layer.ffn_in, k, key);
        if (config.ffn_kind == FfnKind::Gated) set_row(layer.ffn_gate, k, key);
        is_planted[k] = true;
      };
      for (auto k : truth_layer.aligned) plant(k, +1.0, opt.planted_norm);
      for (auto k : truth_layer.opposed) plant(k, -1.0, opposed_norm);
    }

    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::uint32_t k = 0; k < n_neurons; ++k) {
      if (is_planted[k]) continue;
      Vec v = s.unit_orthogonal(d, span_basis);
      for (const auto& q : span_basis) axpy(s.uniform(-0.08, 0.08), q, v);
      set_row(layer.ffn_value_vectors, k, scaled(v, opt.random_norm / vnorm(v)));
      set_row(layer.ffn_in, k, s.gaussian(d, inv_sqrt_d));
      if (config.ffn_kind == FfnKind::Gated) set_row(layer.ffn_gate, k, s.gaussian(d, inv_sqrt_d));
    }

    // Verify the cosine contract on the float weights actually stored.
    for (std::size_t p = 0; p < P; ++p) {
      const auto& truth_layer = truth.values[p].layers[l];
      for (std::uint32_t k = 0; k < n_neurons; ++k) {
        const double c = cosine(layer.ffn_value_vectors.row(k), std::span<const float>(truth.values[p].direction));
        const bool aligned = std::binary_search(truth_layer.aligned.begin(), truth_layer.aligned.end(), k);
        const bool opposed = std::binary_search(truth_layer.opposed.begin(), truth_layer.opposed.end(), k);
        const bool ok = aligned ? c >= kPlantedMinCosine : opposed ? c <= -kPlantedMinCosine
                                                                   : std::abs(c) <= kUnplantedMaxCosine;
        VALSTEER_CHECK(ok, ErrorCode::InfeasibleConstraint, "cosine constraint violated for layer " +
                                                                std::to_string(l) + " neuron " + std::to_string(k));
      }
    }
  }

  return SynthModel{TransformerModel(config, std::move(w)), std::move(truth)};
}

nlohmann::json to_json(const GroundTruth& truth) {
  nlohmann::json doc;
  doc["seed"] = truth.seed;
  doc["context_tokens"] = truth.context_tokens;
  doc["values"] = nlohmann::json::array();
  for (const auto& v : truth.values) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : v.layers) layers.push_back({{"aligned", l.aligned}, {"opposed", l.opposed}});
    doc["values"].push_back({{"value", std::string(name_of(v.value))},
                             {"direction", v.direction},
                             {"layers", layers},
                             {"positive_markers", v.positive_markers},
                             {"negative_markers", v.negative_markers},
                             {"response_token", v.response_token}});
  }
  return doc;
}

GroundTruth ground_truth_from_json(const nlohmann::json& doc) {
  GroundTruth truth;
  try {
    truth.seed = doc.at("seed").get<std::uint64_t>();
    truth.context_tokens = doc.at("context_tokens").get<std::vector<TokenId>>();
    for (const auto& item : doc.at("values")) {
      PlantedTruth v;
      v.value = value_from_name(item.at("value").get<std::string>());
      v.direction = item.at("direction").get<std::vector<float>>();
      for (const auto& l : item.at("layers"))
        v.layers.push_back({l.at("aligned").get<std::vector<std::uint32_t>>(),
                            l.at("opposed").get<std::vector<std::uint32_t>>()});
      v.positive_markers = item.at("positive_markers").get<std::vector<TokenId>>();
      v.negative_markers = item.at("negative_markers").get<std::vector<TokenId>>();
      v.response_token = item.at("response_token").get<TokenId>();
      truth.values.push_back(std::move(v));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ParseError, std::string("ground truth: ") + e.what());
  }
  return truth;
}

}  // namespace valsteer
