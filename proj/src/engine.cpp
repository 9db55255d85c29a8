#include "valsteer/engine.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "valsteer/error.hpp"

namespace valsteer {

namespace {

constexpr double kNormEps = 1e-5;

void check_shape(const MatrixF& m, std::size_t rows, std::size_t cols, const char* what) {
  VALSTEER_CHECK(m.rows() == rows && m.cols() == cols, ErrorCode::ShapeMismatch,
                 std::string(what) + " has shape " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                     std::to_string(cols));
}

void check_len(const std::vector<float>& v, std::size_t n, const char* what) {
  VALSTEER_CHECK(v.size() == n, ErrorCode::ShapeMismatch,
                 std::string(what) + " has length " + std::to_string(v.size()) + ", expected " +
                     std::to_string(n));
}

bool all_finite(std::span<const float> xs) {
  return std::all_of(xs.begin(), xs.end(), [](float x) { return std::isfinite(x); });
}

void check_finite(std::span<const float> xs, const char* what) {
  VALSTEER_CHECK(all_finite(xs), ErrorCode::InvalidArgument, std::string(what) + " contains NaN/Inf");
}

void rms_norm(std::span<const float> x, std::span<const float> gain, std::span<float> out) {
  const double ms = dot(x, x) / static_cast<double>(x.size());
  const double scale = 1.0 / std::sqrt(ms + kNormEps);
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = static_cast<float>(static_cast<double>(x[i]) * scale * static_cast<double>(gain[i]));
}

void matvec(const MatrixF& w, std::span<const float> x, std::span<float> out) {
  for (std::size_t r = 0; r < w.rows(); ++r) out[r] = static_cast<float>(dot(w.row(r), x));
}

void attention_block(const LayerWeights& layer, const ModelConfig& cfg, MatrixF& resid) {
  const std::size_t T = resid.rows();
  const std::size_t d = cfg.d_model;
  const std::size_t heads = cfg.n_heads;
  const std::size_t hd = d / heads;

  MatrixF q(T, d), k(T, d), v(T, d);
  std::vector<float> normed(d);
  for (std::size_t t = 0; t < T; ++t) {
    rms_norm(resid.row(t), layer.attn_norm, normed);
    matvec(layer.wq, normed, q.row(t));
    matvec(layer.wk, normed, k.row(t));
    matvec(layer.wv, normed, v.row(t));
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double> scores(T);
  std::vector<float> mixed(d);
  std::vector<float> projected(d);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t h = 0; h < heads; ++h) {
      const auto qh = q.row(t).subspan(h * hd, hd);
      double max_score = -INFINITY;
      for (std::size_t s = 0; s <= t; ++s) {
        scores[s] = dot(qh, k.row(s).subspan(h * hd, hd)) * inv_sqrt;
        max_score = std::max(max_score, scores[s]);
      }
      double total = 0.0;
      for (std::size_t s = 0; s <= t; ++s) {
        scores[s] = std::exp(scores[s] - max_score);
        total += scores[s];
      }
      for (std::size_t j = 0; j < hd; ++j) {
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) acc += scores[s] * static_cast<double>(v(s, h * hd + j));
        mixed[h * hd + j] = static_cast<float>(acc / total);
      }
    }
    matvec(layer.wo, mixed, projected);
    auto row = resid.row(t);
    for (std::size_t j = 0; j < d; ++j) row[j] += projected[j];
  }
}

const EditHook* find_hook(const Interventions& iv, std::uint32_t layer) {
  for (const auto& hook : iv.edits)
    if (hook.layer == layer) return &hook;
  return nullptr;
}

void validate_interventions(const Interventions& iv, const ModelConfig& cfg) {
  std::set<std::uint32_t> seen;
  for (const auto& hook : iv.edits) {
    VALSTEER_CHECK(hook.layer < cfg.n_layers, ErrorCode::ShapeMismatch,
                   "edit hook layer " + std::to_string(hook.layer) + " out of range");
    VALSTEER_CHECK(seen.insert(hook.layer).second, ErrorCode::InvalidArgument,
                   "more than one edit hook for layer " + std::to_string(hook.layer));
    for (const auto& e : hook.edits) {
      VALSTEER_CHECK(e.neuron < cfg.n_neurons, ErrorCode::ShapeMismatch,
                     "edit neuron " + std::to_string(e.neuron) + " out of range");
      VALSTEER_CHECK(e.sign_s == 1 || e.sign_s == -1, ErrorCode::InvalidArgument, "edit sign must be +1 or -1");
      VALSTEER_CHECK(std::isfinite(e.beta) && e.beta >= 0.0, ErrorCode::InvalidArgument,
                     "edit beta must be finite and >= 0");
    }
  }
  for (const auto& add : iv.additions) {
    VALSTEER_CHECK(add.layer < cfg.n_layers, ErrorCode::ShapeMismatch,
                   "residual addition layer " + std::to_string(add.layer) + " out of range");
    VALSTEER_CHECK(add.direction.size() == cfg.d_model, ErrorCode::ShapeMismatch,
                   "residual addition vector has wrong length");
    VALSTEER_CHECK(std::isfinite(add.coefficient) && all_finite(add.direction), ErrorCode::InvalidArgument,
                   "residual addition must be finite");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  VALSTEER_CHECK(n_layers >= 1 && d_model >= 1 && n_neurons >= 1 && n_heads >= 1 && vocab_size >= 1 &&
                     max_seq_len >= 1,
                 ErrorCode::ShapeMismatch, "all model dimensions must be >= 1");
  VALSTEER_CHECK(d_model % n_heads == 0, ErrorCode::ShapeMismatch, "d_model must be divisible by n_heads");
  VALSTEER_CHECK(ffn_kind == FfnKind::Simple || ffn_kind == FfnKind::Gated, ErrorCode::ShapeMismatch,
                 "unknown ffn kind");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
          {"n_neurons", c.n_neurons}, {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size}, {"ffn_kind", c.ffn_kind == FfnKind::Gated ? "gated" : "simple"},
          {"max_seq_len", c.max_seq_len}};
}

ModelConfig model_config_from_json(const nlohmann::json& doc) {
  ModelConfig c;
  c.n_layers = doc.value("n_layers", c.n_layers);
  c.d_model = doc.value("d_model", c.d_model);
  c.n_neurons = doc.value("n_neurons", c.n_neurons);
  c.n_heads = doc.value("n_heads", c.n_heads);
  c.vocab_size = doc.value("vocab_size", c.vocab_size);
  c.max_seq_len = doc.value("max_seq_len", c.max_seq_len);
  const std::string kind = doc.value("ffn_kind", std::string("simple"));
  if (kind == "simple") {
    c.ffn_kind = FfnKind::Simple;
  } else if (kind == "gated") {
    c.ffn_kind = FfnKind::Gated;
  } else {
    throw Error(ErrorCode::ParseError, "unknown ffn_kind '" + kind + "'");
  }
  c.validate();
  return c;
}

TransformerModel::TransformerModel(ModelConfig config, Weights weights)
    : config_(config), weights_(std::move(weights)) {
  config_.validate();
  const std::size_t d = config_.d_model;
  const std::size_t n = config_.n_neurons;
  const auto& w = weights_;
  check_shape(w.token_embedding, config_.vocab_size, d, "token_embedding");
  check_shape(w.position_embedding, config_.max_seq_len, d, "position_embedding");
  check_shape(w.unembedding, config_.vocab_size, d, "unembedding");
  check_len(w.final_norm, d, "final_norm");
  VALSTEER_CHECK(w.layers.size() == config_.n_layers, ErrorCode::ShapeMismatch, "layer count mismatch");
  check_finite(w.token_embedding.data(), "token_embedding");
  check_finite(w.position_embedding.data(), "position_embedding");
  check_finite(w.unembedding.data(), "unembedding");
  check_finite(w.final_norm, "final_norm");
  for (const auto& layer : w.layers) {
    check_len(layer.attn_norm, d, "attn_norm");
    check_len(layer.ffn_norm, d, "ffn_norm");
    check_shape(layer.wq, d, d, "wq");
    check_shape(layer.wk, d, d, "wk");
    check_shape(layer.wv, d, d, "wv");
    check_shape(layer.wo, d, d, "wo");
    check_shape(layer.ffn_in, n, d, "ffn_in");
    check_shape(layer.ffn_value_vectors, n, d, "ffn_value_vectors");
    if (config_.ffn_kind == FfnKind::Gated) {
      check_shape(layer.ffn_gate, n, d, "ffn_gate");
    } else {
      VALSTEER_CHECK(layer.ffn_gate.empty(), ErrorCode::ShapeMismatch, "simple ffn must not carry a gate");
    }
    for (const MatrixF* m : {&layer.wq, &layer.wk, &layer.wv, &layer.wo, &layer.ffn_in, &layer.ffn_gate,
                             &layer.ffn_value_vectors})
      check_finite(m->data(), "layer matrix");
    check_finite(layer.attn_norm, "attn_norm");
    check_finite(layer.ffn_norm, "ffn_norm");
  }
}

// ---------------------------------------------------------------------------

float gelu(float x) noexcept {
  const double xd = x;
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  return static_cast<float>(0.5 * xd * (1.0 + std::tanh(kC * (xd + 0.044715 * xd * xd * xd))));
}

float silu(float x) noexcept {
  const double xd = x;
  return static_cast<float>(xd / (1.0 + std::exp(-xd)));
}

void compute_activations(const LayerWeights& layer, FfnKind kind, std::span<const float> normed_input,
                         std::span<float> out) {
  const std::size_t n = layer.ffn_in.rows();
  for (std::size_t k = 0; k < n; ++k) {
    const auto pre = static_cast<float>(dot(layer.ffn_in.row(k), normed_input));
    if (kind == FfnKind::Simple) {
      out[k] = gelu(pre);
    } else {
      const auto gate = static_cast<float>(dot(layer.ffn_gate.row(k), normed_input));
      out[k] = static_cast<float>(static_cast<double>(silu(gate)) * static_cast<double>(pre));
    }
  }
}

std::vector<double> combine_neurons(std::span<const float> activations, const MatrixF& value_vectors) {
  VALSTEER_CHECK(activations.size() == value_vectors.rows(), ErrorCode::ShapeMismatch,
                 "activation count does not match neuron count");
  std::vector<double> out(value_vectors.cols(), 0.0);
  for (std::size_t k = 0; k < activations.size(); ++k) {
    const double m = activations[k];
    if (m == 0.0) continue;
    const auto v = value_vectors.row(k);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += m * static_cast<double>(v[j]);
  }
  return out;
}

void apply_edit_hook(std::span<float> activations, const EditHook& hook) {
  for (const auto& e : hook.edits) {
    VALSTEER_CHECK(e.neuron < activations.size(), ErrorCode::ShapeMismatch, "edit neuron out of range");
    activations[e.neuron] = static_cast<float>(edited_activation(activations[e.neuron], e.sign_s, e.beta));
  }
}

CaptureSpec CaptureSpec::everything(const ModelConfig& config) {
  CaptureSpec spec;
  for (std::uint32_t l = 0; l < config.n_layers; ++l) {
    spec.residual_layers.insert(l);
    spec.activation_layers.insert(l);
  }
  spec.logits = LogitsCapture::All;
  return spec;
}

nlohmann::json to_json(const CaptureSpec& spec) {
  const char* logits = spec.logits == LogitsCapture::None ? "none"
                       : spec.logits == LogitsCapture::LastToken ? "last"
                                                                  : "all";
  return {{"residual_layers", spec.residual_layers},
          {"activation_layers", spec.activation_layers},
          {"logits", logits}};
}

CaptureSpec capture_spec_from_json(const nlohmann::json& doc) {
  CaptureSpec spec;
  if (doc.contains("residual_layers")) spec.residual_layers = doc["residual_layers"].get<std::set<std::uint32_t>>();
  if (doc.contains("activation_layers"))
    spec.activation_layers = doc["activation_layers"].get<std::set<std::uint32_t>>();
  const std::string logits = doc.value("logits", std::string("all"));
  if (logits == "none") {
    spec.logits = LogitsCapture::None;
  } else if (logits == "last") {
    spec.logits = LogitsCapture::LastToken;
  } else if (logits == "all") {
    spec.logits = LogitsCapture::All;
  } else {
    throw Error(ErrorCode::ParseError, "unknown logits capture '" + logits + "'");
  }
  return spec;
}

ForwardTrace forward(const TransformerModel& model, std::span<const TokenId> tokens, const CaptureSpec& capture,
                     const Interventions& interventions) {
  const auto& cfg = model.config();
  const auto& w = model.weights();
  const std::size_t T = tokens.size();
  const std::size_t d = cfg.d_model;
  const std::size_t n = cfg.n_neurons;

  VALSTEER_CHECK(T >= 1, ErrorCode::ShapeMismatch, "empty token sequence");
  VALSTEER_CHECK(T <= cfg.max_seq_len, ErrorCode::ContextOverflow,
                 "sequence length " + std::to_string(T) + " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (TokenId tok : tokens)
    VALSTEER_CHECK(tok < cfg.vocab_size, ErrorCode::TokenOutOfRange, "token id " + std::to_string(tok) + " >= vocab");
  for (auto l : capture.residual_layers)
    VALSTEER_CHECK(l < cfg.n_layers, ErrorCode::ShapeMismatch, "capture layer out of range");
  for (auto l : capture.activation_layers)
    VALSTEER_CHECK(l < cfg.n_layers, ErrorCode::ShapeMismatch, "capture layer out of range");
  validate_interventions(interventions, cfg);

  ForwardTrace trace;
  MatrixF resid(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto emb = w.token_embedding.row(tokens[t]);
    const auto pos = w.position_embedding.row(t);
    auto row = resid.row(t);
    for (std::size_t j = 0; j < d; ++j) row[j] = emb[j] + pos[j];
  }

  std::vector<float> normed(d);
  MatrixF acts(T, n);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    const auto& layer = w.layers[l];
    attention_block(layer, cfg, resid);

    const EditHook* hook = find_hook(interventions, l);
    for (std::size_t t = 0; t < T; ++t) {
      rms_norm(resid.row(t), layer.ffn_norm, normed);
      compute_activations(layer, cfg.ffn_kind, normed, acts.row(t));
    }
    if (capture.activation_layers.contains(l)) trace.neuron_activations[l] = acts;
    if (hook != nullptr) {
      for (std::size_t t = 0; t < T; ++t) apply_edit_hook(acts.row(t), *hook);
      if (capture.activation_layers.contains(l)) trace.edited_activations[l] = acts;
    }
    for (std::size_t t = 0; t < T; ++t) {
      const auto out = combine_neurons(acts.row(t), layer.ffn_value_vectors);
      auto row = resid.row(t);
      for (std::size_t j = 0; j < d; ++j) row[j] = static_cast<float>(static_cast<double>(row[j]) + out[j]);
    }

    for (const auto& add : interventions.additions) {
      if (add.layer != l) continue;
      for (std::size_t t = 0; t < T; ++t) {
        auto row = resid.row(t);
        for (std::size_t j = 0; j < d; ++j)
          row[j] = static_cast<float>(static_cast<double>(row[j]) +
                                      add.coefficient * static_cast<double>(add.direction[j]));
      }
    }

    VALSTEER_CHECK(all_finite(resid.data()), ErrorCode::NonFiniteActivation,
                   "non-finite residual stream at layer " + std::to_string(l));
    if (capture.residual_layers.contains(l)) {
      const auto last = resid.row(T - 1);
      trace.residual_last_token[l] = std::vector<float>(last.begin(), last.end());
    }
  }

  if (capture.logits != LogitsCapture::None) {
    const std::size_t first = capture.logits == LogitsCapture::All ? 0 : T - 1;
    trace.logits = MatrixF(T - first, cfg.vocab_size);
    for (std::size_t t = first; t < T; ++t) {
      rms_norm(resid.row(t), w.final_norm, normed);
      matvec(w.unembedding, normed, trace.logits.row(t - first));
    }
    VALSTEER_CHECK(all_finite(trace.logits.data()), ErrorCode::NonFiniteActivation, "non-finite logits");
  }
  return trace;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const DecodeParams& p) {
  return {{"max_new_tokens", p.max_new_tokens},
          {"strategy", p.strategy == DecodeStrategy::Greedy ? "greedy" : "sample"},
          {"temperature", p.temperature},
          {"seed", p.seed}};
}

DecodeParams decode_params_from_json(const nlohmann::json& doc) {
  DecodeParams p;
  p.max_new_tokens = doc.value("max_new_tokens", p.max_new_tokens);
  p.temperature = doc.value("temperature", p.temperature);
  p.seed = doc.value("seed", p.seed);
  const std::string strategy = doc.value("strategy", std::string("greedy"));
  if (strategy == "greedy") {
    p.strategy = DecodeStrategy::Greedy;
  } else if (strategy == "sample") {
    p.strategy = DecodeStrategy::Sample;
  } else {
    throw Error(ErrorCode::ParseError, "unknown decode strategy '" + strategy + "'");
  }
  return p;
}

std::vector<TokenId> generate(const TransformerModel& model, std::span<const TokenId> prompt,
                              const DecodeParams& params, const Interventions& interventions) {
  VALSTEER_CHECK(!prompt.empty(), ErrorCode::InvalidArgument, "prompt must be nonempty");
  const auto& cfg = model.config();
  VALSTEER_CHECK(prompt.size() + params.max_new_tokens <= cfg.max_seq_len, ErrorCode::ContextOverflow,
                 "prompt length " + std::to_string(prompt.size()) + " + " + std::to_string(params.max_new_tokens) +
                     " new tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  if (params.strategy == DecodeStrategy::Sample)
    VALSTEER_CHECK(params.temperature > 0.0 && std::isfinite(params.temperature), ErrorCode::InvalidArgument,
                   "sampling temperature must be positive");

  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  std::mt19937_64 rng(params.seed);
  CaptureSpec capture;
  capture.logits = LogitsCapture::LastToken;

  for (std::uint32_t step = 0; step < params.max_new_tokens; ++step) {
    const auto trace = forward(model, seq, capture, interventions);
    const auto logits = trace.logits.row(0);
    TokenId next = 0;
    if (params.strategy == DecodeStrategy::Greedy) {
      next = static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    } else {
      const double max_logit = *std::max_element(logits.begin(), logits.end());
      std::vector<double> probs(logits.size());
      double total = 0.0;
      for (std::size_t i = 0; i < logits.size(); ++i) {
        probs[i] = std::exp((static_cast<double>(logits[i]) - max_logit) / params.temperature);
        total += probs[i];
      }
      // 53 random bits -> [0,1); independent of the standard library's distributions.
      const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53 * total;
      double cum = 0.0;
      next = static_cast<TokenId>(logits.size() - 1);
      for (std::size_t i = 0; i < probs.size(); ++i) {
        cum += probs[i];
        if (u < cum) {
          next = static_cast<TokenId>(i);
          break;
        }
      }
    }
    seq.push_back(next);
  }
  return seq;
}

// ---------------------------------------------------------------------------

std::vector<TokenId> ByteTokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size());
  for (char c : text) out.push_back(static_cast<unsigned char>(c));
  return out;
}

std::string ByteTokenizer::decode(std::span<const TokenId> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    VALSTEER_CHECK(t < 256, ErrorCode::TokenOutOfRange, "byte tokenizer cannot decode token " + std::to_string(t));
    out.push_back(static_cast<char>(t));
  }
  return out;
}

}  // namespace valsteer
