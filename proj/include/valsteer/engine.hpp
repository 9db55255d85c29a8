#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "valsteer/matrix.hpp"

namespace valsteer {

using TokenId = std::uint32_t;

enum class FfnKind : std::uint8_t { Simple = 0, Gated = 1 };

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 32;
  std::uint32_t n_neurons = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t vocab_size = 256;
  FfnKind ffn_kind = FfnKind::Simple;
  std::uint32_t max_seq_len = 64;

  /// Throws Error(ShapeMismatch) on zero dimensions or d_model % n_heads != 0.
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& doc);

struct LayerWeights {
  std::vector<float> attn_norm;  // d
  MatrixF wq, wk, wv, wo;        // d x d, y = W x
  std::vector<float> ffn_norm;   // d
  MatrixF ffn_in;                // N x d, rows w_k (the "up" projection when gated)
  MatrixF ffn_gate;              // N x d, gated only; empty otherwise
  MatrixF ffn_value_vectors;     // N x d, rows v_k

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

struct Weights {
  MatrixF token_embedding;     // vocab x d
  MatrixF position_embedding;  // max_seq_len x d
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // d
  MatrixF unembedding;            // vocab x d

  friend bool operator==(const Weights&, const Weights&) = default;
};

/// Decoder-only pre-norm transformer. Immutable after construction, so concurrent
/// read-only forward passes are fine.
class TransformerModel {
 public:
  /// Validates shapes against the config and rejects non-finite parameters.
  TransformerModel(ModelConfig config, Weights weights);

  [[nodiscard]] const ModelConfig& config() const noexcept { return config_; }
  [[nodiscard]] const Weights& weights() const noexcept { return weights_; }

  friend bool operator==(const TransformerModel&, const TransformerModel&) = default;

 private:
  ModelConfig config_;
  Weights weights_;
};

// ---------------------------------------------------------------------------
// Interventions

struct NeuronEdit {
  std::uint32_t neuron = 0;
  int sign_s = 1;  // sign of the neuron's similarity score, +1 or -1
  double beta = 0.0;

  friend bool operator==(const NeuronEdit&, const NeuronEdit&) = default;
};

/// Per-layer activation edits, applied at every token position.
struct EditHook {
  std::uint32_t layer = 0;
  std::vector<NeuronEdit> edits;

  friend bool operator==(const EditHook&, const EditHook&) = default;
};

/// Adds coefficient * direction to the residual stream after the block output of `layer`.
struct ResidualAddition {
  std::uint32_t layer = 0;
  std::vector<float> direction;
  double coefficient = 0.0;

  friend bool operator==(const ResidualAddition&, const ResidualAddition&) = default;
};

struct Interventions {
  std::vector<EditHook> edits;
  std::vector<ResidualAddition> additions;

  [[nodiscard]] bool empty() const noexcept { return edits.empty() && additions.empty(); }
};

/// m' = m * (1 + sign(m) * sign_s * beta); sign(0) = 0 so m = 0 stays 0.
inline double edited_activation(double m, int sign_s, double beta) noexcept {
  const double sign_m = (m > 0.0) - (m < 0.0);
  return m * (1.0 + sign_m * static_cast<double>(sign_s) * beta);
}

// ---------------------------------------------------------------------------
// Forward pass

enum class LogitsCapture { None, LastToken, All };

struct CaptureSpec {
  std::set<std::uint32_t> residual_layers;
  std::set<std::uint32_t> activation_layers;
  LogitsCapture logits = LogitsCapture::All;

  static CaptureSpec everything(const ModelConfig& config);
};

nlohmann::json to_json(const CaptureSpec& spec);
CaptureSpec capture_spec_from_json(const nlohmann::json& doc);

struct ForwardTrace {
  /// Residual stream at the final token position after each captured block (h_T^l).
  std::map<std::uint32_t, std::vector<float>> residual_last_token;
  /// Neuron activations as computed by the layer, T x N, before any edit.
  std::map<std::uint32_t, MatrixF> neuron_activations;
  /// Activations actually used by the FFN for captured layers that carry an edit hook.
  std::map<std::uint32_t, MatrixF> edited_activations;
  /// T x vocab, or 1 x vocab for LogitsCapture::LastToken.
  MatrixF logits;
};

/// FFN output sum_k m_k v_k with 64-bit accumulation.
std::vector<double> combine_neurons(std::span<const float> activations, const MatrixF& value_vectors);

/// Applies a hook's edits in place.
void apply_edit_hook(std::span<float> activations, const EditHook& hook);

/// Neuron activations m_k for one normalised input row (no edits).
void compute_activations(const LayerWeights& layer, FfnKind kind, std::span<const float> normed_input,
                         std::span<float> out);

float gelu(float x) noexcept;
float silu(float x) noexcept;

/// Throws ShapeMismatch, TokenOutOfRange, NonFiniteActivation, ContextOverflow.
ForwardTrace forward(const TransformerModel& model, std::span<const TokenId> tokens,
                     const CaptureSpec& capture, const Interventions& interventions = {});

// ---------------------------------------------------------------------------
// Generation

enum class DecodeStrategy { Greedy, Sample };

struct DecodeParams {
  std::uint32_t max_new_tokens = 16;
  DecodeStrategy strategy = DecodeStrategy::Greedy;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

nlohmann::json to_json(const DecodeParams& params);
DecodeParams decode_params_from_json(const nlohmann::json& doc);

/// Returns prompt followed by the generated tokens. Interventions apply on every forward pass.
/// Throws ContextOverflow when prompt + max_new_tokens exceeds max_seq_len.
std::vector<TokenId> generate(const TransformerModel& model, std::span<const TokenId> prompt,
                              const DecodeParams& params, const Interventions& interventions = {});

// ---------------------------------------------------------------------------
// Tokenizers

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  [[nodiscard]] virtual std::vector<TokenId> encode(std::string_view text) const = 0;
  [[nodiscard]] virtual std::string decode(std::span<const TokenId> tokens) const = 0;
  [[nodiscard]] virtual std::uint32_t vocab_size() const = 0;
};

/// One token per byte; vocabulary of 256.
class ByteTokenizer final : public Tokenizer {
 public:
  [[nodiscard]] std::vector<TokenId> encode(std::string_view text) const override;
  [[nodiscard]] std::string decode(std::span<const TokenId> tokens) const override;
  [[nodiscard]] std::uint32_t vocab_size() const override { return 256; }
};

// ---------------------------------------------------------------------------
// Weight files

void save_weights(const TransformerModel& model, const std::string& path);
/// Throws IoFailure, FormatVersionMismatch, ChecksumMismatch, ShapeMismatch.
TransformerModel load_weights(const std::string& path);

std::vector<unsigned char> serialize_weights(const TransformerModel& model);
TransformerModel deserialize_weights(std::span<const unsigned char> bytes);

inline constexpr std::uint32_t kWeightFormatVersion = 1;

}  // namespace valsteer
