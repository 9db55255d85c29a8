#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "valsteer/engine.hpp"

namespace vtest {

/// Dense random model, independent of the synthetic planted construction.
inline valsteer::TransformerModel random_model(std::uint64_t seed, valsteer::ModelConfig cfg = {}) {
  using namespace valsteer;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = cfg.d_model;
  const std::size_t n = cfg.n_neurons;
  auto mat = [&](std::size_t r, std::size_t c, double sd) {
    MatrixF m(r, c);
    for (auto& x : m.data()) x = static_cast<float>(sd * normal(rng));
    return m;
  };
  auto gains = [&](std::size_t k) {
    std::vector<float> g(k);
    for (auto& x : g) x = static_cast<float>(1.0 + 0.1 * normal(rng));
    return g;
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  Weights w;
  w.token_embedding = mat(cfg.vocab_size, d, 1.0);
  w.position_embedding = mat(cfg.max_seq_len, d, 0.1);
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    LayerWeights layer;
    layer.attn_norm = gains(d);
    layer.wq = mat(d, d, sd);
    layer.wk = mat(d, d, sd);
    layer.wv = mat(d, d, sd);
    layer.wo = mat(d, d, sd);
    layer.ffn_norm = gains(d);
    layer.ffn_in = mat(n, d, sd);
    if (cfg.ffn_kind == FfnKind::Gated) layer.ffn_gate = mat(n, d, sd);
    layer.ffn_value_vectors = mat(n, d, 1.0 / std::sqrt(static_cast<double>(n)));
    w.layers.push_back(std::move(layer));
  }
  w.final_norm = gains(d);
  w.unembedding = mat(cfg.vocab_size, d, sd);
  return TransformerModel(cfg, std::move(w));
}

inline std::vector<valsteer::TokenId> random_tokens(std::uint64_t seed, std::size_t n, std::uint32_t vocab = 256) {
  std::mt19937_64 rng(seed);
  std::vector<valsteer::TokenId> out(n);
  for (auto& t : out) t = static_cast<valsteer::TokenId>(rng() % vocab);
  return out;
}

}  // namespace vtest
