#include <cstring>
#include <fstream>
#include <iterator>

#include "valsteer/engine.hpp"
#include "valsteer/error.hpp"
#include "valsteer/hashing.hpp"

namespace valsteer {

namespace {

constexpr char kMagic[4] = {'N', 'S', 'T', 'R'};
// magic + version + six u32 config fields + one u8 ffn kind
constexpr std::size_t kHeaderBytes = 4 + 4 + 6 * 4 + 1;
constexpr std::size_t kCrcBytes = 4;

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u8(std::uint8_t v) { raw(&v, sizeof v); }
  void floats(std::span<const float> xs) { raw(xs.data(), xs.size() * sizeof(float)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, sizeof v);
    return v;
  }
  std::uint8_t u8() {
    std::uint8_t v;
    raw(&v, sizeof v);
    return v;
  }
  void floats(std::span<float> out) { raw(out.data(), out.size() * sizeof(float)); }
  void raw(void* p, std::size_t n) {
    VALSTEER_CHECK(pos_ + n <= bytes_.size(), ErrorCode::ShapeMismatch, "payload shorter than declared shape");
    std::memcpy(p, bytes_.data() + pos_, n);
    pos_ += n;
  }

 private:
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t expected_file_size(const ModelConfig& c) {
  const std::uint64_t d = c.d_model;
  const std::uint64_t n = c.n_neurons;
  const std::uint64_t per_layer = 2 * d + 4 * d * d + (c.ffn_kind == FfnKind::Gated ? 3 : 2) * n * d;
  const std::uint64_t floats = std::uint64_t{c.vocab_size} * d * 2 + std::uint64_t{c.max_seq_len} * d + d +
                               std::uint64_t{c.n_layers} * per_layer;
  return kHeaderBytes + floats * sizeof(float) + kCrcBytes;
}

MatrixF read_matrix(Reader& r, std::size_t rows, std::size_t cols) {
  MatrixF m(rows, cols);
  r.floats(m.data());
  return m;
}

std::vector<float> read_vector(Reader& r, std::size_t n) {
  std::vector<float> v(n);
  r.floats(v);
  return v;
}

}  // namespace

std::vector<unsigned char> serialize_weights(const TransformerModel& model) {
  const auto& c = model.config();
  const auto& w = model.weights();
  Writer out;
  out.raw(kMagic, sizeof kMagic);
  out.u32(kWeightFormatVersion);
  out.u32(c.n_layers);
  out.u32(c.d_model);
  out.u32(c.n_neurons);
  out.u32(c.n_heads);
  out.u32(c.vocab_size);
  out.u8(static_cast<std::uint8_t>(c.ffn_kind));
  out.u32(c.max_seq_len);
  out.floats(w.token_embedding.data());
  out.floats(w.position_embedding.data());
  for (const auto& layer : w.layers) {
    out.floats(layer.attn_norm);
    out.floats(layer.wq.data());
    out.floats(layer.wk.data());
    out.floats(layer.wv.data());
    out.floats(layer.wo.data());
    out.floats(layer.ffn_norm);
    out.floats(layer.ffn_in.data());
    if (c.ffn_kind == FfnKind::Gated) out.floats(layer.ffn_gate.data());
    out.floats(layer.ffn_value_vectors.data());
  }
  out.floats(w.final_norm);
  out.floats(w.unembedding.data());
  out.u32(crc32(out.bytes));
  return std::move(out.bytes);
}

TransformerModel deserialize_weights(std::span<const unsigned char> bytes) {
  VALSTEER_CHECK(bytes.size() >= 8 && std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::FormatVersionMismatch,
                 "not a weight file (bad magic)");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, sizeof version);
  VALSTEER_CHECK(version == kWeightFormatVersion, ErrorCode::FormatVersionMismatch,
                 "unsupported weight format version " + std::to_string(version));
  VALSTEER_CHECK(bytes.size() >= kHeaderBytes + kCrcBytes, ErrorCode::FormatVersionMismatch,
                 "weight file truncated inside the header");

  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - kCrcBytes, sizeof stored_crc);
  const auto payload = bytes.first(bytes.size() - kCrcBytes);
  VALSTEER_CHECK(crc32(payload) == stored_crc, ErrorCode::ChecksumMismatch, "weight file checksum mismatch");

  Reader r(payload.subspan(8));
  ModelConfig c;
  c.n_layers = r.u32();
  c.d_model = r.u32();
  c.n_neurons = r.u32();
  c.n_heads = r.u32();
  c.vocab_size = r.u32();
  const std::uint8_t kind = r.u8();
  VALSTEER_CHECK(kind <= 1, ErrorCode::ShapeMismatch, "unknown ffn kind " + std::to_string(kind));
  c.ffn_kind = static_cast<FfnKind>(kind);
  c.max_seq_len = r.u32();
  c.validate();
  VALSTEER_CHECK(expected_file_size(c) == bytes.size(), ErrorCode::ShapeMismatch,
                 "declared shape implies " + std::to_string(expected_file_size(c)) + " bytes, file has " +
                     std::to_string(bytes.size()));

  const std::size_t d = c.d_model;
  const std::size_t n = c.n_neurons;
  Weights w;
  w.token_embedding = read_matrix(r, c.vocab_size, d);
  w.position_embedding = read_matrix(r, c.max_seq_len, d);
  w.layers.resize(c.n_layers);
  for (auto& layer : w.layers) {
    layer.attn_norm = read_vector(r, d);
    layer.wq = read_matrix(r, d, d);
    layer.wk = read_matrix(r, d, d);
    layer.wv = read_matrix(r, d, d);
    layer.wo = read_matrix(r, d, d);
    layer.ffn_norm = read_vector(r, d);
    layer.ffn_in = read_matrix(r, n, d);
    if (c.ffn_kind == FfnKind::Gated) layer.ffn_gate = read_matrix(r, n, d);
    layer.ffn_value_vectors = read_matrix(r, n, d);
  }
  w.final_norm = read_vector(r, d);
  w.unembedding = read_matrix(r, c.vocab_size, d);
  return TransformerModel(c, std::move(w));
}

void save_weights(const TransformerModel& model, const std::string& path) {
  const auto bytes = serialize_weights(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoFailure, "failed writing " + path);
}

TransformerModel load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoFailure, "failed reading " + path);
  return deserialize_weights(bytes);
}

}  // namespace valsteer
