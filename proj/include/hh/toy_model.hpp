#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hh/attention.hpp"
#include "hh/io.hpp"
#include "hh/mat.hpp"
#include "hh/rng.hpp"

namespace hh {

enum class PosScheme : std::uint32_t { Absolute = 0, Rope = 1 };

struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t n_q_heads = 0;
  std::size_t n_kv_heads = 0;
  std::size_t d_head = 0;
  std::size_t d_ff = 0;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 0;
  PosScheme pos_scheme = PosScheme::Absolute;

  std::size_t d_model() const { return n_q_heads * d_head; }
  std::size_t kv_dim() const { return n_kv_heads * d_head; }
  std::size_t group_size() const { return n_q_heads / n_kv_heads; }

  void validate() const {
    if (n_layers < 1 || n_q_heads < 1 || n_kv_heads < 1 || d_head < 1 ||
        d_ff < 1 || vocab_size < 1 || max_seq_len < 1)
      throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
    if (n_q_heads % n_kv_heads != 0)
      throw std::invalid_argument("ModelConfig: n_q_heads must be divisible by n_kv_heads");
    if (pos_scheme == PosScheme::Rope && d_head % 2 != 0)
      throw std::invalid_argument("ModelConfig: rope requires even d_head");
  }

  void write_block(BinWriter& w) const {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n_layers));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n_q_heads));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(n_kv_heads));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d_head));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(d_ff));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(vocab_size));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(max_seq_len));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(pos_scheme));
  }

  static ModelConfig read_block(BinReader& r) {
    ModelConfig c;
    c.n_layers = r.get<std::uint32_t>();
    c.n_q_heads = r.get<std::uint32_t>();
    c.n_kv_heads = r.get<std::uint32_t>();
    c.d_head = r.get<std::uint32_t>();
    c.d_ff = r.get<std::uint32_t>();
    c.vocab_size = r.get<std::uint32_t>();
    c.max_seq_len = r.get<std::uint32_t>();
    c.pos_scheme = static_cast<PosScheme>(r.get<std::uint32_t>());
    c.validate();
    return c;
  }

  // Stable identity of the architecture; embedded in role-map files so a
  // map trained for one shape cannot silently load against another.
  std::uint64_t checksum() const {
    BinWriter w;
    write_block(w);
    return fnv1a64(w.buf.data(), w.buf.size());
  }
};

// Key-value text config, one "key value" pair per line, '#' comments.
inline ModelConfig parse_model_config(const std::map<std::string, std::string>& kv);

inline std::map<std::string, std::string> parse_key_value_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string key, value;
    if (!(ls >> key)) continue;
    if (!(ls >> value)) throw std::runtime_error("config: key without value: " + key);
    std::string extra;
    if (ls >> extra) throw std::runtime_error("config: trailing tokens after " + key);
    if (kv.count(key)) throw std::runtime_error("config: duplicate key " + key);
    kv[key] = value;
  }
  return kv;
}

struct LayerWeights {
  std::vector<float> attn_norm;  // d_model
  Matrix<float> wq;              // d_model x d_model
  Matrix<float> wk;              // d_model x kv_dim
  Matrix<float> wv;              // d_model x kv_dim
  Matrix<float> wo;              // d_model x d_model
  std::vector<float> ffn_norm;   // d_model
  Matrix<float> w1;              // d_model x d_ff
  Matrix<float> w2;              // d_ff x d_model
};

struct ModelWeights {
  Matrix<float> embedding;      // vocab x d_model
  Matrix<float> pos_embedding;  // max_seq_len x d_model (absolute scheme only)
  std::vector<LayerWeights> layers;
  std::vector<float> final_norm;  // d_model
  Matrix<float> lm_head;          // d_model x vocab
};

struct ToyModel {
  ModelConfig config;
  ModelWeights weights;
};

// Deterministic scaled-uniform init, scale 1/sqrt(fan_in). Same seed gives
// bitwise-identical weights on any platform.
inline ToyModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto fill = [&](Matrix<float>& m, std::size_t rows, std::size_t cols, std::size_t fan_in) {
    m = Matrix<float>(rows, cols);
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : m.data) v = static_cast<float>(rng.uniform(-s, s));
  };
  ToyModel model;
  model.config = cfg;
  ModelWeights& w = model.weights;
  fill(w.embedding, cfg.vocab_size, cfg.d_model(), cfg.d_model());
  if (cfg.pos_scheme == PosScheme::Absolute)
    fill(w.pos_embedding, cfg.max_seq_len, cfg.d_model(), cfg.d_model());
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm.assign(cfg.d_model(), 1.0f);
    fill(l.wq, cfg.d_model(), cfg.d_model(), cfg.d_model());
    fill(l.wk, cfg.d_model(), cfg.kv_dim(), cfg.d_model());
    fill(l.wv, cfg.d_model(), cfg.kv_dim(), cfg.d_model());
    fill(l.wo, cfg.d_model(), cfg.d_model(), cfg.d_model());
    l.ffn_norm.assign(cfg.d_model(), 1.0f);
    fill(l.w1, cfg.d_model(), cfg.d_ff, cfg.d_model());
    fill(l.w2, cfg.d_ff, cfg.d_model(), cfg.d_ff);
  }
  w.final_norm.assign(cfg.d_model(), 1.0f);
  fill(w.lm_head, cfg.d_model(), cfg.vocab_size, cfg.d_model());
  return model;
}

// ---- forward-pass primitives (double math over f32 weights) ----
// Shared by the full forward, the decode engine and the specializer so the
// dense paths of all three agree bitwise.

inline std::vector<double> rmsnorm(std::span<const double> x, std::span<const float> gain) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    y[i] = x[i] * inv * static_cast<double>(gain[i]);
  return y;
}

inline void matvec_f(std::span<const double> x, const Matrix<float>& w, std::span<double> y) {
  if (x.size() != w.rows || y.size() != w.cols)
    throw std::invalid_argument("matvec_f: shape mismatch");
  for (double& v : y) v = 0.0;
  for (std::size_t i = 0; i < w.rows; ++i) {
    const double xi = x[i];
    const float* wr = w.row(i);
    for (std::size_t j = 0; j < w.cols; ++j) y[j] += xi * static_cast<double>(wr[j]);
  }
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline void apply_rope(std::span<double> head_vec, std::size_t pos) {
  const std::size_t d = head_vec.size();
  for (std::size_t i = 0; i + 1 < d; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(pos) * freq;
    const double c = std::cos(angle), s = std::sin(angle);
    const double a = head_vec[i], b = head_vec[i + 1];
    head_vec[i] = a * c - b * s;
    head_vec[i + 1] = a * s + b * c;
  }
}

inline std::vector<double> embed(const ToyModel& m, std::int32_t token, std::size_t pos) {
  const ModelConfig& cfg = m.config;
  if (token < 0 || static_cast<std::size_t>(token) >= cfg.vocab_size)
    throw std::invalid_argument("embed: token id out of range");
  if (pos >= cfg.max_seq_len)
    throw std::invalid_argument("embed: position exceeds max_seq_len");
  std::vector<double> x(cfg.d_model());
  const float* e = m.weights.embedding.row(static_cast<std::size_t>(token));
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(e[i]);
  if (cfg.pos_scheme == PosScheme::Absolute) {
    const float* p = m.weights.pos_embedding.row(pos);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += static_cast<double>(p[i]);
  }
  return x;
}

struct QkvOut {
  std::vector<std::vector<double>> q_heads;  // n_q_heads x d_head
  std::vector<std::vector<double>> k_heads;  // n_kv_heads x d_head
  std::vector<std::vector<double>> v_heads;  // n_kv_heads x d_head
};

inline QkvOut compute_qkv(const ToyModel& m, std::size_t layer,
                          std::span<const double> x, std::size_t pos) {
  const ModelConfig& cfg = m.config;
  const LayerWeights& lw = m.weights.layers[layer];
  const std::vector<double> h = rmsnorm(x, lw.attn_norm);
  std::vector<double> q(cfg.d_model()), k(cfg.kv_dim()), v(cfg.kv_dim());
  matvec_f(h, lw.wq, q);
  matvec_f(h, lw.wk, k);
  matvec_f(h, lw.wv, v);
  QkvOut out;
  out.q_heads.resize(cfg.n_q_heads);
  for (std::size_t hd = 0; hd < cfg.n_q_heads; ++hd) {
    out.q_heads[hd].assign(q.begin() + hd * cfg.d_head, q.begin() + (hd + 1) * cfg.d_head);
    if (cfg.pos_scheme == PosScheme::Rope) apply_rope(out.q_heads[hd], pos);
  }
  out.k_heads.resize(cfg.n_kv_heads);
  out.v_heads.resize(cfg.n_kv_heads);
  for (std::size_t hd = 0; hd < cfg.n_kv_heads; ++hd) {
    out.k_heads[hd].assign(k.begin() + hd * cfg.d_head, k.begin() + (hd + 1) * cfg.d_head);
    out.v_heads[hd].assign(v.begin() + hd * cfg.d_head, v.begin() + (hd + 1) * cfg.d_head);
    if (cfg.pos_scheme == PosScheme::Rope) apply_rope(out.k_heads[hd], pos);
  }
  return out;
}

// x += concat(head_outputs) * W_O
inline void attn_project_residual(const ToyModel& m, std::size_t layer,
                                  const std::vector<std::vector<double>>& head_outputs,
                                  std::span<double> x) {
  const ModelConfig& cfg = m.config;
  std::vector<double> concat(cfg.d_model());
  for (std::size_t hd = 0; hd < cfg.n_q_heads; ++hd)
    for (std::size_t j = 0; j < cfg.d_head; ++j)
      concat[hd * cfg.d_head + j] = head_outputs[hd][j];
  std::vector<double> proj(cfg.d_model());
  matvec_f(concat, m.weights.layers[layer].wo, proj);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];
}

// x += W2(silu(W1(rmsnorm(x))))
inline void ffn_residual(const ToyModel& m, std::size_t layer, std::span<double> x) {
  const LayerWeights& lw = m.weights.layers[layer];
  const std::vector<double> h = rmsnorm(x, lw.ffn_norm);
  std::vector<double> mid(m.config.d_ff);
  matvec_f(h, lw.w1, mid);
  for (double& v : mid) v = silu(v);
  std::vector<double> out(m.config.d_model());
  matvec_f(mid, lw.w2, out);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += out[i];
}

inline std::vector<double> output_logits(const ToyModel& m, std::span<const double> x) {
  const std::vector<double> h = rmsnorm(x, m.weights.final_norm);
  std::vector<double> logits(m.config.vocab_size);
  matvec_f(h, m.weights.lm_head, logits);
  return logits;
}

// Optional captures from forward_full, used by the specializer (shared
// prompt cache) and the overlap analysis (pooled per-head attention maps).
struct ForwardCapture {
  bool want_kv = false;
  bool want_last_maps = false;
  // Position whose pooled maps are captured; SIZE_MAX means the last one.
  std::size_t maps_position = static_cast<std::size_t>(-1);
  // [layer * n_kv_heads + g], rows appended in position order
  std::vector<Matrix<double>> keys, values;
  // [layer][kv head] -> weights over positions <= maps_position
  std::vector<std::vector<std::vector<double>>> last_pooled_weights;
};

// Dense causal forward over a full token sequence; logits at every position.
// This is the teacher and the oracle for the decoding paths.
inline Matrix<double> forward_full(const ToyModel& m, std::span<const std::int32_t> tokens,
                                   ForwardCapture* cap = nullptr) {
  const ModelConfig& cfg = m.config;
  const std::size_t n = tokens.size();
  if (n == 0) throw std::invalid_argument("forward_full: empty token sequence");
  if (n > cfg.max_seq_len) throw std::invalid_argument("forward_full: sequence exceeds max_seq_len");

  std::vector<Matrix<double>> keys(cfg.n_layers * cfg.n_kv_heads),
      values(cfg.n_layers * cfg.n_kv_heads);
  for (auto& k : keys) k = Matrix<double>(n, cfg.d_head);
  for (auto& v : values) v = Matrix<double>(n, cfg.d_head);

  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));
  Matrix<double> logits(n, cfg.vocab_size);
  std::vector<std::vector<double>> last_q_heads;  // per layer captures need last pos queries

  std::size_t maps_at = n - 1;
  if (cap && cap->want_last_maps) {
    cap->last_pooled_weights.assign(cfg.n_layers, {});
    if (cap->maps_position != static_cast<std::size_t>(-1)) {
      if (cap->maps_position >= n)
        throw std::invalid_argument("forward_full: capture position out of range");
      maps_at = cap->maps_position;
    }
  }

  for (std::size_t t = 0; t < n; ++t) {
    std::vector<double> x = embed(m, tokens[t], t);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      QkvOut qkv = compute_qkv(m, l, x, t);
      for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
        double* krow = keys[l * cfg.n_kv_heads + g].row(t);
        double* vrow = values[l * cfg.n_kv_heads + g].row(t);
        for (std::size_t j = 0; j < cfg.d_head; ++j) {
          krow[j] = qkv.k_heads[g][j];
          vrow[j] = qkv.v_heads[g][j];
        }
      }
      std::vector<std::vector<double>> head_out(cfg.n_q_heads);
      for (std::size_t hd = 0; hd < cfg.n_q_heads; ++hd) {
        const std::size_t g = hd / cfg.group_size();
        AttnInput<double> in{qkv.q_heads[hd],
                             MatView<double>(keys[l * cfg.n_kv_heads + g]).top_rows(t + 1),
                             MatView<double>(values[l * cfg.n_kv_heads + g]).top_rows(t + 1),
                             scale};
        head_out[hd] = dense_attention(in).out;
      }
      if (cap && cap->want_last_maps && t == maps_at) {
        auto pooled = gqa_pool_queries(qkv.q_heads, cfg.group_size());
        auto& per_head = cap->last_pooled_weights[l];
        per_head.resize(cfg.n_kv_heads);
        for (std::size_t g = 0; g < cfg.n_kv_heads; ++g) {
          AttnInput<double> in{pooled[g],
                               MatView<double>(keys[l * cfg.n_kv_heads + g]).top_rows(t + 1),
                               MatView<double>(values[l * cfg.n_kv_heads + g]).top_rows(t + 1),
                               scale};
          per_head[g] = dense_attention(in).weights;
        }
      }
      attn_project_residual(m, l, head_out, x);
      ffn_residual(m, l, x);
    }
    std::vector<double> lg = output_logits(m, x);
    for (std::size_t j = 0; j < cfg.vocab_size; ++j) logits.at(t, j) = lg[j];
  }

  if (cap && cap->want_kv) {
    cap->keys = std::move(keys);
    cap->values = std::move(values);
  }
  return logits;
}

// ---- weight file (binary, little-endian, checksummed) ----

inline constexpr char kWeightMagic[4] = {'H', 'H', 'W', '1'};
inline constexpr std::uint32_t kWeightVersion = 1;

inline void save_model(const ToyModel& m, const std::string& path) {
  BinWriter w;
  w.buf.append(kWeightMagic, 4);
  w.put<std::uint32_t>(kWeightVersion);
  m.config.write_block(w);
  auto put_mat = [&](const Matrix<float>& mat) { w.put_f32s(mat.data.data(), mat.data.size()); };
  auto put_vec = [&](const std::vector<float>& v) { w.put_f32s(v.data(), v.size()); };
  put_mat(m.weights.embedding);
  if (m.config.pos_scheme == PosScheme::Absolute) put_mat(m.weights.pos_embedding);
  for (const auto& l : m.weights.layers) {
    put_vec(l.attn_norm);
    put_mat(l.wq);
    put_mat(l.wk);
    put_mat(l.wv);
    put_mat(l.wo);
    put_vec(l.ffn_norm);
    put_mat(l.w1);
    put_mat(l.w2);
  }
  put_vec(m.weights.final_norm);
  put_mat(m.weights.lm_head);
  w.put<std::uint64_t>(fnv1a64(w.buf.data(), w.buf.size()));
  atomic_write_file(path, w.buf);
}

inline ToyModel load_model(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 16) throw std::runtime_error("load_model: file too small: " + path);
  const std::uint64_t stored = [&] {
    std::uint64_t v;
    std::memcpy(&v, buf.data() + buf.size() - 8, 8);
    return v;
  }();
  if (stored != fnv1a64(buf.data(), buf.size() - 8))
    throw std::runtime_error("load_model: checksum mismatch in " + path);
  BinReader r(buf);
  char magic[4];
  std::memcpy(magic, buf.data(), 4);
  r.pos = 4;
  if (std::memcmp(magic, kWeightMagic, 4) != 0)
    throw std::runtime_error("load_model: bad magic in " + path);
  if (r.get<std::uint32_t>() != kWeightVersion)
    throw std::runtime_error("load_model: unsupported version in " + path);
  ToyModel m;
  m.config = ModelConfig::read_block(r);
  const ModelConfig& cfg = m.config;
  auto get_mat = [&](Matrix<float>& mat, std::size_t rows, std::size_t cols) {
    mat = Matrix<float>(rows, cols);
    r.get_f32s(mat.data.data(), mat.data.size());
  };
  auto get_vec = [&](std::vector<float>& v, std::size_t n) {
    v.assign(n, 0.0f);
    r.get_f32s(v.data(), n);
  };
  get_mat(m.weights.embedding, cfg.vocab_size, cfg.d_model());
  if (cfg.pos_scheme == PosScheme::Absolute)
    get_mat(m.weights.pos_embedding, cfg.max_seq_len, cfg.d_model());
  m.weights.layers.resize(cfg.n_layers);
  for (auto& l : m.weights.layers) {
    get_vec(l.attn_norm, cfg.d_model());
    get_mat(l.wq, cfg.d_model(), cfg.d_model());
    get_mat(l.wk, cfg.d_model(), cfg.kv_dim());
    get_mat(l.wv, cfg.d_model(), cfg.kv_dim());
    get_mat(l.wo, cfg.d_model(), cfg.d_model());
    get_vec(l.ffn_norm, cfg.d_model());
    get_mat(l.w1, cfg.d_model(), cfg.d_ff);
    get_mat(l.w2, cfg.d_ff, cfg.d_model());
  }
  get_vec(m.weights.final_norm, cfg.d_model());
  get_mat(m.weights.lm_head, cfg.d_model(), cfg.vocab_size);
  if (r.pos != buf.size() - 8) throw std::runtime_error("load_model: trailing bytes in " + path);
  return m;
}

inline ModelConfig parse_model_config(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto need = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error(std::string("config: missing key ") + key);
    return it->second;
  };
  auto to_size = [](const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); };
  c.n_layers = to_size(need("n_layers"));
  c.n_q_heads = to_size(need("n_q_heads"));
  c.n_kv_heads = to_size(need("n_kv_heads"));
  c.d_head = to_size(need("d_head"));
  c.d_ff = to_size(need("d_ff"));
  c.vocab_size = to_size(need("vocab_size"));
  c.max_seq_len = to_size(need("max_seq_len"));
  const std::string& pos = need("pos_scheme");
  if (pos == "absolute")
    c.pos_scheme = PosScheme::Absolute;
  else if (pos == "rope")
    c.pos_scheme = PosScheme::Rope;
  else
    throw std::runtime_error("config: pos_scheme must be absolute or rope");
  c.validate();
  return c;
}

}  // namespace hh
