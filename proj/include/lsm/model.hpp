#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsm/common.hpp"
#include "lsm/rng.hpp"

// Decoder-only transformer with pluggable attention (MHA / MQA / GQA),
// normalization (RMS / layer), activation (gelu-tanh / gelu-new / silu),
// gated or plain FFN, and fixed or learned-frequency RoPE.
//
// Parameters are stored as f32 (matching the checkpoint container); all
// arithmetic is double.

namespace lsm {

enum class Activation { gelu_tanh, gelu_new, silu };
enum class NormKind { rms, layer };
enum class RopeKind { fixed, learned_frequency };

constexpr double kNormEps = 1e-5;
constexpr double kRopeBase = 10000.0;

struct LsmConfig {
  int vocab_size = 128;
  int d_model = 64;
  int n_layers = 2;
  int n_q_heads = 4;
  int n_kv_heads = 2;
  int ffn_hidden = 256;
  bool ffn_gated = true;
  Activation activation = Activation::silu;
  NormKind norm = NormKind::rms;
  RopeKind rope = RopeKind::fixed;
  double dropout_rate = 0.0;
  int max_seq_len = 292;

  int head_dim() const { return d_model / n_q_heads; }

  void validate() const {
    require(vocab_size > 0, "config: vocab_size must be positive");
    require(d_model > 0 && n_layers > 0, "config: d_model/n_layers must be positive");
    require(n_q_heads > 0 && n_kv_heads > 0, "config: head counts must be positive");
    require(d_model % n_q_heads == 0, "config: d_model not divisible by n_q_heads");
    require(n_q_heads % n_kv_heads == 0, "config: n_q_heads not divisible by n_kv_heads");
    require(head_dim() % 2 == 0, "config: head_dim must be even for RoPE");
    require(ffn_hidden > 0, "config: ffn_hidden must be positive");
    require(dropout_rate >= 0.0 && dropout_rate < 1.0, "config: dropout_rate in [0,1)");
    require(max_seq_len >= 1, "config: max_seq_len must be positive");
  }
};

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::gelu_tanh: return "gelu_tanh";
    case Activation::gelu_new: return "gelu_new";
    case Activation::silu: return "silu";
  }
  return "?";
}

inline std::string to_string(NormKind n) {
  return n == NormKind::rms ? "rms" : "layer";
}

inline std::string to_string(RopeKind r) {
  return r == RopeKind::fixed ? "fixed" : "learned_frequency";
}

inline nlohmann::json config_to_json(const LsmConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_q_heads", c.n_q_heads},
          {"n_kv_heads", c.n_kv_heads},
          {"ffn_hidden", c.ffn_hidden},
          {"ffn_gated", c.ffn_gated},
          {"activation", to_string(c.activation)},
          {"norm", to_string(c.norm)},
          {"rope", to_string(c.rope)},
          {"dropout_rate", c.dropout_rate},
          {"max_seq_len", c.max_seq_len}};
}

inline LsmConfig config_from_json(const nlohmann::json& j) {
  LsmConfig c;
  c.vocab_size = j.value("vocab_size", 128);
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_q_heads = j.at("n_q_heads").get<int>();
  c.n_kv_heads = j.at("n_kv_heads").get<int>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  c.ffn_gated = j.at("ffn_gated").get<bool>();
  const std::string act = j.value("activation", std::string("silu"));
  if (act == "gelu_tanh")
    c.activation = Activation::gelu_tanh;
  else if (act == "gelu_new")
    c.activation = Activation::gelu_new;
  else if (act == "silu")
    c.activation = Activation::silu;
  else
    throw format_error("unknown activation: " + act);
  const std::string nk = j.value("norm", std::string("rms"));
  if (nk == "rms")
    c.norm = NormKind::rms;
  else if (nk == "layer")
    c.norm = NormKind::layer;
  else
    throw format_error("unknown norm: " + nk);
  const std::string rp = j.value("rope", std::string("fixed"));
  if (rp == "fixed")
    c.rope = RopeKind::fixed;
  else if (rp == "learned_frequency")
    c.rope = RopeKind::learned_frequency;
  else
    throw format_error("unknown rope kind: " + rp);
  c.dropout_rate = j.value("dropout_rate", 0.0);
  c.max_seq_len = j.value("max_seq_len", 292);
  c.validate();
  return c;
}

// Named architecture presets. The five large flavors share 12 layers and a
// 768-wide residual stream; they differ in attention sharing, FFN gating,
// normalization, activation, and RoPE.
inline LsmConfig preset_config(const std::string& name) {
  LsmConfig c;
  c.vocab_size = 128;
  c.max_seq_len = 292;
  if (name == "tiny") {
    c.d_model = 64;
    c.n_layers = 2;
    c.n_q_heads = 4;
    c.n_kv_heads = 2;
    c.ffn_hidden = 256;
    c.ffn_gated = true;
    c.activation = Activation::silu;
    c.norm = NormKind::rms;
    c.rope = RopeKind::fixed;
    c.dropout_rate = 0.0;
  } else if (name == "lsm-gpt" || name == "lsm-phi") {
    c.d_model = 768;
    c.n_layers = 12;
    c.n_q_heads = 12;
    c.n_kv_heads = 12;
    c.ffn_hidden = 3072;
    c.ffn_gated = false;
    c.activation = Activation::gelu_new;
    c.norm = NormKind::layer;
    c.rope = name == "lsm-gpt" ? RopeKind::learned_frequency : RopeKind::fixed;
    c.dropout_rate = 0.2;
  } else if (name == "lsm-gemma" || name == "lsm-mistral") {
    c.d_model = 768;
    c.n_layers = 12;
    c.n_q_heads = 12;
    c.n_kv_heads = 1;
    c.ffn_hidden = 3072;
    c.ffn_gated = true;
    c.activation = name == "lsm-gemma" ? Activation::gelu_tanh : Activation::silu;
    c.norm = NormKind::rms;
    c.rope = RopeKind::fixed;
    c.dropout_rate = 0.2;
  } else if (name == "lsm-llama") {
    c.d_model = 768;
    c.n_layers = 12;
    c.n_q_heads = 8;
    c.n_kv_heads = 2;
    c.ffn_hidden = 6656;
    c.ffn_gated = true;
    c.activation = Activation::silu;
    c.norm = NormKind::rms;
    c.rope = RopeKind::fixed;
    c.dropout_rate = 0.2;
  } else {
    throw spec_error("unknown preset: " + name);
  }
  c.validate();
  return c;
}

inline const std::array<const char*, 6>& preset_names() {
  static const std::array<const char*, 6> names = {
      "tiny", "lsm-gpt", "lsm-phi", "lsm-gemma", "lsm-mistral", "lsm-llama"};
  return names;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct Tensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> w;

  std::int64_t size() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

struct TensorShape {
  std::string name;
  std::vector<int> shape;
};

// Per-layer tensor indices into Model::params.
struct LayerIndex {
  int attn_norm_gain = -1, attn_norm_bias = -1;
  int wq = -1, wk = -1, wv = -1, wo = -1;
  int ffn_norm_gain = -1, ffn_norm_bias = -1;
  int w_up = -1, w_gate = -1, w_down = -1;
};

// The allocation plan shared by build_model and the analytic count.
inline std::vector<TensorShape> param_shapes(const LsmConfig& cfg) {
  cfg.validate();
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  std::vector<TensorShape> out;
  out.push_back({"embed.weight", {cfg.vocab_size, d}});
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm.gain", {d}});
    if (cfg.norm == NormKind::layer) out.push_back({p + "attn_norm.bias", {d}});
    out.push_back({p + "attn.wq", {d, cfg.n_q_heads * hd}});
    out.push_back({p + "attn.wk", {d, cfg.n_kv_heads * hd}});
    out.push_back({p + "attn.wv", {d, cfg.n_kv_heads * hd}});
    out.push_back({p + "attn.wo", {cfg.n_q_heads * hd, d}});
    out.push_back({p + "ffn_norm.gain", {d}});
    if (cfg.norm == NormKind::layer) out.push_back({p + "ffn_norm.bias", {d}});
    out.push_back({p + "ffn.w_up", {d, cfg.ffn_hidden}});
    if (cfg.ffn_gated) out.push_back({p + "ffn.w_gate", {d, cfg.ffn_hidden}});
    out.push_back({p + "ffn.w_down", {cfg.ffn_hidden, d}});
  }
  out.push_back({"final_norm.gain", {d}});
  if (cfg.norm == NormKind::layer) out.push_back({"final_norm.bias", {d}});
  out.push_back({"head.weight", {d, cfg.vocab_size}});
  if (cfg.rope == RopeKind::learned_frequency)
    out.push_back({"rope.freq", {hd / 2}});
  return out;
}

// Closed-form parameter count; must equal the sum of instantiated tensor
// sizes for every valid config.
inline std::int64_t count_params(const LsmConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.d_model;
  const std::int64_t hd = cfg.head_dim();
  const std::int64_t v = cfg.vocab_size;
  const std::int64_t f = cfg.ffn_hidden;
  const std::int64_t norm = cfg.norm == NormKind::layer ? 2 * d : d;
  const std::int64_t attn = d * (cfg.n_q_heads * hd) + 2 * d * (cfg.n_kv_heads * hd) +
                            (cfg.n_q_heads * hd) * d;
  const std::int64_t ffn = (cfg.ffn_gated ? 3 : 2) * d * f;
  std::int64_t total = v * d + d * v + norm;
  total += static_cast<std::int64_t>(cfg.n_layers) * (2 * norm + attn + ffn);
  if (cfg.rope == RopeKind::learned_frequency) total += hd / 2;
  return total;
}

struct Model {
  LsmConfig cfg;
  std::vector<Tensor> params;
  std::vector<LayerIndex> layers;
  int idx_embed = -1, idx_head = -1;
  int idx_final_norm_gain = -1, idx_final_norm_bias = -1;
  int idx_rope_freq = -1;

  const Tensor& p(int i) const { return params[static_cast<std::size_t>(i)]; }
  Tensor& p(int i) { return params[static_cast<std::size_t>(i)]; }

  std::int64_t total_params() const {
    std::int64_t n = 0;
    for (const auto& t : params) n += t.size();
    return n;
  }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    return -1;
  }

  // RoPE pair frequency for pair j (0 <= j < head_dim/2).
  double rope_freq(int j) const {
    if (idx_rope_freq >= 0)
      return static_cast<double>(p(idx_rope_freq).w[static_cast<std::size_t>(j)]);
    return std::pow(kRopeBase, -2.0 * j / cfg.head_dim());
  }
};

namespace detail {

inline void wire_indices(Model& m) {
  m.layers.assign(static_cast<std::size_t>(m.cfg.n_layers), LayerIndex{});
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const std::string& n = m.params[i].name;
    const int idx = static_cast<int>(i);
    if (n == "embed.weight") m.idx_embed = idx;
    else if (n == "head.weight") m.idx_head = idx;
    else if (n == "final_norm.gain") m.idx_final_norm_gain = idx;
    else if (n == "final_norm.bias") m.idx_final_norm_bias = idx;
    else if (n == "rope.freq") m.idx_rope_freq = idx;
    else if (n.rfind("layers.", 0) == 0) {
      const std::size_t dot = n.find('.', 7);
      const int l = std::stoi(n.substr(7, dot - 7));
      const std::string field = n.substr(dot + 1);
      auto& L = m.layers[static_cast<std::size_t>(l)];
      if (field == "attn_norm.gain") L.attn_norm_gain = idx;
      else if (field == "attn_norm.bias") L.attn_norm_bias = idx;
      else if (field == "attn.wq") L.wq = idx;
      else if (field == "attn.wk") L.wk = idx;
      else if (field == "attn.wv") L.wv = idx;
      else if (field == "attn.wo") L.wo = idx;
      else if (field == "ffn_norm.gain") L.ffn_norm_gain = idx;
      else if (field == "ffn_norm.bias") L.ffn_norm_bias = idx;
      else if (field == "ffn.w_up") L.w_up = idx;
      else if (field == "ffn.w_gate") L.w_gate = idx;
      else if (field == "ffn.w_down") L.w_down = idx;
      else throw format_error("unknown layer tensor: " + n);
    } else {
      throw format_error("unknown tensor: " + n);
    }
  }
}

}  // namespace detail

// Deterministic initialization: normal(0, 0.02) for projections and the
// embedding, ones for norm gains, zeros for norm biases, the fixed schedule
// for learned RoPE frequencies.
inline Model build_model(const LsmConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m;
  m.cfg = cfg;
  Rng rng(derive_seed(seed, 0xB01DFACEULL));
  for (const auto& ts : param_shapes(cfg)) {
    Tensor t;
    t.name = ts.name;
    t.shape = ts.shape;
    t.w.resize(static_cast<std::size_t>(t.size()));
    const bool is_gain = ts.name.ends_with("norm.gain");
    const bool is_bias = ts.name.ends_with("norm.bias");
    const bool is_rope = ts.name == "rope.freq";
    if (is_gain) {
      std::fill(t.w.begin(), t.w.end(), 1.0f);
    } else if (is_bias) {
      std::fill(t.w.begin(), t.w.end(), 0.0f);
    } else if (is_rope) {
      for (std::size_t j = 0; j < t.w.size(); ++j)
        t.w[j] = static_cast<float>(
            std::pow(kRopeBase, -2.0 * static_cast<double>(j) / cfg.head_dim()));
    } else {
      for (auto& w : t.w) w = static_cast<float>(0.02 * rng.gaussian());
    }
    m.params.push_back(std::move(t));
  }
  detail::wire_indices(m);
  return m;
}

// ---------------------------------------------------------------------------
// Math pieces
// ---------------------------------------------------------------------------

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::silu:
      return x / (1.0 + std::exp(-x));
    case Activation::gelu_tanh:
    case Activation::gelu_new: {
      // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))); the two names keep
      // their distinct config identity but share this formula.
      const double c = 0.7978845608028654;  // sqrt(2/pi)
      const double u = c * (x + 0.044715 * x * x * x);
      return 0.5 * x * (1.0 + std::tanh(u));
    }
  }
  return x;
}

inline double activate_grad(Activation a, double x) {
  switch (a) {
    case Activation::silu: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 + x * (1.0 - s));
    }
    case Activation::gelu_tanh:
    case Activation::gelu_new: {
      const double c = 0.7978845608028654;
      const double u = c * (x + 0.044715 * x * x * x);
      const double th = std::tanh(u);
      const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    }
  }
  return 1.0;
}

// Rotate q/k pairs in place: pair j of a head_dim vector through angle
// pos * freq_j. Position 0 is the identity.
inline void rope_rotate_vec(double* v, int head_dim, double pos,
                            const Model& m) {
  for (int j = 0; j < head_dim / 2; ++j) {
    const double a = pos * m.rope_freq(j);
    const double c = std::cos(a), s = std::sin(a);
    const double x = v[2 * j], y = v[2 * j + 1];
    v[2 * j] = x * c - y * s;
    v[2 * j + 1] = x * s + y * c;
  }
}

// Standalone rotation used by tests and by the property contracts: rotates
// each row (one per position) of a [n_pos x head_dim] buffer.
inline void rope_rotate(std::vector<double>& rows, int head_dim,
                        const std::vector<double>& positions, const Model& m) {
  require(head_dim % 2 == 0, "rope_rotate: head_dim must be even");
  require(rows.size() == positions.size() * static_cast<std::size_t>(head_dim),
          "rope_rotate: shape mismatch");
  for (std::size_t r = 0; r < positions.size(); ++r)
    rope_rotate_vec(&rows[r * static_cast<std::size_t>(head_dim)], head_dim,
                    positions[r], m);
}

// Causal grouped attention over already-projected (and rotated) q/k/v.
//   q: [T, n_q*hd], k/v: [T, n_kv*hd]; query head h reads kv head h/group.
//   out: [T, n_q*hd]; probs (optional) stores softmax rows per query head.
inline void attention_core(const std::vector<double>& q,
                           const std::vector<double>& k,
                           const std::vector<double>& v, int T, int n_q,
                           int n_kv, int hd, std::vector<double>& out,
                           std::vector<double>* probs_out = nullptr) {
  require(n_q % n_kv == 0, "attention_core: head group mismatch");
  const int group = n_q / n_kv;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  out.assign(static_cast<std::size_t>(T) * n_q * hd, 0.0);
  if (probs_out)
    probs_out->assign(static_cast<std::size_t>(n_q) * T * T, 0.0);

  std::vector<double> row(static_cast<std::size_t>(T));
  for (int h = 0; h < n_q; ++h) {
    const int kvh = h / group;
    for (int t = 0; t < T; ++t) {
      const double* qv = &q[(static_cast<std::size_t>(t) * n_q + h) * hd];
      double mx = -1e300;
      for (int s = 0; s <= t; ++s) {
        const double* kv = &k[(static_cast<std::size_t>(s) * n_kv + kvh) * hd];
        double dot = 0.0;
        for (int i = 0; i < hd; ++i) dot += qv[i] * kv[i];
        row[static_cast<std::size_t>(s)] = dot * scale;
        mx = std::max(mx, row[static_cast<std::size_t>(s)]);
      }
      double denom = 0.0;
      for (int s = 0; s <= t; ++s) {
        row[static_cast<std::size_t>(s)] = std::exp(row[static_cast<std::size_t>(s)] - mx);
        denom += row[static_cast<std::size_t>(s)];
      }
      double* ov = &out[(static_cast<std::size_t>(t) * n_q + h) * hd];
      for (int s = 0; s <= t; ++s) {
        const double p = row[static_cast<std::size_t>(s)] / denom;
        if (probs_out)
          (*probs_out)[(static_cast<std::size_t>(h) * T + t) * T + s] = p;
        const double* vv = &v[(static_cast<std::size_t>(s) * n_kv + kvh) * hd];
        for (int i = 0; i < hd; ++i) ov[i] += p * vv[i];
      }
    }
  }
}

// x[T,in] * W[in,out] -> y[T,out]
inline void matmul(const std::vector<double>& x, const Tensor& w, int T,
                   std::vector<double>& y) {
  const int in = w.shape[0];
  const int out = w.shape[1];
  y.assign(static_cast<std::size_t>(T) * out, 0.0);
  for (int t = 0; t < T; ++t) {
    const double* xr = &x[static_cast<std::size_t>(t) * in];
    double* yr = &y[static_cast<std::size_t>(t) * out];
    for (int i = 0; i < in; ++i) {
      const double a = xr[i];
      if (a == 0.0) continue;
      const float* wr = &w.w[static_cast<std::size_t>(i) * out];
      for (int j = 0; j < out; ++j) yr[j] += a * static_cast<double>(wr[j]);
    }
  }
}

// ---------------------------------------------------------------------------
// Forward pass with cached activations (consumed by the backward pass)
// ---------------------------------------------------------------------------

struct LayerCache {
  std::vector<double> norm1, norm1_hat, norm1_inv, norm1_mean;
  std::vector<double> q, k, v;      // post-RoPE q/k
  std::vector<double> probs;        // n_q x T x T
  std::vector<double> attn_concat;  // pre-Wo
  std::vector<double> attn_out;     // post-Wo, pre-residual
  std::vector<double> resid1;
  std::vector<double> norm2, norm2_hat, norm2_inv, norm2_mean;
  std::vector<double> ffn_up, ffn_gate, ffn_act, ffn_out;
  std::vector<double> resid2;
  std::vector<double> attn_drop_mask, ffn_drop_mask;  // empty when unused
};

struct ForwardCache {
  int T = 0;
  bool training = false;
  std::vector<int> tokens;
  std::vector<double> x0;  // embeddings
  std::vector<LayerCache> layers;
  std::vector<double> final_hat, final_inv, final_mean, final_out;
  std::vector<double> logits;  // T x vocab
};

namespace detail {

// norm over rows of x [T,d]; writes the normalized/pre-gain values (hat),
// per-row inverse scale, and per-row mean (layer norm only).
inline void norm_forward(NormKind kind, const std::vector<double>& x, int T,
                         int d, const Tensor& gain, const Tensor* bias,
                         std::vector<double>& out, std::vector<double>& hat,
                         std::vector<double>& inv, std::vector<double>& mean) {
  out.resize(static_cast<std::size_t>(T) * d);
  hat.resize(static_cast<std::size_t>(T) * d);
  inv.resize(static_cast<std::size_t>(T));
  mean.assign(static_cast<std::size_t>(T), 0.0);
  for (int t = 0; t < T; ++t) {
    const double* xr = &x[static_cast<std::size_t>(t) * d];
    double* hr = &hat[static_cast<std::size_t>(t) * d];
    double* yr = &out[static_cast<std::size_t>(t) * d];
    if (kind == NormKind::rms) {
      double ss = 0.0;
      for (int i = 0; i < d; ++i) ss += xr[i] * xr[i];
      const double r = 1.0 / std::sqrt(ss / d + kNormEps);
      inv[static_cast<std::size_t>(t)] = r;
      for (int i = 0; i < d; ++i) {
        hr[i] = xr[i] * r;
        yr[i] = hr[i] * static_cast<double>(gain.w[static_cast<std::size_t>(i)]);
      }
    } else {
      double mu = 0.0;
      for (int i = 0; i < d; ++i) mu += xr[i];
      mu /= d;
      double var = 0.0;
      for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
      var /= d;
      const double r = 1.0 / std::sqrt(var + kNormEps);
      inv[static_cast<std::size_t>(t)] = r;
      mean[static_cast<std::size_t>(t)] = mu;
      for (int i = 0; i < d; ++i) {
        hr[i] = (xr[i] - mu) * r;
        yr[i] = hr[i] * static_cast<double>(gain.w[static_cast<std::size_t>(i)]) +
                (bias ? static_cast<double>(bias->w[static_cast<std::size_t>(i)]) : 0.0);
      }
    }
  }
}

// Inverted dropout mask: entries are 0 or 1/(1-p).
inline void dropout_mask(Rng& rng, double p, std::size_t n, std::vector<double>& mask) {
  mask.resize(n);
  const double keep = 1.0 - p;
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : 1.0 / keep;
}

}  // namespace detail

// Full forward pass. In training mode dropout is applied to attention
// probabilities and to the FFN output, keyed by dropout_seed. Eval mode is
// deterministic.
inline void forward(const Model& m, const std::vector<int>& tokens, bool training,
                    ForwardCache& fc, std::uint64_t dropout_seed = 0) {
  const auto& cfg = m.cfg;
  const int T = static_cast<int>(tokens.size());
  require(T > 0 && T <= cfg.max_seq_len, "forward: sequence length out of range");
  for (int tok : tokens)
    if (tok < 0 || tok >= cfg.vocab_size)
      throw spec_error("forward: token outside vocabulary: " + std::to_string(tok));

  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const bool drop = training && cfg.dropout_rate > 0.0;
  Rng drop_rng(derive_seed(dropout_seed, 0xD50D50ULL));

  fc.T = T;
  fc.training = training;
  fc.tokens = tokens;
  fc.layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerCache{});

  // embeddings
  fc.x0.resize(static_cast<std::size_t>(T) * d);
  const Tensor& emb = m.p(m.idx_embed);
  for (int t = 0; t < T; ++t) {
    const float* row = &emb.w[static_cast<std::size_t>(tokens[static_cast<std::size_t>(t)]) * d];
    for (int i = 0; i < d; ++i)
      fc.x0[static_cast<std::size_t>(t) * d + i] = static_cast<double>(row[i]);
  }

  const std::vector<double>* x = &fc.x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto& L = m.layers[static_cast<std::size_t>(l)];
    auto& c = fc.layers[static_cast<std::size_t>(l)];

    detail::norm_forward(cfg.norm, *x, T, d, m.p(L.attn_norm_gain),
                         L.attn_norm_bias >= 0 ? &m.p(L.attn_norm_bias) : nullptr,
                         c.norm1, c.norm1_hat, c.norm1_inv, c.norm1_mean);

    matmul(c.norm1, m.p(L.wq), T, c.q);
    matmul(c.norm1, m.p(L.wk), T, c.k);
    matmul(c.norm1, m.p(L.wv), T, c.v);

    for (int t = 0; t < T; ++t) {
      for (int h = 0; h < cfg.n_q_heads; ++h)
        rope_rotate_vec(&c.q[(static_cast<std::size_t>(t) * cfg.n_q_heads + h) * hd],
                        hd, t, m);
      for (int h = 0; h < cfg.n_kv_heads; ++h)
        rope_rotate_vec(&c.k[(static_cast<std::size_t>(t) * cfg.n_kv_heads + h) * hd],
                        hd, t, m);
    }

    attention_core(c.q, c.k, c.v, T, cfg.n_q_heads, cfg.n_kv_heads, hd,
                   c.attn_concat, &c.probs);

    if (drop) {
      // c.probs stays pre-dropout (the softmax backward needs it); the
      // attention output is recomputed with masked probabilities.
      detail::dropout_mask(drop_rng, cfg.dropout_rate, c.probs.size(), c.attn_drop_mask);
      std::fill(c.attn_concat.begin(), c.attn_concat.end(), 0.0);
      const int group = cfg.n_q_heads / cfg.n_kv_heads;
      for (int h = 0; h < cfg.n_q_heads; ++h) {
        const int kvh = h / group;
        for (int t = 0; t < T; ++t) {
          double* ov = &c.attn_concat[(static_cast<std::size_t>(t) * cfg.n_q_heads + h) * hd];
          for (int s = 0; s <= t; ++s) {
            const std::size_t pi = (static_cast<std::size_t>(h) * T + t) * T + s;
            const double p = c.probs[pi] * c.attn_drop_mask[pi];
            if (p == 0.0) continue;
            const double* vv = &c.v[(static_cast<std::size_t>(s) * cfg.n_kv_heads + kvh) * hd];
            for (int i = 0; i < hd; ++i) ov[i] += p * vv[i];
          }
        }
      }
    }

    matmul(c.attn_concat, m.p(L.wo), T, c.attn_out);

    c.resid1.resize(static_cast<std::size_t>(T) * d);
    for (std::size_t i = 0; i < c.resid1.size(); ++i)
      c.resid1[i] = (*x)[i] + c.attn_out[i];

    detail::norm_forward(cfg.norm, c.resid1, T, d, m.p(L.ffn_norm_gain),
                         L.ffn_norm_bias >= 0 ? &m.p(L.ffn_norm_bias) : nullptr,
                         c.norm2, c.norm2_hat, c.norm2_inv, c.norm2_mean);

    matmul(c.norm2, m.p(L.w_up), T, c.ffn_up);
    c.ffn_act.resize(static_cast<std::size_t>(T) * cfg.ffn_hidden);
    if (cfg.ffn_gated) {
      matmul(c.norm2, m.p(L.w_gate), T, c.ffn_gate);
      for (std::size_t i = 0; i < c.ffn_act.size(); ++i)
        c.ffn_act[i] = activate(cfg.activation, c.ffn_gate[i]) * c.ffn_up[i];
    } else {
      for (std::size_t i = 0; i < c.ffn_act.size(); ++i)
        c.ffn_act[i] = activate(cfg.activation, c.ffn_up[i]);
    }
    matmul(c.ffn_act, m.p(L.w_down), T, c.ffn_out);

    if (drop) {
      detail::dropout_mask(drop_rng, cfg.dropout_rate, c.ffn_out.size(), c.ffn_drop_mask);
      for (std::size_t i = 0; i < c.ffn_out.size(); ++i) c.ffn_out[i] *= c.ffn_drop_mask[i];
    }

    c.resid2.resize(static_cast<std::size_t>(T) * d);
    for (std::size_t i = 0; i < c.resid2.size(); ++i)
      c.resid2[i] = c.resid1[i] + c.ffn_out[i];

    x = &c.resid2;
  }

  detail::norm_forward(cfg.norm, *x, T, d, m.p(m.idx_final_norm_gain),
                       m.idx_final_norm_bias >= 0 ? &m.p(m.idx_final_norm_bias) : nullptr,
                       fc.final_out, fc.final_hat, fc.final_inv, fc.final_mean);
  matmul(fc.final_out, m.p(m.idx_head), T, fc.logits);
}

inline std::vector<double> forward_logits(const Model& m, const std::vector<int>& tokens) {
  ForwardCache fc;
  forward(m, tokens, false, fc);
  return fc.logits;
}

// ---------------------------------------------------------------------------
// Incremental decoding with a KV cache (eval mode only)
// ---------------------------------------------------------------------------

class Generator {
 public:
  explicit Generator(const Model& m) : m_(m) {
    const auto& cfg = m.cfg;
    const std::size_t kv = static_cast<std::size_t>(cfg.max_seq_len) *
                           cfg.n_kv_heads * cfg.head_dim();
    k_cache_.assign(static_cast<std::size_t>(cfg.n_layers), std::vector<double>(kv));
    v_cache_.assign(static_cast<std::size_t>(cfg.n_layers), std::vector<double>(kv));
  }

  int pos() const { return pos_; }

  // Feed one token at the next position; returns logits for that position.
  const std::vector<double>& step(int token) {
    const auto& cfg = m_.cfg;
    require(pos_ < cfg.max_seq_len, "Generator: context exhausted");
    if (token < 0 || token >= cfg.vocab_size)
      throw spec_error("Generator: token outside vocabulary");
    const int d = cfg.d_model;
    const int hd = cfg.head_dim();
    const int t = pos_;

    x_.resize(static_cast<std::size_t>(d));
    const Tensor& emb = m_.p(m_.idx_embed);
    for (int i = 0; i < d; ++i)
      x_[static_cast<std::size_t>(i)] =
          static_cast<double>(emb.w[static_cast<std::size_t>(token) * d + i]);

    for (int l = 0; l < cfg.n_layers; ++l) {
      auto& L = m_.layers[static_cast<std::size_t>(l)];
      norm_row(cfg, x_, m_.p(L.attn_norm_gain),
               L.attn_norm_bias >= 0 ? &m_.p(L.attn_norm_bias) : nullptr, nx_);

      matvec(nx_, m_.p(L.wq), q_);
      matvec(nx_, m_.p(L.wk), krow_);
      matvec(nx_, m_.p(L.wv), vrow_);
      for (int h = 0; h < cfg.n_q_heads; ++h)
        rope_rotate_vec(&q_[static_cast<std::size_t>(h) * hd], hd, t, m_);
      for (int h = 0; h < cfg.n_kv_heads; ++h)
        rope_rotate_vec(&krow_[static_cast<std::size_t>(h) * hd], hd, t, m_);

      auto& K = k_cache_[static_cast<std::size_t>(l)];
      auto& V = v_cache_[static_cast<std::size_t>(l)];
      std::copy(krow_.begin(), krow_.end(),
                K.begin() + static_cast<std::size_t>(t) * cfg.n_kv_heads * hd);
      std::copy(vrow_.begin(), vrow_.end(),
                V.begin() + static_cast<std::size_t>(t) * cfg.n_kv_heads * hd);

      const int group = cfg.n_q_heads / cfg.n_kv_heads;
      const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
      attn_.assign(static_cast<std::size_t>(cfg.n_q_heads) * hd, 0.0);
      score_.resize(static_cast<std::size_t>(t) + 1);
      for (int h = 0; h < cfg.n_q_heads; ++h) {
        const int kvh = h / group;
        const double* qv = &q_[static_cast<std::size_t>(h) * hd];
        double mx = -1e300;
        for (int s = 0; s <= t; ++s) {
          const double* kv = &K[(static_cast<std::size_t>(s) * cfg.n_kv_heads + kvh) * hd];
          double dot = 0.0;
          for (int i = 0; i < hd; ++i) dot += qv[i] * kv[i];
          score_[static_cast<std::size_t>(s)] = dot * scale;
          mx = std::max(mx, score_[static_cast<std::size_t>(s)]);
        }
        double denom = 0.0;
        for (int s = 0; s <= t; ++s) {
          score_[static_cast<std::size_t>(s)] = std::exp(score_[static_cast<std::size_t>(s)] - mx);
          denom += score_[static_cast<std::size_t>(s)];
        }
        double* ov = &attn_[static_cast<std::size_t>(h) * hd];
        for (int s = 0; s <= t; ++s) {
          const double p = score_[static_cast<std::size_t>(s)] / denom;
          const double* vv = &V[(static_cast<std::size_t>(s) * cfg.n_kv_heads + kvh) * hd];
          for (int i = 0; i < hd; ++i) ov[i] += p * vv[i];
        }
      }
      matvec(attn_, m_.p(L.wo), proj_);
      for (int i = 0; i < d; ++i) x_[static_cast<std::size_t>(i)] += proj_[static_cast<std::size_t>(i)];

      norm_row(cfg, x_, m_.p(L.ffn_norm_gain),
               L.ffn_norm_bias >= 0 ? &m_.p(L.ffn_norm_bias) : nullptr, nx_);
      matvec(nx_, m_.p(L.w_up), up_);
      if (cfg.ffn_gated) {
        matvec(nx_, m_.p(L.w_gate), gate_);
        for (std::size_t i = 0; i < up_.size(); ++i)
          up_[i] *= activate(cfg.activation, gate_[i]);
      } else {
        for (auto& u : up_) u = activate(cfg.activation, u);
      }
      matvec(up_, m_.p(L.w_down), proj_);
      for (int i = 0; i < d; ++i) x_[static_cast<std::size_t>(i)] += proj_[static_cast<std::size_t>(i)];
    }

    norm_row(cfg, x_, m_.p(m_.idx_final_norm_gain),
             m_.idx_final_norm_bias >= 0 ? &m_.p(m_.idx_final_norm_bias) : nullptr, nx_);
    matvec(nx_, m_.p(m_.idx_head), logits_);
    ++pos_;
    return logits_;
  }

 private:
  static void matvec(const std::vector<double>& x, const Tensor& w,
                     std::vector<double>& y) {
    const int in = w.shape[0];
    const int out = w.shape[1];
    y.assign(static_cast<std::size_t>(out), 0.0);
    for (int i = 0; i < in; ++i) {
      const double a = x[static_cast<std::size_t>(i)];
      if (a == 0.0) continue;
      const float* wr = &w.w[static_cast<std::size_t>(i) * out];
      for (int j = 0; j < out; ++j) y[static_cast<std::size_t>(j)] += a * static_cast<double>(wr[j]);
    }
  }

  static void norm_row(const LsmConfig& cfg, const std::vector<double>& x,
                       const Tensor& gain, const Tensor* bias,
                       std::vector<double>& out) {
    const int d = cfg.d_model;
    out.resize(static_cast<std::size_t>(d));
    if (cfg.norm == NormKind::rms) {
      double ss = 0.0;
      for (int i = 0; i < d; ++i) ss += x[static_cast<std::size_t>(i)] * x[static_cast<std::size_t>(i)];
      const double r = 1.0 / std::sqrt(ss / d + kNormEps);
      for (int i = 0; i < d; ++i)
        out[static_cast<std::size_t>(i)] = x[static_cast<std::size_t>(i)] * r *
                                           static_cast<double>(gain.w[static_cast<std::size_t>(i)]);
    } else {
      double mu = 0.0;
      for (int i = 0; i < d; ++i) mu += x[static_cast<std::size_t>(i)];
      mu /= d;
      double var = 0.0;
      for (int i = 0; i < d; ++i) {
        const double dv = x[static_cast<std::size_t>(i)] - mu;
        var += dv * dv;
      }
      var /= d;
      const double r = 1.0 / std::sqrt(var + kNormEps);
      for (int i = 0; i < d; ++i)
        out[static_cast<std::size_t>(i)] =
            (x[static_cast<std::size_t>(i)] - mu) * r *
                static_cast<double>(gain.w[static_cast<std::size_t>(i)]) +
            (bias ? static_cast<double>(bias->w[static_cast<std::size_t>(i)]) : 0.0);
    }
  }

  const Model& m_;
  int pos_ = 0;
  std::vector<std::vector<double>> k_cache_, v_cache_;
  std::vector<double> x_, nx_, q_, krow_, vrow_, attn_, proj_, up_, gate_, score_, logits_;
};

}  // namespace lsm
