#pragma once

#include <cmath>
#include <vector>

#include "lsm/model.hpp"

// Reverse-mode gradients through the cached forward pass. Gradients
// accumulate into per-tensor double buffers aligned with Model::params, so a
// batch is processed by zeroing once and calling backward per sequence.

namespace lsm {

using GradSet = std::vector<std::vector<double>>;

inline GradSet make_grads(const Model& m) {
  GradSet g(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i)
    g[i].assign(m.params[i].w.size(), 0.0);
  return g;
}

inline void zero_grads(GradSet& g) {
  for (auto& t : g) std::fill(t.begin(), t.end(), 0.0);
}

namespace detail {

// y = x W;  dx += dy W^T;  dw += x^T dy
inline void matmul_backward(const std::vector<double>& x, const Tensor& w,
                            const std::vector<double>& dy, int T,
                            std::vector<double>& dx, std::vector<double>& dw,
                            bool accumulate_dx) {
  const int in = w.shape[0];
  const int out = w.shape[1];
  if (!accumulate_dx) dx.assign(static_cast<std::size_t>(T) * in, 0.0);
  for (int t = 0; t < T; ++t) {
    const double* dyr = &dy[static_cast<std::size_t>(t) * out];
    const double* xr = &x[static_cast<std::size_t>(t) * in];
    double* dxr = &dx[static_cast<std::size_t>(t) * in];
    for (int i = 0; i < in; ++i) {
      const float* wr = &w.w[static_cast<std::size_t>(i) * out];
      double* dwr = &dw[static_cast<std::size_t>(i) * out];
      double acc = 0.0;
      const double xv = xr[i];
      for (int j = 0; j < out; ++j) {
        acc += dyr[j] * static_cast<double>(wr[j]);
        dwr[j] += xv * dyr[j];
      }
      dxr[i] += acc;
    }
  }
}

// Backward through norm_forward. dx is assigned (not accumulated).
inline void norm_backward(NormKind kind, const std::vector<double>& dy,
                          const std::vector<double>& hat,
                          const std::vector<double>& inv, int T, int d,
                          const Tensor& gain, std::vector<double>& dx,
                          std::vector<double>& dgain, std::vector<double>* dbias) {
  dx.assign(static_cast<std::size_t>(T) * d, 0.0);
  for (int t = 0; t < T; ++t) {
    const double* dyr = &dy[static_cast<std::size_t>(t) * d];
    const double* hr = &hat[static_cast<std::size_t>(t) * d];
    double* dxr = &dx[static_cast<std::size_t>(t) * d];
    const double r = inv[static_cast<std::size_t>(t)];
    if (kind == NormKind::rms) {
      // y_i = g_i * hat_i, hat = x * r, r = (mean x^2 + eps)^-1/2
      double dot = 0.0;
      for (int i = 0; i < d; ++i) {
        const double dh = dyr[i] * static_cast<double>(gain.w[static_cast<std::size_t>(i)]);
        dot += dh * hr[i];
        dgain[static_cast<std::size_t>(i)] += dyr[i] * hr[i];
      }
      for (int i = 0; i < d; ++i) {
        const double dh = dyr[i] * static_cast<double>(gain.w[static_cast<std::size_t>(i)]);
        dxr[i] = r * (dh - hr[i] * dot / d);
      }
    } else {
      double mean_dh = 0.0, mean_dh_hat = 0.0;
      for (int i = 0; i < d; ++i) {
        const double dh = dyr[i] * static_cast<double>(gain.w[static_cast<std::size_t>(i)]);
        mean_dh += dh;
        mean_dh_hat += dh * hr[i];
        dgain[static_cast<std::size_t>(i)] += dyr[i] * hr[i];
        if (dbias) (*dbias)[static_cast<std::size_t>(i)] += dyr[i];
      }
      mean_dh /= d;
      mean_dh_hat /= d;
      for (int i = 0; i < d; ++i) {
        const double dh = dyr[i] * static_cast<double>(gain.w[static_cast<std::size_t>(i)]);
        dxr[i] = r * (dh - mean_dh - hr[i] * mean_dh_hat);
      }
    }
  }
}

// Rotate a gradient back through RoPE (angle -theta) and accumulate the
// learned-frequency gradient dL/dfreq_j += pos * <g, d(rot)/dtheta>.
inline void rope_backward_vec(const double* post, const double* g_post, int hd,
                              double pos, const Model& m, double* g_pre,
                              std::vector<double>* dfreq) {
  for (int j = 0; j < hd / 2; ++j) {
    const double a = pos * m.rope_freq(j);
    const double c = std::cos(a), s = std::sin(a);
    const double gx = g_post[2 * j], gy = g_post[2 * j + 1];
    // inverse rotation of the gradient
    g_pre[2 * j] = gx * c + gy * s;
    g_pre[2 * j + 1] = -gx * s + gy * c;
    if (dfreq) {
      const double x = post[2 * j], y = post[2 * j + 1];
      (*dfreq)[static_cast<std::size_t>(j)] += pos * (gx * -y + gy * x);
    }
  }
}

}  // namespace detail

// Accumulates d(loss)/d(params) into grads given d(loss)/d(logits).
inline void backward(const Model& m, const ForwardCache& fc,
                     const std::vector<double>& dlogits, GradSet& grads) {
  const auto& cfg = m.cfg;
  const int T = fc.T;
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const int group = cfg.n_q_heads / cfg.n_kv_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<double>* dfreq =
      m.idx_rope_freq >= 0 ? &grads[static_cast<std::size_t>(m.idx_rope_freq)] : nullptr;

  // head + final norm
  std::vector<double> d_final_out;
  detail::matmul_backward(fc.final_out, m.p(m.idx_head), dlogits, T, d_final_out,
                          grads[static_cast<std::size_t>(m.idx_head)], false);
  std::vector<double> dx;
  detail::norm_backward(cfg.norm, d_final_out, fc.final_hat, fc.final_inv, T, d,
                        m.p(m.idx_final_norm_gain), dx,
                        grads[static_cast<std::size_t>(m.idx_final_norm_gain)],
                        m.idx_final_norm_bias >= 0
                            ? &grads[static_cast<std::size_t>(m.idx_final_norm_bias)]
                            : nullptr);

  std::vector<double> d_resid1, d_ffn_pre, d_ffn_act, d_up, d_gate, d_norm2, d_norm1;
  std::vector<double> d_attn_concat, dq(static_cast<std::size_t>(T) * cfg.n_q_heads * hd);
  std::vector<double> dk, dv, dp(static_cast<std::size_t>(T));
  std::vector<double> dq_pre(dq.size()), dk_pre;

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const auto& L = m.layers[static_cast<std::size_t>(l)];
    const auto& c = fc.layers[static_cast<std::size_t>(l)];

    // dx currently holds d(resid2)
    // resid2 = resid1 + dropout(ffn_out)
    d_ffn_pre = dx;
    if (!c.ffn_drop_mask.empty())
      for (std::size_t i = 0; i < d_ffn_pre.size(); ++i) d_ffn_pre[i] *= c.ffn_drop_mask[i];

    detail::matmul_backward(c.ffn_act, m.p(L.w_down), d_ffn_pre, T, d_ffn_act,
                            grads[static_cast<std::size_t>(L.w_down)], false);

    if (cfg.ffn_gated) {
      d_up.resize(d_ffn_act.size());
      d_gate.resize(d_ffn_act.size());
      for (std::size_t i = 0; i < d_ffn_act.size(); ++i) {
        const double g = c.ffn_gate[i];
        d_up[i] = d_ffn_act[i] * activate(cfg.activation, g);
        d_gate[i] = d_ffn_act[i] * c.ffn_up[i] * activate_grad(cfg.activation, g);
      }
      detail::matmul_backward(c.norm2, m.p(L.w_up), d_up, T, d_norm2,
                              grads[static_cast<std::size_t>(L.w_up)], false);
      detail::matmul_backward(c.norm2, m.p(L.w_gate), d_gate, T, d_norm2,
                              grads[static_cast<std::size_t>(L.w_gate)], true);
    } else {
      d_up.resize(d_ffn_act.size());
      for (std::size_t i = 0; i < d_ffn_act.size(); ++i)
        d_up[i] = d_ffn_act[i] * activate_grad(cfg.activation, c.ffn_up[i]);
      detail::matmul_backward(c.norm2, m.p(L.w_up), d_up, T, d_norm2,
                              grads[static_cast<std::size_t>(L.w_up)], false);
    }

    detail::norm_backward(cfg.norm, d_norm2, c.norm2_hat, c.norm2_inv, T, d,
                          m.p(L.ffn_norm_gain), d_resid1,
                          grads[static_cast<std::size_t>(L.ffn_norm_gain)],
                          L.ffn_norm_bias >= 0
                              ? &grads[static_cast<std::size_t>(L.ffn_norm_bias)]
                              : nullptr);
    for (std::size_t i = 0; i < d_resid1.size(); ++i) d_resid1[i] += dx[i];

    // resid1 = x_in + wo(attn)
    detail::matmul_backward(c.attn_concat, m.p(L.wo), d_resid1, T, d_attn_concat,
                            grads[static_cast<std::size_t>(L.wo)], false);

    std::fill(dq.begin(), dq.end(), 0.0);
    dk.assign(static_cast<std::size_t>(T) * cfg.n_kv_heads * hd, 0.0);
    dv.assign(dk.size(), 0.0);
    const bool dropped = !c.attn_drop_mask.empty();

    for (int h = 0; h < cfg.n_q_heads; ++h) {
      const int kvh = h / group;
      for (int t = 0; t < T; ++t) {
        const double* dov = &d_attn_concat[(static_cast<std::size_t>(t) * cfg.n_q_heads + h) * hd];
        double pdot = 0.0;
        for (int s = 0; s <= t; ++s) {
          const std::size_t pi = (static_cast<std::size_t>(h) * T + t) * T + s;
          const double p = c.probs[pi];
          const double mask = dropped ? c.attn_drop_mask[pi] : 1.0;
          const double* vv = &c.v[(static_cast<std::size_t>(s) * cfg.n_kv_heads + kvh) * hd];
          double dot = 0.0;
          for (int i = 0; i < hd; ++i) {
            dot += dov[i] * vv[i];
            dv[(static_cast<std::size_t>(s) * cfg.n_kv_heads + kvh) * hd + i] +=
                p * mask * dov[i];
          }
          const double dpv = dot * mask;  // grad wrt pre-dropout softmax prob
          dp[static_cast<std::size_t>(s)] = dpv;
          pdot += p * dpv;
        }
        const double* qv = &c.q[(static_cast<std::size_t>(t) * cfg.n_q_heads + h) * hd];
        double* dqv = &dq[(static_cast<std::size_t>(t) * cfg.n_q_heads + h) * hd];
        for (int s = 0; s <= t; ++s) {
          const std::size_t pi = (static_cast<std::size_t>(h) * T + t) * T + s;
          const double dscore = c.probs[pi] * (dp[static_cast<std::size_t>(s)] - pdot) * scale;
          if (dscore == 0.0) continue;
          const double* kv = &c.k[(static_cast<std::size_t>(s) * cfg.n_kv_heads + kvh) * hd];
          double* dkv = &dk[(static_cast<std::size_t>(s) * cfg.n_kv_heads + kvh) * hd];
          for (int i = 0; i < hd; ++i) {
            dqv[i] += dscore * kv[i];
            dkv[i] += dscore * qv[i];
          }
        }
      }
    }

    // back through RoPE
    dq_pre.resize(dq.size());
    dk_pre.assign(dk.size(), 0.0);
    for (int t = 0; t < T; ++t) {
      for (int h = 0; h < cfg.n_q_heads; ++h) {
        const std::size_t off = (static_cast<std::size_t>(t) * cfg.n_q_heads + h) * hd;
        detail::rope_backward_vec(&c.q[off], &dq[off], hd, t, m, &dq_pre[off], dfreq);
      }
      for (int h = 0; h < cfg.n_kv_heads; ++h) {
        const std::size_t off = (static_cast<std::size_t>(t) * cfg.n_kv_heads + h) * hd;
        detail::rope_backward_vec(&c.k[off], &dk[off], hd, t, m, &dk_pre[off], dfreq);
      }
    }

    detail::matmul_backward(c.norm1, m.p(L.wq), dq_pre, T, d_norm1,
                            grads[static_cast<std::size_t>(L.wq)], false);
    detail::matmul_backward(c.norm1, m.p(L.wk), dk_pre, T, d_norm1,
                            grads[static_cast<std::size_t>(L.wk)], true);
    detail::matmul_backward(c.norm1, m.p(L.wv), dv, T, d_norm1,
                            grads[static_cast<std::size_t>(L.wv)], true);

    detail::norm_backward(cfg.norm, d_norm1, c.norm1_hat, c.norm1_inv, T, d,
                          m.p(L.attn_norm_gain), dx,
                          grads[static_cast<std::size_t>(L.attn_norm_gain)],
                          L.attn_norm_bias >= 0
                              ? &grads[static_cast<std::size_t>(L.attn_norm_bias)]
                              : nullptr);
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += d_resid1[i];
    // dx now holds the gradient wrt this layer's input
  }

  // embeddings
  auto& demb = grads[static_cast<std::size_t>(m.idx_embed)];
  for (int t = 0; t < T; ++t) {
    const int tok = fc.tokens[static_cast<std::size_t>(t)];
    double* row = &demb[static_cast<std::size_t>(tok) * d];
    const double* g = &dx[static_cast<std::size_t>(t) * d];
    for (int i = 0; i < d; ++i) row[i] += g[i];
  }
}

}  // namespace lsm
