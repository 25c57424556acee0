#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "lsm/common.hpp"
#include "lsm/tokenizer.hpp"

// Hybrid next-token loss: L = alpha * L_CE + (1 - alpha) * L_RMS.
//
// L_CE is the mean masked cross-entropy over the full vocabulary. L_RMS is
// the root-mean-square, over masked positions, of (expected PSD - target
// PSD) in dB, where the expected PSD is the expectation of decode_psd under
// the softmax renormalized over the PSD tokens [1,101] — a differentiable
// real-valued readout that uses only the defined vocabulary.

namespace lsm {

struct LossTerms {
  double total = 0.0;
  double ce = 0.0;
  double rms = 0.0;
  int n_masked = 0;
};

// logits: [T x vocab] row-major; targets[t] is the token position t should
// predict; mask[t] selects the scored positions (the 128 forecast slots in
// training).
inline LossTerms hybrid_loss(const std::vector<double>& logits,
                             const std::vector<int>& targets,
                             const std::vector<char>& mask, int T, int vocab,
                             double alpha) {
  require(alpha >= 0.0 && alpha <= 1.0, "hybrid_loss: alpha outside [0,1]");
  require(static_cast<int>(targets.size()) == T && static_cast<int>(mask.size()) == T,
          "hybrid_loss: shape mismatch");

  LossTerms out;
  double se = 0.0;
  for (int t = 0; t < T; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const double* row = &logits[static_cast<std::size_t>(t) * vocab];
    const int y = targets[static_cast<std::size_t>(t)];
    require(y >= 0 && y < vocab, "hybrid_loss: target token out of range");

    double mx = row[0];
    for (int k = 1; k < vocab; ++k) mx = std::max(mx, row[k]);
    double denom = 0.0;
    for (int k = 0; k < vocab; ++k) denom += std::exp(row[k] - mx);
    out.ce += -(row[y] - mx - std::log(denom));

    // expectation over renormalized PSD tokens
    double psd_denom = 0.0;
    double psd_exp = 0.0;
    for (int k = vocab::psd_token_min; k <= vocab::psd_token_max; ++k) {
      const double e = std::exp(row[k] - mx);
      psd_denom += e;
      psd_exp += e * static_cast<double>(k - 119);
    }
    const double expected = psd_exp / psd_denom;
    const double target_psd = static_cast<double>(y - 119);
    const double r = expected - target_psd;
    se += r * r;
    ++out.n_masked;
  }
  require(out.n_masked > 0, "hybrid_loss: empty mask");
  out.ce /= out.n_masked;
  out.rms = std::sqrt(se / out.n_masked);
  out.total = alpha * out.ce + (1.0 - alpha) * out.rms;
  return out;
}

// d(total)/d(logits), same shape as logits; zero rows at unmasked positions.
// At a perfect fit (rms == 0) the RMS term's subgradient is taken as zero.
inline void hybrid_loss_backward(const std::vector<double>& logits,
                                 const std::vector<int>& targets,
                                 const std::vector<char>& mask, int T, int vocab,
                                 double alpha, const LossTerms& fwd,
                                 std::vector<double>& dlogits) {
  dlogits.assign(logits.size(), 0.0);
  const double inv_n = 1.0 / fwd.n_masked;
  const double rms_scale = fwd.rms > 0.0 ? (1.0 - alpha) / (2.0 * fwd.rms) : 0.0;

  for (int t = 0; t < T; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    const double* row = &logits[static_cast<std::size_t>(t) * vocab];
    double* drow = &dlogits[static_cast<std::size_t>(t) * vocab];
    const int y = targets[static_cast<std::size_t>(t)];

    double mx = row[0];
    for (int k = 1; k < vocab; ++k) mx = std::max(mx, row[k]);
    double denom = 0.0;
    for (int k = 0; k < vocab; ++k) denom += std::exp(row[k] - mx);

    double psd_denom = 0.0;
    double psd_exp = 0.0;
    for (int k = vocab::psd_token_min; k <= vocab::psd_token_max; ++k) {
      const double e = std::exp(row[k] - mx);
      psd_denom += e;
      psd_exp += e * static_cast<double>(k - 119);
    }
    const double expected = psd_exp / psd_denom;
    const double resid = expected - static_cast<double>(y - 119);

    // CE part: alpha/n * (softmax - onehot)
    for (int k = 0; k < vocab; ++k)
      drow[k] += alpha * inv_n * (std::exp(row[k] - mx) / denom);
    drow[y] -= alpha * inv_n;

    // RMS part: d(rms)/d(logit_k) = resid/n/rms * ptilde_k*(value_k-expected)
    if (rms_scale != 0.0) {
      const double c = rms_scale * 2.0 * resid * inv_n;
      for (int k = vocab::psd_token_min; k <= vocab::psd_token_max; ++k) {
        const double ptilde = std::exp(row[k] - mx) / psd_denom;
        drow[k] += c * ptilde * (static_cast<double>(k - 119) - expected);
      }
    }
  }
}

// Next-token targets/mask for a 292-token sequence with n_in observed PSD
// values: row p predicts token p+1 and only the forecast PSD tokens are
// scored.
inline void forecast_targets(const TokenSequence& seq, int n_in,
                             std::vector<int>& tokens, std::vector<int>& targets,
                             std::vector<char>& mask) {
  tokens.resize(kSeqLen);
  for (int i = 0; i < kSeqLen; ++i) tokens[static_cast<std::size_t>(i)] = seq.t[static_cast<std::size_t>(i)];
  targets.assign(kSeqLen, 0);
  mask.assign(kSeqLen, 0);
  const auto [lo, hi] = forecast_logit_span(n_in);
  for (int t = lo; t < hi; ++t) {
    targets[static_cast<std::size_t>(t)] = tokens[static_cast<std::size_t>(t + 1)];
    mask[static_cast<std::size_t>(t)] = 1;
  }
}

}  // namespace lsm
