#include <doctest.h>

#include <cmath>

#include "lsm/backprop.hpp"
#include "lsm/loss.hpp"
#include "lsm/model.hpp"

using namespace lsm;

namespace {

// Independent scalar computation of the hybrid loss on explicit logits,
// written with plain loops and no shared helpers.
double hand_hybrid_loss(const std::vector<double>& logits,
                        const std::vector<int>& targets,
                        const std::vector<char>& mask, int T, int vocab,
                        double alpha) {
  double ce = 0.0, se = 0.0;
  int n = 0;
  for (int t = 0; t < T; ++t) {
    if (!mask[static_cast<std::size_t>(t)]) continue;
    double denom = 0.0;
    for (int k = 0; k < vocab; ++k) denom += std::exp(logits[static_cast<std::size_t>(t) * vocab + k]);
    const double p_target =
        std::exp(logits[static_cast<std::size_t>(t) * vocab + targets[static_cast<std::size_t>(t)]]) / denom;
    ce += -std::log(p_target);

    double pd = 0.0, ev = 0.0;
    for (int k = 1; k <= 101; ++k) {
      const double e = std::exp(logits[static_cast<std::size_t>(t) * vocab + k]);
      pd += e;
      ev += e * (k - 119);
    }
    const double expected = ev / pd;
    const double target_value = targets[static_cast<std::size_t>(t)] - 119;
    se += (expected - target_value) * (expected - target_value);
    ++n;
  }
  return alpha * (ce / n) + (1.0 - alpha) * std::sqrt(se / n);
}

struct ToyCase {
  std::vector<double> logits;
  std::vector<int> targets;
  std::vector<char> mask;
  int T = 2, vocab = 128;
};

ToyCase make_toy() {
  ToyCase tc;
  tc.logits.assign(2 * 128, 0.0);
  Rng rng(404);
  for (auto& v : tc.logits) v = 0.5 * rng.gaussian();
  tc.logits[0 * 128 + 30] = 3.0;  // sharpen the distributions a little
  tc.logits[1 * 128 + 60] = 2.0;
  tc.targets = {31, 60};
  tc.mask = {1, 1};
  return tc;
}

// Valid 292-token sequence with pseudo-random PSD body.
TokenSequence synthetic_sequence(std::uint64_t seed) {
  Rng rng(seed);
  BandPlan plan({100'000'000, 200'000'000, 300'000'000});
  ForecastPair p;
  p.bin_index = static_cast<int>(rng.below(256));
  p.meta.gain_db = 25;
  p.meta.center_freq_hz = 200'000'000;
  p.meta.timestamp_utc = parse_iso8601("2023-06-20T08:00:00Z");
  for (int i = 0; i < 128; ++i)
    p.input.push_back(-100.0 + static_cast<double>(rng.below(40)));
  for (int i = 0; i < 128; ++i)
    p.target.push_back(-100.0 + static_cast<double>(rng.below(40)));
  return encode_sequence(p, plan);
}

double loss_of(const Model& m, const std::vector<int>& tokens,
               const std::vector<int>& targets, const std::vector<char>& mask,
               double alpha) {
  ForwardCache fc;
  forward(m, tokens, true, fc);  // train path, dropout 0 in these configs
  return hybrid_loss(fc.logits, targets, mask, fc.T, m.cfg.vocab_size, alpha).total;
}

// Central finite difference using the realized f32 steps. RoPE frequencies
// get a much smaller step: positions up to ~290 multiply the perturbation in
// angle space, so a 1e-3 step would leave the linear regime.
double fd_gradient(Model& m, int tensor, std::size_t idx,
                   const std::vector<int>& tokens, const std::vector<int>& targets,
                   const std::vector<char>& mask, double alpha) {
  float& slot = m.params[static_cast<std::size_t>(tensor)].w[idx];
  const float orig = slot;
  const bool is_rope = m.params[static_cast<std::size_t>(tensor)].name == "rope.freq";
  const double h =
      is_rope ? 1e-6 : std::max(1e-4, 1e-3 * std::abs(static_cast<double>(orig)));
  const float hi = static_cast<float>(static_cast<double>(orig) + h);
  const float lo = static_cast<float>(static_cast<double>(orig) - h);
  slot = hi;
  const double fhi = loss_of(m, tokens, targets, mask, alpha);
  slot = lo;
  const double flo = loss_of(m, tokens, targets, mask, alpha);
  slot = orig;
  return (fhi - flo) / (static_cast<double>(hi) - static_cast<double>(lo));
}

void check_gradients(const LsmConfig& cfg, std::uint64_t seed, int n_coords,
                     double alpha, double tol) {
  auto m = build_model(cfg, seed);
  const auto seq = synthetic_sequence(seed + 1);
  std::vector<int> tokens, targets;
  std::vector<char> mask;
  forecast_targets(seq, 128, tokens, targets, mask);

  ForwardCache fc;
  forward(m, tokens, true, fc);
  const auto lt = hybrid_loss(fc.logits, targets, mask, fc.T, cfg.vocab_size, alpha);
  std::vector<double> dlogits;
  hybrid_loss_backward(fc.logits, targets, mask, fc.T, cfg.vocab_size, alpha, lt, dlogits);
  GradSet grads = make_grads(m);
  backward(m, fc, dlogits, grads);

  Rng rng(seed + 2);
  double worst = 0.0;
  for (int c = 0; c < n_coords; ++c) {
    const int tensor = static_cast<int>(rng.below(m.params.size()));
    const std::size_t idx = rng.below(m.params[static_cast<std::size_t>(tensor)].w.size());
    const double analytic = grads[static_cast<std::size_t>(tensor)][idx];
    const double fd = fd_gradient(m, tensor, idx, tokens, targets, mask, alpha);
    const double rel = std::abs(analytic - fd) / std::max({std::abs(fd), std::abs(analytic), 1e-8});
    worst = std::max(worst, rel);
  }
  CHECK(worst <= tol);
}

}  // namespace

TEST_CASE("hybrid loss: alpha endpoints and hand oracle") {
  const auto tc = make_toy();
  const auto full = hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, 0.1);

  // endpoints against the independent computation
  const double ce_only = hand_hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, 1.0);
  const double rms_only = hand_hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, 0.0);
  CHECK(std::abs(hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, 1.0).total -
                 ce_only) < 1e-9);
  CHECK(std::abs(hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, 0.0).total -
                 rms_only) < 1e-9);

  // the mixed value matches 0.1*CE + 0.9*RMS computed independently
  CHECK(std::abs(full.total - hand_hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T,
                                               tc.vocab, 0.1)) < 1e-9);
  CHECK(full.total == doctest::Approx(0.1 * full.ce + 0.9 * full.rms).epsilon(1e-12));

  CHECK_THROWS_AS(hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, 1.5),
                  spec_error);
  CHECK_THROWS_AS(hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, -0.1),
                  spec_error);
}

TEST_CASE("hybrid loss: affine in alpha") {
  const auto tc = make_toy();
  auto at = [&](double a) {
    return hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, a).total;
  };
  const double l0 = at(0.0), l1 = at(1.0);
  for (double a : {0.1, 0.25, 0.5, 0.9})
    CHECK(at(a) == doctest::Approx(a * l1 + (1 - a) * l0).epsilon(1e-12));
}

TEST_CASE("hybrid loss: gradient is linear in alpha") {
  const auto tc = make_toy();
  auto grad_at = [&](double a) {
    const auto lt = hybrid_loss(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, a);
    std::vector<double> d;
    hybrid_loss_backward(tc.logits, tc.targets, tc.mask, tc.T, tc.vocab, a, lt, d);
    return d;
  };
  const auto g0 = grad_at(0.0), g1 = grad_at(1.0), gm = grad_at(0.3);
  for (std::size_t i = 0; i < gm.size(); ++i)
    CHECK(std::abs(gm[i] - (0.3 * g1[i] + 0.7 * g0[i])) < 1e-6);
}

TEST_CASE("hybrid loss: empty mask rejected, zero-mask grads are zero") {
  const auto tc = make_toy();
  std::vector<char> none = {0, 0};
  CHECK_THROWS_AS(hybrid_loss(tc.logits, tc.targets, none, tc.T, tc.vocab, 0.5),
                  spec_error);

  // masking out one position zeroes its logit gradients
  std::vector<char> one = {1, 0};
  const auto lt = hybrid_loss(tc.logits, tc.targets, one, tc.T, tc.vocab, 0.5);
  std::vector<double> d;
  hybrid_loss_backward(tc.logits, tc.targets, one, tc.T, tc.vocab, 0.5, lt, d);
  for (int k = 0; k < tc.vocab; ++k) CHECK(d[static_cast<std::size_t>(128 + k)] == 0.0);
}

TEST_CASE("model gradients match finite differences (gated rms silu)") {
  auto cfg = preset_config("tiny");
  cfg.n_layers = 1;  // keep the unit check quick; acceptance runs the full preset
  for (double alpha : {0.0, 0.1, 1.0})
    check_gradients(cfg, 51, 12, alpha, 1e-3);
}

TEST_CASE("model gradients match finite differences (ungated layer gelu, learned rope)") {
  auto cfg = preset_config("tiny");
  cfg.n_layers = 1;
  cfg.norm = NormKind::layer;
  cfg.ffn_gated = false;
  cfg.activation = Activation::gelu_new;
  cfg.rope = RopeKind::learned_frequency;
  for (double alpha : {0.1, 1.0}) check_gradients(cfg, 53, 12, alpha, 1e-3);
}

TEST_CASE("rope learned-frequency gradient is exercised") {
  auto cfg = preset_config("tiny");
  cfg.n_layers = 1;
  cfg.rope = RopeKind::learned_frequency;
  auto m = build_model(cfg, 57);
  const auto seq = synthetic_sequence(58);
  std::vector<int> tokens, targets;
  std::vector<char> mask;
  forecast_targets(seq, 128, tokens, targets, mask);
  ForwardCache fc;
  forward(m, tokens, true, fc);
  const auto lt = hybrid_loss(fc.logits, targets, mask, fc.T, cfg.vocab_size, 1.0);
  std::vector<double> dlogits;
  hybrid_loss_backward(fc.logits, targets, mask, fc.T, cfg.vocab_size, 1.0, lt, dlogits);
  GradSet grads = make_grads(m);
  backward(m, fc, dlogits, grads);

  REQUIRE(m.idx_rope_freq >= 0);
  const auto& dfreq = grads[static_cast<std::size_t>(m.idx_rope_freq)];
  bool any = false;
  for (double g : dfreq) any |= g != 0.0;
  CHECK(any);

  // spot-check one frequency coordinate against finite differences
  const double analytic = dfreq[0];
  const double fd = fd_gradient(m, m.idx_rope_freq, 0, tokens, targets, mask, 1.0);
  CHECK(std::abs(analytic - fd) / std::max({std::abs(fd), std::abs(analytic), 1e-8}) < 1e-3);
}
