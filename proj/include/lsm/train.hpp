#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsm/backprop.hpp"
#include "lsm/checkpoint.hpp"
#include "lsm/loss.hpp"
#include "lsm/model.hpp"
#include "lsm/rng.hpp"
#include "lsm/tokenizer.hpp"

// Per-band dispersion statistics, HD-band detection, chronological
// splitting, and the Adam training loop with per-sequence alpha routing.

namespace lsm {

// ---------------------------------------------------------------------------
// Band statistics
// ---------------------------------------------------------------------------

struct BandStats {
  std::int64_t center_freq_hz = 0;
  std::int64_t count = 0;
  double sd = 0.0;   // population standard deviation, dB
  double mad = 0.0;  // mean absolute deviation about the mean, dB
  bool hd = false;
};

// Exact statistics from per-band histograms of the 101 integer PSD levels.
class BandStatsAccumulator {
 public:
  explicit BandStatsAccumulator(const BandPlan& plan) : plan_(plan) {
    hist_.assign(plan.size(), std::array<std::int64_t, 101>{});
  }

  void add(int band_index, int psd_dbm) {
    const int level = std::clamp(psd_dbm, vocab::psd_min_dbm, vocab::psd_max_dbm) -
                      vocab::psd_min_dbm;
    ++hist_[static_cast<std::size_t>(band_index)][static_cast<std::size_t>(level)];
  }

  void add_sequence(const DecodedSequence& dec) {
    const int idx = plan_.index_of(dec.meta.center_freq_hz);
    require(idx >= 0, "band stats: frequency not in plan");
    for (int v : dec.psd_dbm) add(idx, v);
  }

  // Bands with no samples are excluded (with a warning flag for the caller).
  std::vector<BandStats> finish(std::vector<std::int64_t>* empty_bands = nullptr) const {
    std::vector<BandStats> out;
    for (std::size_t b = 0; b < plan_.size(); ++b) {
      std::int64_t n = 0;
      double sum = 0.0;
      for (int lv = 0; lv < 101; ++lv) {
        const auto c = hist_[b][static_cast<std::size_t>(lv)];
        n += c;
        sum += static_cast<double>(c) * (lv + vocab::psd_min_dbm);
      }
      if (n == 0) {
        if (empty_bands) empty_bands->push_back(plan_.freqs_hz[b]);
        continue;
      }
      const double mean = sum / static_cast<double>(n);
      double ss = 0.0, sa = 0.0;
      for (int lv = 0; lv < 101; ++lv) {
        const auto c = hist_[b][static_cast<std::size_t>(lv)];
        if (!c) continue;
        const double dv = (lv + vocab::psd_min_dbm) - mean;
        ss += static_cast<double>(c) * dv * dv;
        sa += static_cast<double>(c) * std::abs(dv);
      }
      BandStats st;
      st.center_freq_hz = plan_.freqs_hz[b];
      st.count = n;
      st.sd = std::sqrt(ss / static_cast<double>(n));
      st.mad = sa / static_cast<double>(n);
      out.push_back(st);
    }
    return out;
  }

 private:
  BandPlan plan_;
  std::vector<std::array<std::int64_t, 101>> hist_;
};

inline std::vector<BandStats> compute_band_stats(
    const std::vector<TokenSequence>& seqs, const BandPlan& plan,
    std::vector<std::int64_t>* empty_bands = nullptr) {
  BandStatsAccumulator acc(plan);
  for (const auto& s : seqs) acc.add_sequence(decode_sequence(s, plan));
  return acc.finish(empty_bands);
}

inline double median_of(std::vector<double> v) {
  require(!v.empty(), "median of empty vector");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Flag a band as highly dispersed when its SD exceeds
// median(SD) + 3 * median(|SD - median(SD)|) across bands, or the same rule
// trips on the MAD values. Scale-aware: multiplying every PSD by a constant
// leaves the flags unchanged.
inline void detect_hd(std::vector<BandStats>& stats) {
  require(stats.size() >= 3, "detect_hd: need at least 3 bands");
  auto threshold = [](const std::vector<double>& xs) {
    const double med = median_of(xs);
    std::vector<double> dev(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) dev[i] = std::abs(xs[i] - med);
    return med + 3.0 * median_of(dev);
  };
  std::vector<double> sds, mads;
  for (const auto& s : stats) {
    sds.push_back(s.sd);
    mads.push_back(s.mad);
  }
  const double sd_thr = threshold(sds);
  const double mad_thr = threshold(mads);
  for (auto& s : stats) s.hd = s.sd > sd_thr || s.mad > mad_thr;
}

inline nlohmann::json band_stats_to_json(const std::vector<BandStats>& stats) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& s : stats)
    arr.push_back({{"center_freq_hz", s.center_freq_hz},
                   {"count", s.count},
                   {"sd_db", s.sd},
                   {"mad_db", s.mad},
                   {"hd", s.hd}});
  return {{"format", "lsm-band-stats-v1"}, {"bands", arr}};
}

inline std::vector<BandStats> band_stats_from_json(const nlohmann::json& j) {
  std::vector<BandStats> out;
  for (const auto& b : j.at("bands")) {
    BandStats s;
    s.center_freq_hz = b.at("center_freq_hz").get<std::int64_t>();
    s.count = b.at("count").get<std::int64_t>();
    s.sd = b.at("sd_db").get<double>();
    s.mad = b.at("mad_db").get<double>();
    s.hd = b.at("hd").get<bool>();
    out.push_back(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Chronological split
// ---------------------------------------------------------------------------

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Stable sort by timestamp (ties keep original order), then contiguous
// prefix/middle/suffix assignment. Boundary sizes use cumulative floors,
// nudged so every partition is nonempty.
inline SplitIndices chronological_split(const std::vector<std::int64_t>& timestamps,
                                        double f_train, double f_val, double f_test) {
  const std::size_t n = timestamps.size();
  require(f_train > 0 && f_val > 0 && f_test > 0,
          "chronological_split: fractions must be positive");
  require(std::abs(f_train + f_val + f_test - 1.0) < 1e-9,
          "chronological_split: fractions must sum to 1");
  if (n < 3)
    throw spec_error("chronological_split: fewer sequences than partitions");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return timestamps[a] < timestamps[b];
  });

  std::size_t b1 = static_cast<std::size_t>(std::floor(f_train * static_cast<double>(n)));
  std::size_t b2 = static_cast<std::size_t>(std::floor((f_train + f_val) * static_cast<double>(n)));
  b1 = std::min(b1, n - 2);
  b2 = std::min(std::max(b2, b1 + 1), n - 1);
  if (b1 == 0) {
    b1 = 1;
    b2 = std::max(b2, static_cast<std::size_t>(2));
  }

  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(b1));
  out.val.assign(order.begin() + static_cast<std::ptrdiff_t>(b1),
                 order.begin() + static_cast<std::ptrdiff_t>(b2));
  out.test.assign(order.begin() + static_cast<std::ptrdiff_t>(b2), order.end());
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainPlan {
  double alpha_hd = 0.1;
  double alpha_regular = 1.0;
  double lr = 3e-4;
  std::string lr_schedule = "cosine";  // or "constant"
  double lr_min_factor = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int batch_size = 8;
  int steps = 400;
  int val_every = 50;
  int val_max_sequences = 64;
  std::uint64_t seed = 0;
  double f_train = 0.8, f_val = 0.1, f_test = 0.1;

  void validate() const {
    require(alpha_hd >= 0.0 && alpha_hd <= 1.0, "plan: alpha_hd outside [0,1]");
    require(alpha_regular >= 0.0 && alpha_regular <= 1.0, "plan: alpha_regular outside [0,1]");
    require(lr >= 0.0, "plan: negative lr");
    require(batch_size > 0, "plan: batch_size must be positive");
    require(steps >= 0, "plan: negative steps");
    require(std::abs(f_train + f_val + f_test - 1.0) < 1e-9,
            "plan: split fractions must sum to 1");
  }
};

inline nlohmann::json train_plan_to_json(const TrainPlan& p) {
  return {{"alpha_hd", p.alpha_hd},
          {"alpha_regular", p.alpha_regular},
          {"lr", p.lr},
          {"lr_schedule", p.lr_schedule},
          {"lr_min_factor", p.lr_min_factor},
          {"beta1", p.beta1},
          {"beta2", p.beta2},
          {"adam_eps", p.adam_eps},
          {"clip_norm", p.clip_norm},
          {"batch_size", p.batch_size},
          {"steps", p.steps},
          {"val_every", p.val_every},
          {"val_max_sequences", p.val_max_sequences},
          {"seed", p.seed},
          {"split_fractions", {p.f_train, p.f_val, p.f_test}}};
}

inline TrainPlan train_plan_from_json(const nlohmann::json& j) {
  TrainPlan p;
  p.alpha_hd = j.value("alpha_hd", 0.1);
  p.alpha_regular = j.value("alpha_regular", 1.0);
  p.lr = j.value("lr", 3e-4);
  p.lr_schedule = j.value("lr_schedule", std::string("cosine"));
  p.lr_min_factor = j.value("lr_min_factor", 0.1);
  p.beta1 = j.value("beta1", 0.9);
  p.beta2 = j.value("beta2", 0.999);
  p.adam_eps = j.value("adam_eps", 1e-8);
  p.clip_norm = j.value("clip_norm", 1.0);
  p.batch_size = j.value("batch_size", 8);
  p.steps = j.value("steps", 400);
  p.val_every = j.value("val_every", 50);
  p.val_max_sequences = j.value("val_max_sequences", 64);
  p.seed = j.value("seed", std::uint64_t{0});
  if (j.contains("split_fractions")) {
    const auto& f = j.at("split_fractions");
    p.f_train = f.at(0).get<double>();
    p.f_val = f.at(1).get<double>();
    p.f_test = f.at(2).get<double>();
  }
  p.validate();
  return p;
}

// Token sequences plus the per-sequence routing facts the trainer needs.
struct TokenDataset {
  std::vector<TokenSequence> seqs;
  std::vector<std::int64_t> timestamps;
  std::vector<std::int64_t> band_hz;
  std::vector<char> is_hd;
  BandPlan plan;
  int n_in = 128;

  std::size_t size() const { return seqs.size(); }
};

// Decode headers once; HD flags come from the stats (empty = all regular).
inline TokenDataset make_dataset(std::vector<TokenSequence> seqs, const BandPlan& plan,
                                 int n_in, const std::vector<BandStats>& stats = {}) {
  TokenDataset ds;
  ds.plan = plan;
  ds.n_in = n_in;
  ds.seqs = std::move(seqs);
  ds.timestamps.reserve(ds.seqs.size());
  ds.band_hz.reserve(ds.seqs.size());
  ds.is_hd.reserve(ds.seqs.size());
  for (const auto& s : ds.seqs) {
    const auto dec = decode_sequence(s, plan);
    ds.timestamps.push_back(dec.meta.timestamp_utc);
    ds.band_hz.push_back(dec.meta.center_freq_hz);
    bool hd = false;
    for (const auto& st : stats)
      if (st.center_freq_hz == dec.meta.center_freq_hz) {
        hd = st.hd;
        break;
      }
    ds.is_hd.push_back(hd ? 1 : 0);
  }
  return ds;
}

class AdamOptimizer {
 public:
  AdamOptimizer(const Model& m, const TrainPlan& plan) : plan_(plan) {
    state_.m.resize(m.params.size());
    state_.v.resize(m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      state_.m[i].assign(m.params[i].w.size(), 0.0);
      state_.v[i].assign(m.params[i].w.size(), 0.0);
    }
  }

  void load_state(OptimizerState st) { state_ = std::move(st); }
  const OptimizerState& state() const { return state_; }

  // Returns the global gradient norm before clipping.
  double step(Model& m, GradSet& grads, double lr) {
    double sq = 0.0;
    for (const auto& g : grads)
      for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    double scale = 1.0;
    if (plan_.clip_norm > 0.0 && norm > plan_.clip_norm)
      scale = plan_.clip_norm / norm;

    ++state_.step;
    const double b1 = plan_.beta1, b2 = plan_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state_.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state_.step));
    for (std::size_t p = 0; p < grads.size(); ++p) {
      auto& mw = state_.m[p];
      auto& vw = state_.v[p];
      auto& w = m.params[p].w;
      const auto& g = grads[p];
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = g[i] * scale;
        mw[i] = b1 * mw[i] + (1.0 - b1) * gi;
        vw[i] = b2 * vw[i] + (1.0 - b2) * gi * gi;
        const double mhat = mw[i] / bc1;
        const double vhat = vw[i] / bc2;
        w[i] = static_cast<float>(static_cast<double>(w[i]) -
                                  lr * mhat / (std::sqrt(vhat) + plan_.adam_eps));
      }
    }
    return norm;
  }

 private:
  TrainPlan plan_;
  OptimizerState state_;
};

inline double scheduled_lr(const TrainPlan& plan, int step) {
  if (plan.lr_schedule == "constant" || plan.steps <= 1) return plan.lr;
  const double t = static_cast<double>(step) / static_cast<double>(plan.steps);
  const double cos01 = 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
  return plan.lr * (plan.lr_min_factor + (1.0 - plan.lr_min_factor) * cos01);
}

struct StepLog {
  int step = 0;
  double lr = 0.0;
  double loss = 0.0, ce = 0.0, rms = 0.0;
  double grad_norm = 0.0;
  std::vector<double> alphas;              // one per batch sequence
  std::vector<std::int64_t> bands;         // one per batch sequence
  bool has_val = false;
  double val_loss = 0.0;
};

struct TrainResult {
  std::uint64_t steps_done = 0;
  double best_val = 0.0;
  std::uint64_t best_val_step = 0;
  std::vector<double> loss_history;
  std::vector<float> best_params_flat;  // snapshot at the best validation
};

// Masked hybrid loss over up to max_sequences of a dataset, eval mode.
inline double dataset_loss(const Model& m, const TokenDataset& ds,
                           const TrainPlan& plan, int max_sequences) {
  require(ds.size() > 0, "dataset_loss: empty dataset");
  const std::size_t n = std::min<std::size_t>(ds.size(),
                                              static_cast<std::size_t>(max_sequences));
  ForwardCache fc;
  std::vector<int> tokens, targets;
  std::vector<char> mask;
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    forecast_targets(ds.seqs[i], ds.n_in, tokens, targets, mask);
    forward(m, tokens, false, fc);
    const double alpha = ds.is_hd[i] ? plan.alpha_hd : plan.alpha_regular;
    total += hybrid_loss(fc.logits, targets, mask, fc.T, m.cfg.vocab_size, alpha).total;
  }
  return total / static_cast<double>(n);
}

// Deterministic single-writer training loop: epoch-shuffled batches, Adam
// with cosine decay and global-norm clipping, per-sequence alpha routed by
// the band's HD flag, periodic validation with best-val snapshotting.
// NaN loss aborts.
inline TrainResult train_model(Model& m, const TokenDataset& train_set,
                               const TokenDataset* val_set, const TrainPlan& plan,
                               AdamOptimizer& opt,
                               const std::function<void(const StepLog&)>& log_cb = {}) {
  plan.validate();
  require(train_set.size() > 0, "train: empty training set");
  require(m.cfg.max_seq_len >= kSeqLen, "train: model context shorter than 292");

  Rng order_rng(derive_seed(plan.seed, 0x0BDE7));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();  // forces initial shuffle

  GradSet grads = make_grads(m);
  ForwardCache fc;
  std::vector<int> tokens, targets;
  std::vector<char> mask;
  std::vector<double> dlogits, dacc;

  TrainResult res;
  res.best_val = std::numeric_limits<double>::infinity();

  auto snapshot = [&]() {
    res.best_params_flat.clear();
    for (const auto& t : m.params)
      res.best_params_flat.insert(res.best_params_flat.end(), t.w.begin(), t.w.end());
  };

  for (int step = 0; step < plan.steps; ++step) {
    zero_grads(grads);
    StepLog lg;
    lg.step = step;
    lg.lr = scheduled_lr(plan, step);

    double loss = 0.0, ce = 0.0, rms = 0.0;
    for (int b = 0; b < plan.batch_size; ++b) {
      if (cursor >= order.size()) {
        // Fisher-Yates reshuffle per epoch
        for (std::size_t i = order.size() - 1; i > 0; --i)
          std::swap(order[i], order[static_cast<std::size_t>(order_rng.below(i + 1))]);
        cursor = 0;
      }
      const std::size_t idx = order[cursor++];
      const double alpha =
          train_set.is_hd[idx] ? plan.alpha_hd : plan.alpha_regular;
      lg.alphas.push_back(alpha);
      lg.bands.push_back(train_set.band_hz[idx]);

      forecast_targets(train_set.seqs[idx], train_set.n_in, tokens, targets, mask);
      const std::uint64_t drop_seed =
          derive_seed(plan.seed, (static_cast<std::uint64_t>(step) << 20) ^
                                     (static_cast<std::uint64_t>(b) << 4) ^ idx);
      forward(m, tokens, true, fc, drop_seed);
      const LossTerms lt =
          hybrid_loss(fc.logits, targets, mask, fc.T, m.cfg.vocab_size, alpha);
      if (!std::isfinite(lt.total))
        throw error("train: non-finite loss at step " + std::to_string(step) +
                    " (ce=" + std::to_string(lt.ce) + ", rms=" + std::to_string(lt.rms) + ")");
      loss += lt.total;
      ce += lt.ce;
      rms += lt.rms;

      hybrid_loss_backward(fc.logits, targets, mask, fc.T, m.cfg.vocab_size, alpha,
                           lt, dlogits);
      const double inv_b = 1.0 / plan.batch_size;
      for (auto& v : dlogits) v *= inv_b;
      backward(m, fc, dlogits, grads);
    }

    lg.loss = loss / plan.batch_size;
    lg.ce = ce / plan.batch_size;
    lg.rms = rms / plan.batch_size;
    lg.grad_norm = opt.step(m, grads, lg.lr);
    res.loss_history.push_back(lg.loss);
    ++res.steps_done;

    const bool last = step + 1 == plan.steps;
    if (val_set && val_set->size() > 0 && plan.val_every > 0 &&
        ((step + 1) % plan.val_every == 0 || last)) {
      lg.has_val = true;
      lg.val_loss = dataset_loss(m, *val_set, plan, plan.val_max_sequences);
      if (lg.val_loss < res.best_val) {
        res.best_val = lg.val_loss;
        res.best_val_step = static_cast<std::uint64_t>(step + 1);
        snapshot();
      }
    }
    if (log_cb) log_cb(lg);
  }

  if (res.best_params_flat.empty()) snapshot();  // no validation: keep final
  return res;
}

inline void restore_params(Model& m, const std::vector<float>& flat) {
  std::size_t off = 0;
  for (auto& t : m.params) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + t.w.size()),
              t.w.begin());
    off += t.w.size();
  }
  require(off == flat.size(), "restore_params: size mismatch");
}

}  // namespace lsm
