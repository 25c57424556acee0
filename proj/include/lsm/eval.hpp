#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsm/common.hpp"
#include "lsm/model.hpp"
#include "lsm/tokenizer.hpp"
#include "lsm/train.hpp"

// Autoregressive PSD forecasting and the evaluation metrics: pooled per-band
// RMSE (dB), per-sequence MAE with the 5 dB threshold, and Cohen's weighted
// kappa with |delta dB| weights. A persistence baseline (repeat the last
// observed value) is evaluated alongside the model in every report.

namespace lsm {

// Greedy argmax decoding restricted to PSD tokens [1,101]; each prediction
// feeds back as input. Deterministic. The prefix is the 35-token header
// (ending in tag 126) plus n_in observed PSD tokens.
inline std::vector<Token> predict_sequence(const Model& m,
                                           const std::vector<Token>& prefix,
                                           int n_in, int n_out) {
  if (static_cast<int>(prefix.size()) != kHeaderLen + n_in)
    throw format_error("predict_sequence: prefix must be header + " +
                       std::to_string(n_in) + " observed tokens");
  // every fixed tag position of the 35-token header
  static constexpr std::pair<int, Token> kTags[] = {
      {0, vocab::pad},          {1, vocab::meta_begin},  {2, vocab::gain_begin},
      {4, vocab::gain_end},     {5, vocab::freq_begin},  {7, vocab::freq_end},
      {8, vocab::bin_begin},    {11, vocab::bin_end},    {12, vocab::dow_begin},
      {14, vocab::dow_end},     {15, vocab::day_begin},  {17, vocab::day_end},
      {18, vocab::month_begin}, {20, vocab::month_end},  {21, vocab::year_begin},
      {23, vocab::year_end},    {24, vocab::hour_begin}, {26, vocab::hour_end},
      {27, vocab::minute_begin},{29, vocab::minute_end}, {30, vocab::second_begin},
      {32, vocab::second_end},  {33, vocab::meta_end},   {34, vocab::psd_begin}};
  for (const auto& [pos, tag] : kTags)
    if (prefix[static_cast<std::size_t>(pos)] != tag)
      throw format_error("predict_sequence: malformed header framing",
                         static_cast<std::size_t>(pos));
  for (int i = kHeaderLen; i < kHeaderLen + n_in; ++i)
    if (prefix[static_cast<std::size_t>(i)] < vocab::psd_token_min ||
        prefix[static_cast<std::size_t>(i)] > vocab::psd_token_max)
      throw format_error("predict_sequence: observed PSD token outside [1,101]",
                         static_cast<std::size_t>(i));
  require(kHeaderLen + n_in + n_out <= m.cfg.max_seq_len + 1,
          "predict_sequence: forecast exceeds model context");

  Generator gen(m);
  const std::vector<double>* logits = nullptr;
  for (Token t : prefix) logits = &gen.step(static_cast<int>(t));

  std::vector<Token> out;
  out.reserve(static_cast<std::size_t>(n_out));
  for (int i = 0; i < n_out; ++i) {
    int best = vocab::psd_token_min;
    double best_v = (*logits)[static_cast<std::size_t>(vocab::psd_token_min)];
    for (int k = vocab::psd_token_min + 1; k <= vocab::psd_token_max; ++k)
      if ((*logits)[static_cast<std::size_t>(k)] > best_v) {
        best_v = (*logits)[static_cast<std::size_t>(k)];
        best = k;
      }
    out.push_back(static_cast<Token>(best));
    if (i + 1 < n_out) logits = &gen.step(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// Pooled RMSE in dB over all predicted positions of all sequences per band.
inline std::map<std::int64_t, double> rmse_per_band(
    const std::vector<std::vector<int>>& forecasts,
    const std::vector<std::vector<int>>& targets,
    const std::vector<std::int64_t>& band_labels) {
  require(forecasts.size() == targets.size() && forecasts.size() == band_labels.size(),
          "rmse_per_band: length mismatch");
  std::map<std::int64_t, std::pair<double, std::int64_t>> acc;
  for (std::size_t i = 0; i < forecasts.size(); ++i) {
    require(forecasts[i].size() == targets[i].size(), "rmse_per_band: ragged pair");
    auto& [se, n] = acc[band_labels[i]];
    for (std::size_t j = 0; j < forecasts[i].size(); ++j) {
      const double r = static_cast<double>(forecasts[i][j] - targets[i][j]);
      se += r * r;
      ++n;
    }
  }
  std::map<std::int64_t, double> out;
  for (const auto& [band, p] : acc)
    if (p.second > 0) out[band] = std::sqrt(p.first / static_cast<double>(p.second));
  return out;
}

struct MaeStats {
  std::vector<double> per_sequence;
  double fraction_below = 0.0;
  double threshold_db = 5.0;
};

inline MaeStats mae_stats(const std::vector<std::vector<int>>& forecasts,
                          const std::vector<std::vector<int>>& targets,
                          double threshold_db = 5.0) {
  require(forecasts.size() == targets.size(), "mae_stats: length mismatch");
  MaeStats out;
  out.threshold_db = threshold_db;
  std::size_t below = 0;
  for (std::size_t i = 0; i < forecasts.size(); ++i) {
    require(forecasts[i].size() == targets[i].size() && !forecasts[i].empty(),
            "mae_stats: ragged pair");
    double s = 0.0;
    for (std::size_t j = 0; j < forecasts[i].size(); ++j)
      s += std::abs(static_cast<double>(forecasts[i][j] - targets[i][j]));
    const double mae = s / static_cast<double>(forecasts[i].size());
    out.per_sequence.push_back(mae);
    if (mae < threshold_db) ++below;
  }
  if (!out.per_sequence.empty())
    out.fraction_below = static_cast<double>(below) / static_cast<double>(out.per_sequence.size());
  return out;
}

// Cohen's weighted kappa on a normalized confusion matrix O (rows =
// predicted class, columns = true class): kappa = 1 - sum(w*O)/sum(w*E)
// with linear weights w_ij = |i-j|/(classes-1) and E the outer product of
// the marginals. Any positive scaling of w cancels in the ratio.
inline double weighted_kappa_from_confusion(const std::vector<double>& O, int classes) {
  require(classes >= 2, "weighted_kappa: need >= 2 classes");
  require(O.size() == static_cast<std::size_t>(classes) * classes,
          "weighted_kappa: bad matrix size");
  double total = 0.0;
  for (double v : O) total += v;
  require(total > 0.0, "weighted_kappa: empty confusion matrix");

  std::vector<double> row(static_cast<std::size_t>(classes), 0.0);
  std::vector<double> col(static_cast<std::size_t>(classes), 0.0);
  double wo = 0.0;
  for (int i = 0; i < classes; ++i)
    for (int j = 0; j < classes; ++j) {
      const double o = O[static_cast<std::size_t>(i) * classes + j] / total;
      row[static_cast<std::size_t>(i)] += o;
      col[static_cast<std::size_t>(j)] += o;
      wo += o * std::abs(i - j);
    }
  double we = 0.0;
  for (int i = 0; i < classes; ++i)
    for (int j = 0; j < classes; ++j)
      we += row[static_cast<std::size_t>(i)] * col[static_cast<std::size_t>(j)] *
            std::abs(i - j);
  // both sums carry the same 1/(classes-1) weight normalization
  if (we == 0.0) {
    // single class in both marginals: diagonal matrix means perfect agreement
    if (wo == 0.0) return 1.0;
    throw spec_error("weighted_kappa: degenerate marginals with disagreement");
  }
  return 1.0 - wo / we;
}

// Token form: pred/true tokens in [1,101] mapped to classes 0..100.
inline double weighted_kappa(const std::vector<int>& pred, const std::vector<int>& truth,
                             int classes = 101) {
  require(pred.size() == truth.size() && !pred.empty(),
          "weighted_kappa: length mismatch");
  std::vector<double> O(static_cast<std::size_t>(classes) * classes, 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i] - 1, t = truth[i] - 1;
    require(p >= 0 && p < classes && t >= 0 && t < classes,
            "weighted_kappa: token outside class range");
    O[static_cast<std::size_t>(p) * classes + t] += 1.0;
  }
  return weighted_kappa_from_confusion(O, classes);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct BandReport {
  std::int64_t center_freq_hz = 0;
  double rmse_db = 0.0;
  int n_sequences = 0;
  std::int64_t n_values = 0;
};

struct ForecasterReport {
  std::vector<BandReport> bands;
  double overall_rmse_db = 0.0;
  double mae_fraction_below = 0.0;
  std::vector<std::int64_t> mae_histogram;  // 1 dB buckets [0,1), [1,2), ...
  double kappa_overall = 0.0;
  bool has_kappa_hd = false;
  double kappa_hd = 0.0;
};

struct EvalReport {
  ForecasterReport model;
  ForecasterReport baseline;  // persistence
  double mae_threshold_db = 5.0;
  int n_in = 128;
  std::uint64_t n_sequences = 0;
  std::string checkpoint;
  nlohmann::json generation = {{"decoding", "greedy_psd_restricted"}};
};

namespace detail {

inline ForecasterReport summarize(const std::vector<std::vector<int>>& fc,
                                  const std::vector<std::vector<int>>& tg,
                                  const std::vector<std::int64_t>& bands,
                                  const std::vector<char>& hd_flags,
                                  double threshold_db) {
  ForecasterReport rep;
  const auto per_band = rmse_per_band(fc, tg, bands);
  std::map<std::int64_t, std::pair<int, std::int64_t>> counts;
  for (std::size_t i = 0; i < fc.size(); ++i) {
    auto& [ns, nv] = counts[bands[i]];
    ++ns;
    nv += static_cast<std::int64_t>(fc[i].size());
  }
  for (const auto& [band, rmse] : per_band)
    rep.bands.push_back({band, rmse, counts[band].first, counts[band].second});

  double se = 0.0;
  std::int64_t n = 0;
  std::vector<int> flat_p, flat_t, hd_p, hd_t;
  for (std::size_t i = 0; i < fc.size(); ++i) {
    for (std::size_t j = 0; j < fc[i].size(); ++j) {
      const double r = static_cast<double>(fc[i][j] - tg[i][j]);
      se += r * r;
      ++n;
      flat_p.push_back(fc[i][j] + 119);
      flat_t.push_back(tg[i][j] + 119);
      if (!hd_flags.empty() && hd_flags[i]) {
        hd_p.push_back(fc[i][j] + 119);
        hd_t.push_back(tg[i][j] + 119);
      }
    }
  }
  rep.overall_rmse_db = n ? std::sqrt(se / static_cast<double>(n)) : 0.0;

  const auto mae = mae_stats(fc, tg, threshold_db);
  rep.mae_fraction_below = mae.fraction_below;
  for (double v : mae.per_sequence) {
    const std::size_t bucket = static_cast<std::size_t>(std::min(std::floor(v), 100.0));
    if (rep.mae_histogram.size() <= bucket) rep.mae_histogram.resize(bucket + 1, 0);
    ++rep.mae_histogram[bucket];
  }
  rep.kappa_overall = weighted_kappa(flat_p, flat_t);
  if (!hd_p.empty()) {
    rep.has_kappa_hd = true;
    rep.kappa_hd = weighted_kappa(hd_p, hd_t);
  }
  return rep;
}

}  // namespace detail

// Forecast every sequence of a dataset with the model and with the
// persistence baseline, then compute all metrics. Sequences hold the true
// targets; thresholds and decoding are fixed here, not calibrated later.
inline EvalReport evaluate(const Model& m, const TokenDataset& ds,
                           std::size_t max_sequences = 0,
                           double mae_threshold_db = 5.0) {
  require(ds.size() > 0, "evaluate: empty dataset");
  const std::size_t n =
      max_sequences ? std::min(ds.size(), max_sequences) : ds.size();
  const int n_out = kPsdLen - ds.n_in;

  std::vector<std::vector<int>> model_fc(n), base_fc(n), targets(n);
  std::vector<std::int64_t> bands(n);
  std::vector<char> hd(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& seq = ds.seqs[i];
    std::vector<Token> prefix(seq.t.begin(), seq.t.begin() + kHeaderLen + ds.n_in);
    const auto pred = predict_sequence(m, prefix, ds.n_in, n_out);
    auto& mf = model_fc[i];
    auto& bf = base_fc[i];
    auto& tg = targets[i];
    const Token last_obs = seq.t[static_cast<std::size_t>(kHeaderLen + ds.n_in - 1)];
    for (int j = 0; j < n_out; ++j) {
      mf.push_back(decode_psd(pred[static_cast<std::size_t>(j)]));
      bf.push_back(decode_psd(last_obs));
      tg.push_back(decode_psd(seq.t[static_cast<std::size_t>(kHeaderLen + ds.n_in + j)]));
    }
    bands[i] = ds.band_hz[i];
    hd[i] = ds.is_hd[i];
  }

  EvalReport rep;
  rep.mae_threshold_db = mae_threshold_db;
  rep.n_in = ds.n_in;
  rep.n_sequences = n;
  rep.model = detail::summarize(model_fc, targets, bands, hd, mae_threshold_db);
  rep.baseline = detail::summarize(base_fc, targets, bands, hd, mae_threshold_db);
  return rep;
}

inline bool report_has_nan(const EvalReport& rep) {
  auto bad = [](const ForecasterReport& f) {
    if (!std::isfinite(f.overall_rmse_db) || !std::isfinite(f.kappa_overall) ||
        !std::isfinite(f.mae_fraction_below))
      return true;
    for (const auto& b : f.bands)
      if (!std::isfinite(b.rmse_db)) return true;
    return false;
  };
  return bad(rep.model) || bad(rep.baseline);
}

inline nlohmann::json forecaster_to_json(const ForecasterReport& f) {
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : f.bands)
    bands.push_back({{"band_hz", b.center_freq_hz},
                     {"rmse_db", b.rmse_db},
                     {"n_sequences", b.n_sequences},
                     {"n_values", b.n_values}});
  nlohmann::json j = {{"bands", bands},
                      {"overall_rmse_db", f.overall_rmse_db},
                      {"mae_fraction_below", f.mae_fraction_below},
                      {"mae_histogram", f.mae_histogram},
                      {"kappa_overall", f.kappa_overall}};
  if (f.has_kappa_hd) j["kappa_hd"] = f.kappa_hd;
  return j;
}

inline ForecasterReport forecaster_from_json(const nlohmann::json& j) {
  ForecasterReport f;
  for (const auto& b : j.at("bands"))
    f.bands.push_back({b.at("band_hz").get<std::int64_t>(),
                       b.at("rmse_db").get<double>(),
                       b.at("n_sequences").get<int>(),
                       b.at("n_values").get<std::int64_t>()});
  f.overall_rmse_db = j.at("overall_rmse_db").get<double>();
  f.mae_fraction_below = j.at("mae_fraction_below").get<double>();
  f.mae_histogram = j.at("mae_histogram").get<std::vector<std::int64_t>>();
  f.kappa_overall = j.at("kappa_overall").get<double>();
  if (j.contains("kappa_hd")) {
    f.has_kappa_hd = true;
    f.kappa_hd = j.at("kappa_hd").get<double>();
  }
  return f;
}

inline nlohmann::json report_to_json(const EvalReport& rep) {
  return {{"format", "lsm-eval-report-v1"},
          {"model", forecaster_to_json(rep.model)},
          {"baseline_persistence", forecaster_to_json(rep.baseline)},
          {"mae_threshold_db", rep.mae_threshold_db},
          {"n_in", rep.n_in},
          {"n_sequences", rep.n_sequences},
          {"checkpoint", rep.checkpoint},
          {"generation", rep.generation},
          {"rmse_pooling", "per_band_pooled_residuals"}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport rep;
  rep.model = forecaster_from_json(j.at("model"));
  rep.baseline = forecaster_from_json(j.at("baseline_persistence"));
  rep.mae_threshold_db = j.at("mae_threshold_db").get<double>();
  rep.n_in = j.at("n_in").get<int>();
  rep.n_sequences = j.at("n_sequences").get<std::uint64_t>();
  rep.checkpoint = j.value("checkpoint", std::string());
  if (j.contains("generation")) rep.generation = j.at("generation");
  return rep;
}

// CSV exports with documented, stable columns.
inline std::string rmse_csv(const EvalReport& rep) {
  std::string s = "band_hz,rmse_db,baseline_rmse_db,n_sequences,n_values\n";
  for (std::size_t i = 0; i < rep.model.bands.size(); ++i) {
    const auto& b = rep.model.bands[i];
    double base = 0.0;
    for (const auto& bb : rep.baseline.bands)
      if (bb.center_freq_hz == b.center_freq_hz) base = bb.rmse_db;
    char line[160];
    std::snprintf(line, sizeof line, "%lld,%.6f,%.6f,%d,%lld\n",
                  static_cast<long long>(b.center_freq_hz), b.rmse_db, base,
                  b.n_sequences, static_cast<long long>(b.n_values));
    s += line;
  }
  return s;
}

inline std::string mae_hist_csv(const EvalReport& rep) {
  std::string s = "mae_bucket_db,model_count,baseline_count\n";
  const std::size_t n =
      std::max(rep.model.mae_histogram.size(), rep.baseline.mae_histogram.size());
  for (std::size_t i = 0; i < n; ++i) {
    const std::int64_t mc = i < rep.model.mae_histogram.size() ? rep.model.mae_histogram[i] : 0;
    const std::int64_t bc =
        i < rep.baseline.mae_histogram.size() ? rep.baseline.mae_histogram[i] : 0;
    char line[96];
    std::snprintf(line, sizeof line, "%zu,%lld,%lld\n", i, static_cast<long long>(mc),
                  static_cast<long long>(bc));
    s += line;
  }
  return s;
}

inline std::string kappa_csv(const EvalReport& rep) {
  std::string s = "scope,model_kappa,baseline_kappa\n";
  char line[128];
  std::snprintf(line, sizeof line, "overall,%.6f,%.6f\n", rep.model.kappa_overall,
                rep.baseline.kappa_overall);
  s += line;
  if (rep.model.has_kappa_hd) {
    std::snprintf(line, sizeof line, "hd,%.6f,%.6f\n", rep.model.kappa_hd,
                  rep.baseline.kappa_hd);
    s += line;
  }
  return s;
}

inline std::string sd_mad_csv(const std::vector<BandStats>& stats) {
  std::string s = "band_hz,sd_db,mad_db,count,hd\n";
  for (const auto& b : stats) {
    char line[128];
    std::snprintf(line, sizeof line, "%lld,%.6f,%.6f,%lld,%d\n",
                  static_cast<long long>(b.center_freq_hz), b.sd, b.mad,
                  static_cast<long long>(b.count), b.hd ? 1 : 0);
    s += line;
  }
  return s;
}

}  // namespace lsm
