#include <doctest.h>

#include <filesystem>

#include "lsm/eval.hpp"
#include "lsm/train.hpp"

using namespace lsm;

namespace {

// Sequences whose 256 PSD values alternate between two levels.
TokenSequence two_level_sequence(const BandPlan& plan, std::int64_t freq, int lo,
                                 int hi, std::int64_t timestamp, int bin = 0) {
  ForecastPair p;
  p.bin_index = bin;
  p.meta.gain_db = 30;
  p.meta.center_freq_hz = freq;
  p.meta.timestamp_utc = timestamp;
  for (int i = 0; i < 128; ++i) p.input.push_back(i % 2 ? hi : lo);
  for (int i = 0; i < 128; ++i) p.target.push_back(i % 2 ? hi : lo);
  return encode_sequence(p, plan);
}

BandPlan plan33() {
  std::vector<std::int64_t> f;
  for (int i = 0; i < 33; ++i) f.push_back(54'000'000 + static_cast<std::int64_t>(i) * 29'000'000);
  return BandPlan(f);
}

}  // namespace

TEST_CASE("band stats: constant and two-level oracles") {
  BandPlan plan({100'000'000, 200'000'000, 300'000'000});
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  std::vector<TokenSequence> seqs;
  seqs.push_back(two_level_sequence(plan, 100'000'000, -90, -90, t0));  // constant
  seqs.push_back(two_level_sequence(plan, 200'000'000, -60, -50, t0 + 1));

  std::vector<std::int64_t> empty;
  const auto stats = compute_band_stats(seqs, plan, &empty);
  REQUIRE(stats.size() == 2);  // third band excluded
  CHECK(empty == std::vector<std::int64_t>{300'000'000});

  CHECK(stats[0].sd == doctest::Approx(0.0));
  CHECK(stats[0].mad == doctest::Approx(0.0));
  // values {-60,-50} equally -> SD = 5, MAD = 5 (population)
  CHECK(stats[1].sd == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(stats[1].mad == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(stats[1].count == 256);
}

TEST_CASE("detect_hd: no flags when dispersion is uniform") {
  BandPlan plan({1000, 2000, 3000, 4000});
  std::vector<BandStats> stats;
  for (auto f : plan.freqs_hz) stats.push_back({f, 100, 2.0, 1.6, false});
  detect_hd(stats);
  for (const auto& s : stats) CHECK(!s.hd);
}

TEST_CASE("detect_hd: one band at 10x dispersion is flagged") {
  std::vector<BandStats> stats;
  for (int i = 0; i < 9; ++i)
    stats.push_back({1000 + i, 100, 2.0, 1.6, false});
  stats.push_back({5000, 100, 20.0, 16.0, false});
  detect_hd(stats);
  for (int i = 0; i < 9; ++i) CHECK(!stats[static_cast<std::size_t>(i)].hd);
  CHECK(stats[9].hd);
}

TEST_CASE("detect_hd: 33-band corpus flags exactly the two 4x bands") {
  const auto plan = plan33();
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  const std::int64_t hd_a = plan.freqs_hz[20], hd_b = plan.freqs_hz[21];
  std::vector<TokenSequence> seqs;
  std::int64_t t = t0;
  for (auto f : plan.freqs_hz) {
    const bool hd = f == hd_a || f == hd_b;
    const int spread = hd ? 8 : 2;  // 4x dispersion on the HD bands
    for (int r = 0; r < 3; ++r)
      seqs.push_back(two_level_sequence(plan, f, -80 - spread, -80 + spread, t++));
  }
  auto stats = compute_band_stats(seqs, plan);
  detect_hd(stats);
  for (const auto& s : stats)
    CHECK(s.hd == (s.center_freq_hz == hd_a || s.center_freq_hz == hd_b));

  // scale awareness: the same corpus shifted keeps identical flags
  std::vector<BandStats> scaled = stats;
  for (auto& s : scaled) {
    s.sd *= 3.0;
    s.mad *= 3.0;
    s.hd = false;
  }
  detect_hd(scaled);
  for (std::size_t i = 0; i < stats.size(); ++i) CHECK(scaled[i].hd == stats[i].hd);
}

TEST_CASE("chronological split: pinned example and tie-break") {
  std::vector<std::int64_t> ts;
  for (int i = 1; i <= 10; ++i) ts.push_back(i);
  const auto s = chronological_split(ts, 0.8, 0.1, 0.1);
  CHECK(s.train.size() == 8);
  CHECK(s.val == std::vector<std::size_t>{8});
  CHECK(s.test == std::vector<std::size_t>{9});

  // equal timestamps: original order is kept
  std::vector<std::int64_t> same(10, 42);
  const auto s2 = chronological_split(same, 0.8, 0.1, 0.1);
  for (std::size_t i = 0; i < 8; ++i) CHECK(s2.train[i] == i);
  CHECK(s2.val == std::vector<std::size_t>{8});
  CHECK(s2.test == std::vector<std::size_t>{9});

  CHECK_THROWS_AS(chronological_split({1, 2}, 0.8, 0.1, 0.1), spec_error);
  CHECK_THROWS_AS(chronological_split(ts, 0.5, 0.1, 0.1), spec_error);
}

TEST_CASE("chronological split: ordering invariant on random corpora") {
  Rng rng(88);
  for (int it = 0; it < 100; ++it) {
    const std::size_t n = 3 + rng.below(60);
    std::vector<std::int64_t> ts(n);
    for (auto& t : ts) t = static_cast<std::int64_t>(rng.below(50));  // many ties
    double f1 = 0.2 + 0.6 * rng.uniform();
    double f2 = (1.0 - f1) * rng.uniform(0.2, 0.8);
    double f3 = 1.0 - f1 - f2;
    const auto s = chronological_split(ts, f1, f2, f3);
    CHECK(s.train.size() + s.val.size() + s.test.size() == n);
    CHECK(!s.train.empty());
    CHECK(!s.val.empty());
    CHECK(!s.test.empty());
    std::int64_t max_train = ts[s.train.front()];
    for (auto i : s.train) max_train = std::max(max_train, ts[i]);
    std::int64_t min_val = ts[s.val.front()], min_test = ts[s.test.front()];
    for (auto i : s.val) min_val = std::min(min_val, ts[i]);
    for (auto i : s.test) min_test = std::min(min_test, ts[i]);
    CHECK(max_train <= min_val);
    CHECK(min_val <= min_test);
  }
}

TEST_CASE("train: alpha routing follows the band partition") {
  BandPlan plan({100'000'000, 200'000'000, 300'000'000});
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  std::vector<TokenSequence> seqs;
  for (int r = 0; r < 4; ++r) {
    seqs.push_back(two_level_sequence(plan, 100'000'000, -90, -89, t0 + r));
    seqs.push_back(two_level_sequence(plan, 200'000'000, -80, -60, t0 + r));
  }
  std::vector<BandStats> stats = {{100'000'000, 1024, 0.5, 0.4, false},
                                  {200'000'000, 1024, 10.0, 8.0, true}};
  auto ds = make_dataset(seqs, plan, 128, stats);

  auto m = build_model(preset_config("tiny"), 3);
  TrainPlan tp;
  tp.steps = 3;
  tp.batch_size = 4;
  tp.seed = 9;
  AdamOptimizer opt(m, tp);
  std::vector<StepLog> logs;
  train_model(m, ds, nullptr, tp, opt, [&](const StepLog& lg) { logs.push_back(lg); });
  REQUIRE(logs.size() == 3);
  for (const auto& lg : logs) {
    REQUIRE(lg.alphas.size() == 4);
    for (std::size_t i = 0; i < lg.alphas.size(); ++i) {
      const double want = lg.bands[i] == 200'000'000 ? tp.alpha_hd : tp.alpha_regular;
      CHECK(lg.alphas[i] == want);
    }
  }
}

TEST_CASE("train: alpha=1 reproduces the pure-CE path") {
  BandPlan plan({100'000'000});
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  std::vector<TokenSequence> seqs;
  for (int r = 0; r < 6; ++r)
    seqs.push_back(two_level_sequence(plan, 100'000'000, -90, -70, t0 + r));
  auto ds = make_dataset(seqs, plan, 128);

  auto m = build_model(preset_config("tiny"), 4);
  TrainPlan tp;
  tp.steps = 2;
  tp.batch_size = 2;
  tp.alpha_regular = 1.0;
  AdamOptimizer opt(m, tp);
  std::vector<StepLog> logs;
  train_model(m, ds, nullptr, tp, opt, [&](const StepLog& lg) { logs.push_back(lg); });
  for (const auto& lg : logs) CHECK(lg.loss == doctest::Approx(lg.ce).epsilon(1e-12));
}

TEST_CASE("train: same seed twice gives byte-identical checkpoints") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "lsm_train_det";
  fs::create_directories(dir);
  BandPlan plan({100'000'000});
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  std::vector<TokenSequence> seqs;
  for (int r = 0; r < 8; ++r)
    seqs.push_back(two_level_sequence(plan, 100'000'000, -95, -75, t0 + r));
  auto ds = make_dataset(seqs, plan, 128);

  auto run = [&](const fs::path& out) {
    auto m = build_model(preset_config("tiny"), 11);
    TrainPlan tp;
    tp.steps = 5;
    tp.batch_size = 2;
    tp.seed = 77;
    AdamOptimizer opt(m, tp);
    const auto res = train_model(m, ds, &ds, tp, opt);
    CheckpointMeta meta;
    meta.step = res.steps_done;
    meta.seed = tp.seed;
    meta.loss_history = res.loss_history;
    save_checkpoint(m, out, meta, &opt.state());
  };
  run(dir / "a.ckpt");
  run(dir / "b.ckpt");
  CHECK(slurp_text(dir / "a.ckpt") == slurp_text(dir / "b.ckpt"));
}

TEST_CASE("train: smoothed loss decreases on a learnable periodic band") {
  BandPlan plan({100'000'000});
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  std::vector<TokenSequence> seqs;
  for (int r = 0; r < 16; ++r)
    seqs.push_back(two_level_sequence(plan, 100'000'000, -90, -60, t0 + r));
  auto ds = make_dataset(seqs, plan, 128);

  auto m = build_model(preset_config("tiny"), 13);
  TrainPlan tp;
  tp.steps = 60;
  tp.batch_size = 2;
  tp.lr = 3e-3;
  tp.seed = 5;
  AdamOptimizer opt(m, tp);
  const auto res = train_model(m, ds, nullptr, tp, opt);
  REQUIRE(res.loss_history.size() == 60);
  auto window_mean = [&](int lo, int hi) {
    double s = 0.0;
    for (int i = lo; i < hi; ++i) s += res.loss_history[static_cast<std::size_t>(i)];
    return s / (hi - lo);
  };
  const double w0 = window_mean(0, 15), w1 = window_mean(15, 30);
  const double w2 = window_mean(30, 45), w3 = window_mean(45, 60);
  CHECK(w1 < w0);
  CHECK(w2 < w1);
  CHECK(w3 < w2);
}

TEST_CASE("train: non-finite loss aborts with diagnostics") {
  BandPlan plan({100'000'000});
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  std::vector<TokenSequence> seqs;
  for (int r = 0; r < 4; ++r)
    seqs.push_back(two_level_sequence(plan, 100'000'000, -90, -60, t0 + r));
  auto ds = make_dataset(seqs, plan, 128);
  auto m = build_model(preset_config("tiny"), 15);
  TrainPlan tp;
  tp.steps = 10;
  tp.batch_size = 1;
  tp.lr = 1e200;  // detonates the parameters
  tp.clip_norm = 0.0;
  AdamOptimizer opt(m, tp);
  CHECK_THROWS_AS(train_model(m, ds, nullptr, tp, opt), lsm::error);
}

TEST_CASE("finetune semantics: zero steps and zero lr change nothing") {
  BandPlan plan({100'000'000});
  const std::int64_t t0 = parse_iso8601("2023-06-01T00:00:00Z");
  std::vector<TokenSequence> seqs;
  for (int r = 0; r < 4; ++r)
    seqs.push_back(two_level_sequence(plan, 100'000'000, -90, -60, t0 + r));
  auto ds = make_dataset(seqs, plan, 128);

  auto m = build_model(preset_config("tiny"), 17);
  const auto before = m.params;

  TrainPlan tp;
  tp.steps = 0;
  tp.batch_size = 2;
  AdamOptimizer opt0(m, tp);
  train_model(m, ds, nullptr, tp, opt0);
  for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(m.params[i].w == before[i].w);

  tp.steps = 4;
  tp.lr = 0.0;
  AdamOptimizer opt1(m, tp);
  train_model(m, ds, nullptr, tp, opt1);
  for (std::size_t i = 0; i < m.params.size(); ++i) CHECK(m.params[i].w == before[i].w);
}
