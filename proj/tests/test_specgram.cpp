#include <doctest.h>

#include <cmath>
#include <complex>

#include "lsm/specgram.hpp"

using namespace lsm;

namespace {

// Direct O(n^2) DFT oracle, independent of FftPlan.
std::vector<std::complex<double>> dft_oracle(const std::vector<std::complex<double>>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<std::complex<double>> out(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    std::complex<double> s{0.0, 0.0};
    for (int i = 0; i < n; ++i) {
      const double a = -2.0 * M_PI * k * i / n;
      s += x[static_cast<std::size_t>(i)] * std::complex<double>(std::cos(a), std::sin(a));
    }
    out[static_cast<std::size_t>(k)] = s;
  }
  return out;
}

double psd_db_oracle(const std::complex<double>& X, int n, double cal) {
  const double p = std::norm(X) / n;
  return 10.0 * std::log10(p + kPsdEpsilon) + cal;
}

IqRecord record_from(const std::vector<std::complex<float>>& samples, std::int64_t fs) {
  IqRecord r;
  r.site_id = "t";
  r.center_freq_hz = 100'000'000;
  r.sample_rate_hz = fs;
  r.gain_db = 10;
  r.timestamp_utc = parse_iso8601("2023-06-15T14:30:05Z");
  r.duration_s = static_cast<double>(samples.size()) / static_cast<double>(fs);
  r.samples = samples;
  return r;
}

Spectrogram make_spec(int n_s, int n_t, Rng& rng) {
  Spectrogram s;
  s.n_s = n_s;
  s.n_t = n_t;
  s.values.resize(static_cast<std::size_t>(n_s) * n_t);
  for (auto& v : s.values) v = -90.0 + 20.0 * rng.uniform();
  s.bin_bandwidth_hz = 1000.0;
  s.slice_duration_s = 0.001;
  return s;
}

}  // namespace

TEST_CASE("fft matches DFT oracle on random inputs") {
  Rng rng(2);
  for (int n : {8, 64, 256}) {
    std::vector<std::complex<double>> x(static_cast<std::size_t>(n));
    for (auto& z : x) z = {rng.gaussian(), rng.gaussian()};
    auto ref = dft_oracle(x);
    FftPlan plan(n);
    auto got = x;
    plan.forward(got.data());
    for (int k = 0; k < n; ++k)
      CHECK(std::abs(got[static_cast<std::size_t>(k)] - ref[static_cast<std::size_t>(k)]) <
            1e-9 * n);
  }
}

TEST_CASE("stft: single-frame complex exponential concentrates at its bin") {
  const int n_s = 256;
  for (int k : {0, 1, 37, 128, 255}) {
    std::vector<std::complex<float>> x(n_s);
    for (int i = 0; i < n_s; ++i) {
      const double a = 2.0 * M_PI * k * i / n_s;
      x[static_cast<std::size_t>(i)] = {static_cast<float>(std::cos(a)),
                                        static_cast<float>(std::sin(a))};
    }
    const auto rec = record_from(x, n_s);
    const auto s = stft_psd(rec, n_s, 0.0);
    CHECK(s.n_t == 1);

    // oracle: direct DFT of the same frame
    std::vector<std::complex<double>> xd(x.size());
    for (std::size_t i = 0; i < x.size(); ++i)
      xd[i] = {static_cast<double>(x[i].real()), static_cast<double>(x[i].imag())};
    const auto X = dft_oracle(xd);

    const int row = (k + n_s / 2) % n_s;
    CHECK(std::abs(s.at(row, 0) - psd_db_oracle(X[static_cast<std::size_t>(k)], n_s, 0.0)) < 1e-6);
    // every other row sits at the numeric floor region, far below the tone
    for (int u = 0; u < n_s; ++u) {
      if (u == row) continue;
      CHECK(s.at(u, 0) < s.at(row, 0) - 60.0);
    }
  }
}

TEST_CASE("stft: all-zero input hits the epsilon floor, calibration shifts it") {
  std::vector<std::complex<float>> x(512, {0.0f, 0.0f});
  const auto rec = record_from(x, 512);
  const auto s = stft_psd(rec, 256, 0.0);
  const double floor_db = 10.0 * std::log10(kPsdEpsilon);
  for (double v : s.values) CHECK(v == doctest::Approx(floor_db).epsilon(1e-12));

  const auto s2 = stft_psd(rec, 256, 7.5);
  for (double v : s2.values) CHECK(v == doctest::Approx(floor_db + 7.5).epsilon(1e-12));
}

TEST_CASE("stft: input shorter than one frame errors") {
  std::vector<std::complex<float>> x(100, {1.0f, 0.0f});
  auto rec = record_from(x, 100);
  CHECK_THROWS_AS(stft_psd(rec, 256, 0.0), spec_error);
}

TEST_CASE("stft: shape chain on a small record") {
  // 256*100 samples -> 256 x 100 -> pool 25 -> 256 x 4 -> trim to 4
  Rng rng(5);
  std::vector<std::complex<float>> x(25600);
  for (auto& z : x) z = {static_cast<float>(rng.gaussian()), static_cast<float>(rng.gaussian())};
  const auto rec = record_from(x, 25600);
  const auto s1 = stft_psd(rec, 256, 0.0);
  CHECK(s1.n_s == 256);
  CHECK(s1.n_t == 100);
  const auto s2 = maxpool_time(s1, 25, 25);
  CHECK(s2.n_t == 4);
  const auto s3 = trimmed_mean_downsample(s2, 4, 0.1);
  CHECK(s3.n_t == 4);
  CHECK(s3.slice_duration_s == doctest::Approx(rec.duration_s / 4));
}

TEST_CASE("maxpool: rows reduce independently") {
  Spectrogram s;
  s.n_s = 1;
  s.n_t = 50;
  s.values.resize(50);
  for (int i = 0; i < 50; ++i) s.values[static_cast<std::size_t>(i)] = i + 1;  // 1..50
  const auto out = maxpool_time(s, 25, 25);
  CHECK(out.n_t == 2);
  CHECK(out.at(0, 0) == 25.0);
  CHECK(out.at(0, 1) == 50.0);

  CHECK_THROWS_AS(maxpool_time(s, 0, 25), spec_error);
}

TEST_CASE("maxpool: constant rows stay constant") {
  Spectrogram s;
  s.n_s = 2;
  s.n_t = 100;
  s.values.assign(200, -77.25);
  const auto out = maxpool_time(s, 25, 25);
  CHECK(out.n_t == 4);
  for (double v : out.values) CHECK(v == -77.25);
}

TEST_CASE("maxpool output dominates the trimmed mean of its window") {
  Rng rng(17);
  auto s = make_spec(4, 125, rng);
  const auto pooled = maxpool_time(s, 25, 25);
  const auto trimmed = trimmed_mean_downsample(s, 5, 0.1);  // same 25-wide groups
  for (int u = 0; u < 4; ++u)
    for (int j = 0; j < 5; ++j) CHECK(pooled.at(u, j) >= trimmed.at(u, j));
}

TEST_CASE("trimmed mean: hand oracle on [0..11] with trim 0.1") {
  Spectrogram s;
  s.n_s = 1;
  s.n_t = 12;
  s.values.resize(12);
  for (int i = 0; i < 12; ++i) s.values[static_cast<std::size_t>(i)] = i;
  const auto out = trimmed_mean_downsample(s, 1, 0.1);
  CHECK(out.at(0, 0) == doctest::Approx(5.5).epsilon(1e-15));  // mean(1..10)
}

TEST_CASE("trimmed mean: brute-force oracle on random groups") {
  Rng rng(23);
  auto s = make_spec(3, 137, rng);
  const int out_len = 11;
  const auto out = trimmed_mean_downsample(s, out_len, 0.1);
  for (int u = 0; u < 3; ++u) {
    for (int j = 0; j < out_len; ++j) {
      const int lo = static_cast<int>(static_cast<std::int64_t>(j) * 137 / out_len);
      const int hi = static_cast<int>(static_cast<std::int64_t>(j + 1) * 137 / out_len);
      std::vector<double> g(s.values.begin() + u * 137 + lo, s.values.begin() + u * 137 + hi);
      std::sort(g.begin(), g.end());
      const int drop = static_cast<int>(std::floor(0.1 * g.size()));
      double sum = 0.0;
      for (int i = drop; i < static_cast<int>(g.size()) - drop; ++i) sum += g[static_cast<std::size_t>(i)];
      const double want = sum / (static_cast<int>(g.size()) - 2 * drop);
      CHECK(out.at(u, j) == doctest::Approx(want).epsilon(1e-15));
    }
  }
}

TEST_CASE("trimmed mean: constant rows and argument errors") {
  Spectrogram s;
  s.n_s = 1;
  s.n_t = 37;
  s.values.assign(37, -64.5);
  const auto out = trimmed_mean_downsample(s, 3, 0.1);
  for (double v : out.values) CHECK(v == -64.5);
  CHECK_THROWS_AS(trimmed_mean_downsample(s, 38, 0.1), spec_error);
  CHECK_THROWS_AS(trimmed_mean_downsample(s, 3, 0.5), spec_error);
}

TEST_CASE("trimmed mean: one boosted maximum per group leaves output unchanged") {
  Rng rng(31);
  auto s = make_spec(4, 125, rng);  // groups of size 12..13 at out_len 10
  const int out_len = 10;
  const auto base = trimmed_mean_downsample(s, out_len, 0.1);

  auto boosted = s;
  for (int u = 0; u < s.n_s; ++u) {
    for (int j = 0; j < out_len; ++j) {
      const int lo = static_cast<int>(static_cast<std::int64_t>(j) * s.n_t / out_len);
      const int hi = static_cast<int>(static_cast<std::int64_t>(j + 1) * s.n_t / out_len);
      int arg = lo;
      for (int i = lo + 1; i < hi; ++i)
        if (s.at(u, i) > s.at(u, arg)) arg = i;
      boosted.at(u, arg) += 60.0;
    }
  }
  const auto out = trimmed_mean_downsample(boosted, out_len, 0.1);
  for (std::size_t i = 0; i < out.values.size(); ++i)
    CHECK(out.values[i] == base.values[i]);  // bit exact
}

TEST_CASE("split_sequences: partition property and boundaries") {
  Rng rng(41);
  auto s = make_spec(8, 256, rng);
  const auto pairs = split_sequences(s, 128);
  CHECK(pairs.size() == 8);
  for (const auto& p : pairs) {
    CHECK(p.input.size() == 128);
    CHECK(p.target.size() == 128);
    for (int v = 0; v < 256; ++v) {
      const double want = s.at(p.bin_index, v);
      const double got = v < 128 ? p.input[static_cast<std::size_t>(v)]
                                 : p.target[static_cast<std::size_t>(v - 128)];
      CHECK(got == want);
    }
  }
  const auto edge = split_sequences(s, 255);
  CHECK(edge[0].input.size() == 255);
  CHECK(edge[0].target.size() == 1);
  CHECK_THROWS_AS(split_sequences(s, 256), spec_error);
}

TEST_CASE("preprocess: deterministic and calibration-linear") {
  SceneSpec spec;
  spec.seed = 3;
  spec.duration_s = 0.1;
  spec.sample_rate_hz = 2'048'000;
  spec.noise_floor_dbm = -95.0;
  const double df = static_cast<double>(spec.sample_rate_hz) / 256.0;
  spec.components.push_back({ComponentKind::tone, 32 * df, 32 * df, -60.0, 0, 1});
  const auto rec = synth_scene(spec);

  PipelineConfig cfg;
  cfg.out_len = 32;
  cfg.n_in = 16;

  const auto a = preprocess_spectrogram(rec, cfg);
  const auto b = preprocess_spectrogram(rec, cfg);
  CHECK(a.values == b.values);

  auto cal = cfg;
  cal.calibration_offset_db = 12.5;
  const auto c = preprocess_spectrogram(rec, cal);
  for (std::size_t i = 0; i < a.values.size(); ++i)
    CHECK(std::abs(c.values[i] - a.values[i] - 12.5) < 1e-9);

  // the tone bin carries elevated PSD in every final time slice
  const int row = (32 + 128) % 256;
  for (int v = 0; v < a.n_t; ++v) CHECK(a.at(row, v) > a.at(0, v) + 20.0);
}

TEST_CASE("spectrogram dump round trip") {
  Rng rng(53);
  auto s = make_spec(16, 24, rng);
  s.prov = {"core", 650'000'000, 20'000'000, 40, parse_iso8601("2023-08-01T00:00:00Z"), 1.0};
  const auto dir = std::filesystem::temp_directory_path() / "lsm_psd_dump";
  std::filesystem::create_directories(dir);
  const auto path = dir / "x.psd";
  write_spectrogram(s, path);
  const auto back = read_spectrogram(path);
  CHECK(back.n_s == s.n_s);
  CHECK(back.n_t == s.n_t);
  CHECK(back.prov.center_freq_hz == s.prov.center_freq_hz);
  CHECK(back.prov.timestamp_utc == s.prov.timestamp_utc);
  for (std::size_t i = 0; i < s.values.size(); ++i)
    CHECK(back.values[i] == doctest::Approx(s.values[i]).epsilon(1e-6));
}
