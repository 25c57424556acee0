#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsm/binio.hpp"
#include "lsm/common.hpp"
#include "lsm/fft.hpp"
#include "lsm/iq.hpp"

// IqRecord -> dBm spectrogram -> time-axis downsampling -> per-bin
// forecasting pairs.
//
// Stage shapes for the 20 MS/s, 1 s preset:
//   STFT 256 bins      -> 256 x 78125
//   max-pool 25/25     -> 256 x 3125
//   trimmed mean to 256-> 256 x 256
//   split at 128       -> 256 pairs of (128 in, 128 out)

namespace lsm {

// Guard added to |X|^2/n before the log so all-zero input yields a finite
// numeric floor instead of -inf.
constexpr double kPsdEpsilon = 1e-20;

// Capture metadata carried from the source record through every stage.
struct SpecProvenance {
  std::string site_id;
  std::int64_t center_freq_hz = 0;
  std::int64_t sample_rate_hz = 0;
  int gain_db = 0;
  std::int64_t timestamp_utc = 0;
  double duration_s = 0.0;
};

// Row-major PSD matrix in dBm: row u = frequency bin (row 0 = lowest
// frequency, fft-shifted), column v = time slice.
struct Spectrogram {
  int n_s = 0;
  int n_t = 0;
  std::vector<double> values;  // n_s * n_t
  double bin_bandwidth_hz = 0.0;
  double slice_duration_s = 0.0;
  SpecProvenance prov;

  double& at(int u, int v) { return values[static_cast<std::size_t>(u) * n_t + v]; }
  double at(int u, int v) const { return values[static_cast<std::size_t>(u) * n_t + v]; }
};

// One per-bin forecasting example: observed prefix and target suffix of a
// single frequency bin's PSD sequence.
struct ForecastPair {
  std::vector<double> input;
  std::vector<double> target;
  int bin_index = 0;
  SpecProvenance meta;
};

struct PipelineConfig {
  int n_s = 256;
  double calibration_offset_db = 0.0;
  int pool_window = 25;
  int pool_stride = 25;
  int out_len = 256;
  double trim_fraction = 0.1;
  int n_in = 128;
};

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
  return {{"n_s", c.n_s},
          {"calibration_offset_db", c.calibration_offset_db},
          {"pool_window", c.pool_window},
          {"pool_stride", c.pool_stride},
          {"out_len", c.out_len},
          {"trim_fraction", c.trim_fraction},
          {"n_in", c.n_in}};
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  c.n_s = j.value("n_s", 256);
  c.calibration_offset_db = j.value("calibration_offset_db", 0.0);
  c.pool_window = j.value("pool_window", 25);
  c.pool_stride = j.value("pool_stride", 25);
  c.out_len = j.value("out_len", 256);
  c.trim_fraction = j.value("trim_fraction", 0.1);
  c.n_in = j.value("n_in", 128);
  return c;
}

// Non-overlapping rectangular-window STFT.
// PSD_dBm[u][v] = 10*log10(|X_v[k(u)]|^2 / n_s + eps) + calibration_offset_db
// with k(u) = (u + n_s/2) mod n_s so row 0 is -fs/2. Trailing samples that do
// not fill a frame are dropped.
inline Spectrogram stft_psd(const IqRecord& rec, int n_s,
                            double calibration_offset_db) {
  require(n_s > 0, "stft_psd: n_s must be positive");
  const std::int64_t n = static_cast<std::int64_t>(rec.samples.size());
  if (n < n_s)
    throw spec_error("stft_psd: input shorter than one frame (" +
                     std::to_string(n) + " < " + std::to_string(n_s) + ")");
  const int frames = static_cast<int>(n / n_s);

  Spectrogram spec;
  spec.n_s = n_s;
  spec.n_t = frames;
  spec.values.resize(static_cast<std::size_t>(n_s) * frames);
  spec.bin_bandwidth_hz = static_cast<double>(rec.sample_rate_hz) / n_s;
  spec.slice_duration_s = static_cast<double>(n_s) / static_cast<double>(rec.sample_rate_hz);
  spec.prov = {rec.site_id, rec.center_freq_hz, rec.sample_rate_hz,
               rec.gain_db, rec.timestamp_utc, rec.duration_s};

  FftPlan plan(n_s);
  std::vector<std::complex<double>> frame(static_cast<std::size_t>(n_s));
  const double inv_log10 = 10.0 / std::log(10.0);
  const int half = n_s / 2;

  for (int v = 0; v < frames; ++v) {
    const std::size_t base = static_cast<std::size_t>(v) * n_s;
    for (int i = 0; i < n_s; ++i) {
      const auto z = rec.samples[base + static_cast<std::size_t>(i)];
      frame[static_cast<std::size_t>(i)] = {static_cast<double>(z.real()),
                                            static_cast<double>(z.imag())};
    }
    plan.forward(frame.data());
    for (int u = 0; u < n_s; ++u) {
      const int k = (u + half) % n_s;
      const auto& X = frame[static_cast<std::size_t>(k)];
      const double p = (X.real() * X.real() + X.imag() * X.imag()) / n_s;
      spec.values[static_cast<std::size_t>(u) * frames + v] =
          inv_log10 * std::log(p + kPsdEpsilon) + calibration_offset_db;
    }
  }
  return spec;
}

// Per-row 1D max pooling along time. Output length floor(n_t / stride);
// window j covers [j*stride, min(j*stride+window, n_t)).
inline Spectrogram maxpool_time(const Spectrogram& in, int window, int stride) {
  require(window > 0, "maxpool_time: window must be positive");
  require(stride > 0, "maxpool_time: stride must be positive");
  require(in.n_t >= window, "maxpool_time: n_t < window");
  const int out_t = in.n_t / stride;
  require(out_t > 0, "maxpool_time: empty output");

  Spectrogram out;
  out.n_s = in.n_s;
  out.n_t = out_t;
  out.values.resize(static_cast<std::size_t>(in.n_s) * out_t);
  out.bin_bandwidth_hz = in.bin_bandwidth_hz;
  out.slice_duration_s = in.slice_duration_s * stride;
  out.prov = in.prov;

  for (int u = 0; u < in.n_s; ++u) {
    const double* row = &in.values[static_cast<std::size_t>(u) * in.n_t];
    double* orow = &out.values[static_cast<std::size_t>(u) * out_t];
    for (int j = 0; j < out_t; ++j) {
      const int lo = j * stride;
      const int hi = std::min(lo + window, in.n_t);
      double m = row[lo];
      for (int i = lo + 1; i < hi; ++i) m = std::max(m, row[i]);
      orow[j] = m;
    }
  }
  return out;
}

// Contiguous groups with boundaries floor(j * n_t / out_len); per group the
// floor(trim_fraction * len) smallest and largest values are dropped and the
// rest averaged (in sorted order, so equal multisets give bit-equal means).
inline Spectrogram trimmed_mean_downsample(const Spectrogram& in, int out_len,
                                           double trim_fraction) {
  require(out_len > 0, "trimmed_mean_downsample: out_len must be positive");
  require(trim_fraction >= 0.0 && trim_fraction < 0.5,
          "trimmed_mean_downsample: trim_fraction must be in [0, 0.5)");
  if (out_len > in.n_t)
    throw spec_error("trimmed_mean_downsample: out_len > n_t (" +
                     std::to_string(out_len) + " > " + std::to_string(in.n_t) + ")");

  Spectrogram out;
  out.n_s = in.n_s;
  out.n_t = out_len;
  out.values.resize(static_cast<std::size_t>(in.n_s) * out_len);
  out.bin_bandwidth_hz = in.bin_bandwidth_hz;
  out.slice_duration_s = in.slice_duration_s * static_cast<double>(in.n_t) / out_len;
  out.prov = in.prov;

  std::vector<double> group;
  for (int u = 0; u < in.n_s; ++u) {
    const double* row = &in.values[static_cast<std::size_t>(u) * in.n_t];
    double* orow = &out.values[static_cast<std::size_t>(u) * out_len];
    for (int j = 0; j < out_len; ++j) {
      const int lo = static_cast<int>((static_cast<std::int64_t>(j) * in.n_t) / out_len);
      const int hi = static_cast<int>((static_cast<std::int64_t>(j + 1) * in.n_t) / out_len);
      group.assign(row + lo, row + hi);
      std::sort(group.begin(), group.end());
      const int drop = static_cast<int>(std::floor(trim_fraction * static_cast<double>(group.size())));
      double sum = 0.0;
      const int kept = static_cast<int>(group.size()) - 2 * drop;
      for (int i = drop; i < drop + kept; ++i) sum += group[static_cast<std::size_t>(i)];
      orow[j] = sum / kept;
    }
  }
  return out;
}

// One pair per frequency bin: input = columns [0, n_in), target = the rest.
inline std::vector<ForecastPair> split_sequences(const Spectrogram& spec, int n_in) {
  require(n_in > 0 && n_in < spec.n_t,
          "split_sequences: n_in must be in (0, n_t)");
  std::vector<ForecastPair> pairs;
  pairs.reserve(static_cast<std::size_t>(spec.n_s));
  for (int u = 0; u < spec.n_s; ++u) {
    ForecastPair p;
    p.bin_index = u;
    p.meta = spec.prov;
    const double* row = &spec.values[static_cast<std::size_t>(u) * spec.n_t];
    p.input.assign(row, row + n_in);
    p.target.assign(row + n_in, row + spec.n_t);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline Spectrogram preprocess_spectrogram(const IqRecord& rec, const PipelineConfig& cfg) {
  Spectrogram s = stft_psd(rec, cfg.n_s, cfg.calibration_offset_db);
  s = maxpool_time(s, cfg.pool_window, cfg.pool_stride);
  s = trimmed_mean_downsample(s, cfg.out_len, cfg.trim_fraction);
  return s;
}

inline std::vector<ForecastPair> preprocess_record(const IqRecord& rec,
                                                   const PipelineConfig& cfg) {
  return split_sequences(preprocess_spectrogram(rec, cfg), cfg.n_in);
}

// ---------------------------------------------------------------------------
// Spectrogram dump: <path> holds row-major 32-bit little-endian floats,
// <path>.json the shape/resolution/provenance header.
// ---------------------------------------------------------------------------

inline void write_spectrogram(const Spectrogram& s, const std::filesystem::path& path) {
  {
    auto os = open_out(path);
    for (double v : s.values) put_f32(os, static_cast<float>(v));
    if (!os) throw io_error("short write: " + path.string());
  }
  nlohmann::json j;
  j["format"] = "lsm-psd-v1";
  j["n_s"] = s.n_s;
  j["n_t"] = s.n_t;
  j["bin_bandwidth_hz"] = s.bin_bandwidth_hz;
  j["slice_duration_s"] = s.slice_duration_s;
  j["provenance"] = {{"site_id", s.prov.site_id},
                     {"center_freq_hz", s.prov.center_freq_hz},
                     {"sample_rate_hz", s.prov.sample_rate_hz},
                     {"gain_db", s.prov.gain_db},
                     {"timestamp_utc", format_iso8601(s.prov.timestamp_utc)},
                     {"duration_s", s.prov.duration_s}};
  write_text(sidecar_path(path), j.dump(2) + "\n");
}

inline Spectrogram read_spectrogram(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side))
    throw format_error("missing spectrogram header: " + side.string());
  Spectrogram s;
  try {
    const auto j = nlohmann::json::parse(slurp_text(side));
    if (j.value("format", std::string()) != "lsm-psd-v1")
      throw format_error("unknown spectrogram format in " + side.string());
    s.n_s = j.at("n_s").get<int>();
    s.n_t = j.at("n_t").get<int>();
    s.bin_bandwidth_hz = j.at("bin_bandwidth_hz").get<double>();
    s.slice_duration_s = j.at("slice_duration_s").get<double>();
    const auto& p = j.at("provenance");
    s.prov.site_id = p.at("site_id").get<std::string>();
    s.prov.center_freq_hz = p.at("center_freq_hz").get<std::int64_t>();
    s.prov.sample_rate_hz = p.at("sample_rate_hz").get<std::int64_t>();
    s.prov.gain_db = p.at("gain_db").get<int>();
    s.prov.timestamp_utc = parse_iso8601(p.at("timestamp_utc").get<std::string>());
    s.prov.duration_s = p.at("duration_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error("corrupt spectrogram header " + side.string() + ": " + e.what());
  }
  const auto bytes = std::filesystem::file_size(path);
  const std::size_t want = static_cast<std::size_t>(s.n_s) * static_cast<std::size_t>(s.n_t) * 4;
  if (bytes != want)
    throw format_error("spectrogram payload size mismatch: " + path.string(),
                       static_cast<std::size_t>(bytes));
  auto is = open_in(path);
  StreamReader r(is, "spectrogram payload " + path.string());
  s.values.resize(static_cast<std::size_t>(s.n_s) * s.n_t);
  for (auto& v : s.values) v = static_cast<double>(r.f32());
  return s;
}

}  // namespace lsm
