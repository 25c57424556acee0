#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsm/binio.hpp"
#include "lsm/common.hpp"
#include "lsm/rng.hpp"
#include "lsm/timeutil.hpp"

// Raw IQ capture I/O and deterministic synthetic scene generation.
//
// On-disk format: a payload of interleaved 32-bit IEEE-754 little-endian
// (I, Q) float pairs next to a JSON sidecar `<payload>.json` carrying
// {site_id, center_freq_hz, sample_rate_hz, gain_db, timestamp_utc,
//  duration_s}.

namespace lsm {

constexpr int kGainMin = 0;
constexpr int kGainMax = 79;

// Number of DFT bins the synthesizer references for per-bin power levels.
// Component power_dbm means: the PSD a 256-bin rectangular-window STFT
// reports for one occupied bin.
constexpr int kSynthGridBins = 256;

// One 1 s (typically) complex-baseband capture plus capture metadata.
struct IqRecord {
  std::string site_id;
  std::int64_t center_freq_hz = 0;
  std::int64_t sample_rate_hz = 0;
  int gain_db = 0;
  std::int64_t timestamp_utc = 0;  // epoch seconds, 1 s resolution
  double duration_s = 0.0;
  std::vector<std::complex<float>> samples;

  void validate() const {
    if (samples.empty()) throw spec_error("IqRecord: empty sample vector");
    if (sample_rate_hz <= 0) throw spec_error("IqRecord: sample_rate_hz <= 0");
    if (gain_db < kGainMin || gain_db > kGainMax)
      throw spec_error("IqRecord: gain_db outside [0,79]: " +
                       std::to_string(gain_db));
    const auto expect =
        static_cast<std::int64_t>(std::llround(duration_s * static_cast<double>(sample_rate_hz)));
    if (expect != static_cast<std::int64_t>(samples.size()))
      throw spec_error("IqRecord: N != sample_rate_hz * duration_s");
  }
};

// Ascending, unique center frequencies; at most 33 entries so every band
// fits the single frequency token.
struct BandPlan {
  std::vector<std::int64_t> freqs_hz;

  BandPlan() = default;
  explicit BandPlan(std::vector<std::int64_t> f) : freqs_hz(std::move(f)) {
    validate();
  }

  void validate() const {
    if (freqs_hz.empty() || freqs_hz.size() > 33)
      throw spec_error("BandPlan: need 1..33 bands, got " +
                       std::to_string(freqs_hz.size()));
    for (std::size_t i = 1; i < freqs_hz.size(); ++i)
      if (freqs_hz[i] <= freqs_hz[i - 1])
        throw spec_error("BandPlan: frequencies must be ascending and unique");
  }

  // 0-based index, or -1 when absent.
  int index_of(std::int64_t f) const {
    auto it = std::lower_bound(freqs_hz.begin(), freqs_hz.end(), f);
    if (it == freqs_hz.end() || *it != f) return -1;
    return static_cast<int>(it - freqs_hz.begin());
  }

  std::size_t size() const { return freqs_hz.size(); }
};

enum class ComponentKind { tone, burst, ofdm_block };

// One additive scene component. Frequencies are offsets from the record
// center; burst/ofdm_block spans snap to the fs/256 synthesis grid so each
// occupied STFT bin reads power_dbm exactly.
struct SceneComponent {
  ComponentKind kind = ComponentKind::tone;
  double start_offset_hz = 0.0;
  double stop_offset_hz = 0.0;  // ignored for tone
  double power_dbm = -60.0;     // per-occupied-bin PSD target
  double period_s = 0.0;        // burst only
  double duty = 1.0;            // burst only, (0, 1]
};

struct SceneSpec {
  std::uint64_t seed = 0;
  double duration_s = 1.0;
  std::int64_t sample_rate_hz = 20'000'000;
  double noise_floor_dbm = -100.0;
  std::vector<SceneComponent> components;
  bool has_sinr = false;
  double sinr_db = 0.0;

  // Capture metadata stamped onto the produced record.
  std::string site_id = "synth";
  std::int64_t center_freq_hz = 0;
  int gain_db = 30;
  std::int64_t timestamp_utc = 0;

  void validate() const {
    if (duration_s <= 0) throw spec_error("SceneSpec: duration_s <= 0");
    if (sample_rate_hz <= 0) throw spec_error("SceneSpec: sample_rate_hz <= 0");
    const double nyq = static_cast<double>(sample_rate_hz) / 2.0;
    for (const auto& c : components) {
      const double lo = std::min(c.start_offset_hz, c.stop_offset_hz);
      const double hi = std::max(c.start_offset_hz, c.stop_offset_hz);
      if (c.kind == ComponentKind::tone) {
        if (c.start_offset_hz < -nyq || c.start_offset_hz > nyq)
          throw spec_error("SceneSpec: tone offset outside Nyquist span");
      } else if (lo < -nyq || hi > nyq) {
        throw spec_error("SceneSpec: component span outside Nyquist span");
      }
      if (c.kind == ComponentKind::burst) {
        if (c.duty <= 0.0 || c.duty > 1.0)
          throw spec_error("SceneSpec: burst duty must be in (0,1]");
        if (c.period_s <= 0.0) throw spec_error("SceneSpec: burst period <= 0");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization
// ---------------------------------------------------------------------------

inline nlohmann::json scene_component_to_json(const SceneComponent& c) {
  nlohmann::json j;
  switch (c.kind) {
    case ComponentKind::tone: j["kind"] = "tone"; break;
    case ComponentKind::burst: j["kind"] = "burst"; break;
    case ComponentKind::ofdm_block: j["kind"] = "ofdm_block"; break;
  }
  j["start_offset_hz"] = c.start_offset_hz;
  j["stop_offset_hz"] = c.stop_offset_hz;
  j["power_dbm"] = c.power_dbm;
  if (c.kind == ComponentKind::burst) {
    j["period_s"] = c.period_s;
    j["duty"] = c.duty;
  }
  return j;
}

inline SceneComponent scene_component_from_json(const nlohmann::json& j) {
  SceneComponent c;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "tone")
    c.kind = ComponentKind::tone;
  else if (kind == "burst")
    c.kind = ComponentKind::burst;
  else if (kind == "ofdm_block")
    c.kind = ComponentKind::ofdm_block;
  else
    throw format_error("unknown scene component kind: " + kind);
  c.start_offset_hz = j.at("start_offset_hz").get<double>();
  c.stop_offset_hz = j.value("stop_offset_hz", c.start_offset_hz);
  c.power_dbm = j.at("power_dbm").get<double>();
  c.period_s = j.value("period_s", 0.0);
  c.duty = j.value("duty", 1.0);
  return c;
}

inline nlohmann::json scene_spec_to_json(const SceneSpec& s) {
  nlohmann::json j;
  j["seed"] = s.seed;
  j["duration_s"] = s.duration_s;
  j["sample_rate_hz"] = s.sample_rate_hz;
  j["noise_floor_dbm"] = s.noise_floor_dbm;
  j["components"] = nlohmann::json::array();
  for (const auto& c : s.components) j["components"].push_back(scene_component_to_json(c));
  if (s.has_sinr) j["sinr_db"] = s.sinr_db;
  j["site_id"] = s.site_id;
  j["center_freq_hz"] = s.center_freq_hz;
  j["gain_db"] = s.gain_db;
  j["timestamp_utc"] = format_iso8601(s.timestamp_utc);
  return j;
}

inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.seed = j.value("seed", std::uint64_t{0});
  s.duration_s = j.value("duration_s", 1.0);
  s.sample_rate_hz = j.value("sample_rate_hz", std::int64_t{20'000'000});
  s.noise_floor_dbm = j.value("noise_floor_dbm", -100.0);
  if (j.contains("components"))
    for (const auto& c : j.at("components"))
      s.components.push_back(scene_component_from_json(c));
  if (j.contains("sinr_db") && !j.at("sinr_db").is_null()) {
    s.has_sinr = true;
    s.sinr_db = j.at("sinr_db").get<double>();
  }
  s.site_id = j.value("site_id", std::string("synth"));
  s.center_freq_hz = j.value("center_freq_hz", std::int64_t{0});
  s.gain_db = j.value("gain_db", 30);
  if (j.contains("timestamp_utc"))
    s.timestamp_utc = parse_iso8601(j.at("timestamp_utc").get<std::string>());
  return s;
}

// ---------------------------------------------------------------------------
// Record file I/O
// ---------------------------------------------------------------------------

inline std::filesystem::path sidecar_path(const std::filesystem::path& p) {
  return std::filesystem::path(p.string() + ".json");
}

inline void write_iq_record(const IqRecord& rec, const std::filesystem::path& path) {
  rec.validate();
  {
    auto os = open_out(path);
    for (const auto& z : rec.samples) {
      put_f32(os, z.real());
      put_f32(os, z.imag());
    }
    if (!os) throw io_error("short write: " + path.string());
  }
  nlohmann::json j;
  j["site_id"] = rec.site_id;
  j["center_freq_hz"] = rec.center_freq_hz;
  j["sample_rate_hz"] = rec.sample_rate_hz;
  j["gain_db"] = rec.gain_db;
  j["timestamp_utc"] = format_iso8601(rec.timestamp_utc);
  j["duration_s"] = rec.duration_s;
  write_text(sidecar_path(path), j.dump(2) + "\n");
}

inline IqRecord read_iq_record(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(side))
    throw format_error("missing sidecar metadata: " + side.string());

  IqRecord rec;
  try {
    const auto j = nlohmann::json::parse(slurp_text(side));
    rec.site_id = j.at("site_id").get<std::string>();
    rec.center_freq_hz = j.at("center_freq_hz").get<std::int64_t>();
    rec.sample_rate_hz = j.at("sample_rate_hz").get<std::int64_t>();
    rec.gain_db = j.at("gain_db").get<int>();
    rec.timestamp_utc = parse_iso8601(j.at("timestamp_utc").get<std::string>());
    rec.duration_s = j.at("duration_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw format_error("corrupt sidecar " + side.string() + ": " + e.what());
  }

  const auto bytes = std::filesystem::file_size(path);
  if (bytes % 8 != 0)
    throw format_error("IQ payload truncated (size not a multiple of 8): " +
                           path.string(),
                       static_cast<std::size_t>(bytes));
  const std::size_t n = static_cast<std::size_t>(bytes / 8);

  auto is = open_in(path);
  StreamReader r(is, "IQ payload " + path.string());
  rec.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float re = r.f32();
    const float im = r.f32();
    rec.samples[i] = {re, im};
  }
  rec.validate();
  return rec;
}

// ---------------------------------------------------------------------------
// Scene synthesis
// ---------------------------------------------------------------------------

// Synthesis amplitude for a per-bin PSD target P (dBm): a component carrier
// of amplitude A has average power A^2/2 and reads P on its STFT bin, with
// complex envelope magnitude A/sqrt(2).
inline double tone_amplitude_for_power(double power_dbm, int n_bins = kSynthGridBins) {
  const double lin = std::pow(10.0, power_dbm / 10.0);
  return std::sqrt(2.0 * lin / static_cast<double>(n_bins));
}

namespace detail {

// Occupied synthesis-grid bins (DFT indices in [0, 256)) for a component.
inline std::vector<int> occupied_bins(const SceneComponent& c, double fs) {
  const double df = fs / kSynthGridBins;
  std::vector<int> bins;
  auto wrap = [](int k) { return ((k % kSynthGridBins) + kSynthGridBins) % kSynthGridBins; };
  if (c.kind == ComponentKind::tone) {
    bins.push_back(wrap(static_cast<int>(std::lround(c.start_offset_hz / df))));
    return bins;
  }
  const double lo = std::min(c.start_offset_hz, c.stop_offset_hz);
  const double hi = std::max(c.start_offset_hz, c.stop_offset_hz);
  int k0 = static_cast<int>(std::ceil(lo / df - 1e-9));
  int k1 = static_cast<int>(std::floor(hi / df + 1e-9));
  if (k1 < k0) k0 = k1 = static_cast<int>(std::lround(0.5 * (lo + hi) / df));
  for (int k = k0; k <= k1; ++k) {
    int kk = wrap(k);
    // +fs/2 aliases onto -fs/2; keep a single instance.
    if (std::find(bins.begin(), bins.end(), kk) == bins.end()) bins.push_back(kk);
  }
  return bins;
}

// 256-sample tile of a bin-aligned subcarrier comb with given phases.
inline std::vector<std::complex<double>> comb_tile(const std::vector<int>& bins,
                                                   double magnitude,
                                                   const std::vector<double>& phases) {
  std::vector<std::complex<double>> tile(kSynthGridBins, {0.0, 0.0});
  constexpr double two_pi = 6.28318530717958647692;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const double w = two_pi * bins[b] / kSynthGridBins;
    for (int i = 0; i < kSynthGridBins; ++i) {
      const double ph = w * i + phases[b];
      tile[i] += std::complex<double>(magnitude * std::cos(ph), magnitude * std::sin(ph));
    }
  }
  return tile;
}

}  // namespace detail

// Deterministic pure function of the spec (including seed): complex baseband
// with components superposed on a Gaussian noise floor. Noise variance is
// referenced to per-STFT-bin PSD, so a 256-bin pipeline reports the
// configured floor (in linear average over frames).
inline IqRecord synth_scene(const SceneSpec& spec) {
  spec.validate();
  const std::int64_t n =
      static_cast<std::int64_t>(std::llround(spec.duration_s * static_cast<double>(spec.sample_rate_hz)));
  require(n > 0, "synth_scene: zero-length scene");
  const double fs = static_cast<double>(spec.sample_rate_hz);

  // Noise variance: per-bin linear PSD. When sinr_db is present, the floor is
  // derived from total in-band signal power over the occupied bins instead:
  // SINR = 10 log10(sum of per-bin signal power / (n_occupied * noise_psd)).
  double noise_psd = std::pow(10.0, spec.noise_floor_dbm / 10.0);
  if (spec.has_sinr) {
    double sig = 0.0;
    std::size_t occ = 0;
    for (const auto& c : spec.components) {
      const auto bins = detail::occupied_bins(c, fs);
      occ += bins.size();
      sig += static_cast<double>(bins.size()) * std::pow(10.0, c.power_dbm / 10.0);
    }
    require(occ > 0, "synth_scene: sinr_db given but no components");
    noise_psd = sig / (static_cast<double>(occ) * std::pow(10.0, spec.sinr_db / 10.0));
  }
  const double noise_std = std::sqrt(noise_psd / 2.0);  // per I/Q leg

  Rng rng(spec.seed);
  std::vector<std::complex<double>> acc(static_cast<std::size_t>(n), {0.0, 0.0});
  if (noise_std > 0.0) {
    for (auto& z : acc) z = {noise_std * rng.gaussian(), noise_std * rng.gaussian()};
  }

  constexpr double two_pi = 6.28318530717958647692;
  for (const auto& c : spec.components) {
    const double amp = tone_amplitude_for_power(c.power_dbm);
    const double mag = amp / std::sqrt(2.0);  // complex envelope magnitude

    if (c.kind == ComponentKind::tone) {
      const double w = two_pi * c.start_offset_hz / fs;
      for (std::int64_t i = 0; i < n; ++i) {
        const double ph = w * static_cast<double>(i);
        acc[static_cast<std::size_t>(i)] +=
            std::complex<double>(mag * std::cos(ph), mag * std::sin(ph));
      }
      continue;
    }

    const auto bins = detail::occupied_bins(c, fs);
    std::vector<double> phases(bins.size());

    if (c.kind == ComponentKind::ofdm_block) {
      // Fresh random phases per 256-sample symbol.
      for (std::int64_t sym = 0; sym * kSynthGridBins < n; ++sym) {
        for (auto& p : phases) p = two_pi * rng.uniform();
        const auto tile = detail::comb_tile(bins, mag, phases);
        const std::int64_t base = sym * kSynthGridBins;
        const std::int64_t m = std::min<std::int64_t>(kSynthGridBins, n - base);
        for (std::int64_t i = 0; i < m; ++i)
          acc[static_cast<std::size_t>(base + i)] += tile[static_cast<std::size_t>(i)];
      }
    } else {
      // burst: static comb gated by an integer-sample on/off pattern.
      for (auto& p : phases) p = two_pi * rng.uniform();
      const auto tile = detail::comb_tile(bins, mag, phases);
      const std::int64_t period = std::llround(c.period_s * fs);
      const std::int64_t on = std::llround(c.duty * static_cast<double>(period));
      require(period > 0, "synth_scene: burst period shorter than one sample");
      for (std::int64_t i = 0; i < n; ++i) {
        if (i % period < on)
          acc[static_cast<std::size_t>(i)] +=
              tile[static_cast<std::size_t>(i % kSynthGridBins)];
      }
    }
  }

  IqRecord rec;
  rec.site_id = spec.site_id;
  rec.center_freq_hz = spec.center_freq_hz;
  rec.sample_rate_hz = spec.sample_rate_hz;
  rec.gain_db = spec.gain_db;
  rec.timestamp_utc = spec.timestamp_utc;
  rec.duration_s = spec.duration_s;
  rec.samples.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i)
    rec.samples[i] = {static_cast<float>(acc[i].real()), static_cast<float>(acc[i].imag())};
  rec.validate();
  return rec;
}

}  // namespace lsm
