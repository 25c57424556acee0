#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsm/binio.hpp"
#include "lsm/common.hpp"
#include "lsm/iq.hpp"
#include "lsm/specgram.hpp"
#include "lsm/timeutil.hpp"

// Fixed 128-token vocabulary mapping PSD sequences plus capture metadata to
// 292-byte token records, and back.
//
// Value tokens:
//   PSD dBm   -118..-18  -> 1..101   (token = dBm + 119)
//   gain dB      0..79   -> 1..80
//   frequency  band-plan index + 1 (1..33)
//   bin index  two base-16 digits, each nibble+1 (1..16)
//   day-of-week Sat..Fri -> 1..7; day 1..31; month 1..12; year-2015 (1..20);
//   hour+1 (1..24); minute+1, second+1 (1..60)
// Token 0 pads; 102..127 are field/frame tags.
//
// Sequence layout (292 tokens):
//   [0 124 | 118 g 119 | 114 f 115 | 116 hi lo 117 | 122 dw 123 | 102 d 103 |
//    104 mo 105 | 106 y 107 | 108 h 109 | 110 mi 111 | 112 s 113 | 125 126]
//   + 256 PSD tokens (observed then target, in time order) + [127]

namespace lsm {

using Token = std::uint8_t;

namespace vocab {
constexpr Token pad = 0;
constexpr Token day_begin = 102, day_end = 103;
constexpr Token month_begin = 104, month_end = 105;
constexpr Token year_begin = 106, year_end = 107;
constexpr Token hour_begin = 108, hour_end = 109;
constexpr Token minute_begin = 110, minute_end = 111;
constexpr Token second_begin = 112, second_end = 113;
constexpr Token freq_begin = 114, freq_end = 115;
constexpr Token bin_begin = 116, bin_end = 117;
constexpr Token gain_begin = 118, gain_end = 119;
constexpr Token dow_begin = 122, dow_end = 123;
constexpr Token meta_begin = 124, meta_end = 125;
constexpr Token psd_begin = 126, psd_end = 127;

constexpr int psd_min_dbm = -118;
constexpr int psd_max_dbm = -18;
constexpr int psd_token_min = 1;
constexpr int psd_token_max = 101;
constexpr int year_min = 2016;
constexpr int year_max = 2035;
}  // namespace vocab

constexpr int kSeqLen = 292;
constexpr int kHeaderLen = 35;  // through the psd_begin tag
constexpr int kPsdLen = 256;

struct TokenSequence {
  std::array<Token, kSeqLen> t{};

  bool operator==(const TokenSequence&) const = default;
};

// Field values reconstructed from (or required to build) a header.
struct SequenceMeta {
  int gain_db = 0;
  std::int64_t center_freq_hz = 0;
  int bin_index = 0;
  std::int64_t timestamp_utc = 0;

  bool operator==(const SequenceMeta&) const = default;
};

// ---------------------------------------------------------------------------
// Field codecs
// ---------------------------------------------------------------------------

// Out-of-range PSD values clamp to the nearest endpoint.
inline Token encode_psd(int value_dbm) {
  const int v = std::clamp(value_dbm, vocab::psd_min_dbm, vocab::psd_max_dbm);
  return static_cast<Token>(v + 119);
}

inline int decode_psd(Token t) {
  if (t < vocab::psd_token_min || t > vocab::psd_token_max)
    throw format_error("decode_psd: token outside [1,101]: " + std::to_string(t));
  return static_cast<int>(t) - 119;
}

// Integerize a raw PSD value the way the token stream expects: discard the
// fractional part (truncate toward zero).
inline int integerize_psd(double v) { return static_cast<int>(std::trunc(v)); }

inline std::pair<Token, Token> encode_bin(int bin_index) {
  if (bin_index < 0 || bin_index > 255)
    throw spec_error("encode_bin: index outside [0,255]: " + std::to_string(bin_index));
  return {static_cast<Token>(bin_index / 16 + 1), static_cast<Token>(bin_index % 16 + 1)};
}

inline int decode_bin(Token hi, Token lo) {
  if (hi < 1 || hi > 16 || lo < 1 || lo > 16)
    throw format_error("decode_bin: nibble token outside [1,16]");
  return (static_cast<int>(hi) - 1) * 16 + (static_cast<int>(lo) - 1);
}

inline std::array<Token, kHeaderLen> encode_header(const SequenceMeta& meta,
                                                   const BandPlan& plan) {
  if (meta.gain_db < kGainMin || meta.gain_db > kGainMax)
    throw spec_error("encode_header: gain outside [0,79]");
  const int fidx = plan.index_of(meta.center_freq_hz);
  if (fidx < 0)
    throw spec_error("encode_header: frequency not in band plan: " +
                     std::to_string(meta.center_freq_hz));
  const CivilTime c = civil_from_epoch(meta.timestamp_utc);
  if (c.year < vocab::year_min || c.year > vocab::year_max)
    throw spec_error("encode_header: year outside [2016,2035]: " +
                     std::to_string(c.year));
  const auto [bhi, blo] = encode_bin(meta.bin_index);
  const int dow = day_of_week_sat1(meta.timestamp_utc);

  std::array<Token, kHeaderLen> h{};
  int i = 0;
  auto put = [&](int v) { h[static_cast<std::size_t>(i++)] = static_cast<Token>(v); };
  put(vocab::pad);
  put(vocab::meta_begin);
  put(vocab::gain_begin); put(meta.gain_db + 1); put(vocab::gain_end);
  put(vocab::freq_begin); put(fidx + 1); put(vocab::freq_end);
  put(vocab::bin_begin); put(bhi); put(blo); put(vocab::bin_end);
  put(vocab::dow_begin); put(dow); put(vocab::dow_end);
  put(vocab::day_begin); put(c.day); put(vocab::day_end);
  put(vocab::month_begin); put(c.month); put(vocab::month_end);
  put(vocab::year_begin); put(c.year - 2015); put(vocab::year_end);
  put(vocab::hour_begin); put(c.hour + 1); put(vocab::hour_end);
  put(vocab::minute_begin); put(c.minute + 1); put(vocab::minute_end);
  put(vocab::second_begin); put(c.second + 1); put(vocab::second_end);
  put(vocab::meta_end);
  put(vocab::psd_begin);
  return h;
}

// ---------------------------------------------------------------------------
// Whole-sequence codec
// ---------------------------------------------------------------------------

// PSD values are integerized (fractional parts discarded) and clamped.
inline TokenSequence encode_sequence(const ForecastPair& pair, const BandPlan& plan) {
  if (pair.input.size() + pair.target.size() != kPsdLen)
    throw spec_error("encode_sequence: input+target must hold 256 PSD values");
  SequenceMeta meta{pair.meta.gain_db, pair.meta.center_freq_hz, pair.bin_index,
                    pair.meta.timestamp_utc};
  TokenSequence seq;
  const auto header = encode_header(meta, plan);
  std::copy(header.begin(), header.end(), seq.t.begin());
  int i = kHeaderLen;
  for (double v : pair.input)
    seq.t[static_cast<std::size_t>(i++)] = encode_psd(integerize_psd(v));
  for (double v : pair.target)
    seq.t[static_cast<std::size_t>(i++)] = encode_psd(integerize_psd(v));
  seq.t[kSeqLen - 1] = vocab::psd_end;
  return seq;
}

struct DecodedSequence {
  SequenceMeta meta;
  std::array<int, kPsdLen> psd_dbm{};
};

namespace detail {

inline void expect_tag(const TokenSequence& s, int pos, Token tag, const char* what) {
  if (s.t[static_cast<std::size_t>(pos)] != tag)
    throw format_error(std::string("decode_sequence: expected ") + what +
                           " tag " + std::to_string(tag) + ", found " +
                           std::to_string(s.t[static_cast<std::size_t>(pos)]),
                       static_cast<std::size_t>(pos));
}

inline int read_field(const TokenSequence& s, int& pos, Token begin, Token end,
                      int lo, int hi, const char* what) {
  expect_tag(s, pos, begin, what);
  const int v = s.t[static_cast<std::size_t>(pos + 1)];
  if (v < lo || v > hi)
    throw format_error(std::string("decode_sequence: ") + what +
                           " value token outside [" + std::to_string(lo) + "," +
                           std::to_string(hi) + "]: " + std::to_string(v),
                       static_cast<std::size_t>(pos + 1));
  expect_tag(s, pos + 2, end, what);
  pos += 3;
  return v;
}

}  // namespace detail

// Strict parse; throws format_error with the offending token offset.
inline DecodedSequence decode_sequence(const TokenSequence& seq, const BandPlan& plan) {
  using namespace detail;
  DecodedSequence out;
  int pos = 0;
  expect_tag(seq, pos, vocab::pad, "leading pad");
  expect_tag(seq, pos + 1, vocab::meta_begin, "metadata begin");
  pos = 2;

  const int gain = read_field(seq, pos, vocab::gain_begin, vocab::gain_end, 1, 80, "gain");
  const int freq = read_field(seq, pos, vocab::freq_begin, vocab::freq_end, 1, 33, "frequency");

  expect_tag(seq, pos, vocab::bin_begin, "bin");
  const Token bhi = seq.t[static_cast<std::size_t>(pos + 1)];
  const Token blo = seq.t[static_cast<std::size_t>(pos + 2)];
  int bin;
  try {
    bin = decode_bin(bhi, blo);
  } catch (const format_error& e) {
    throw format_error(std::string("decode_sequence: ") + e.what(),
                       static_cast<std::size_t>(pos + 1));
  }
  expect_tag(seq, pos + 3, vocab::bin_end, "bin");
  pos += 4;

  const int dow = read_field(seq, pos, vocab::dow_begin, vocab::dow_end, 1, 7, "day-of-week");
  (void)dow;  // redundant with the civil date; ranges checked only
  const int day = read_field(seq, pos, vocab::day_begin, vocab::day_end, 1, 31, "day");
  const int month = read_field(seq, pos, vocab::month_begin, vocab::month_end, 1, 12, "month");
  const int year = read_field(seq, pos, vocab::year_begin, vocab::year_end, 1, 20, "year");
  const int hour = read_field(seq, pos, vocab::hour_begin, vocab::hour_end, 1, 24, "hour");
  const int minute = read_field(seq, pos, vocab::minute_begin, vocab::minute_end, 1, 60, "minute");
  const int second = read_field(seq, pos, vocab::second_begin, vocab::second_end, 1, 60, "second");

  expect_tag(seq, pos, vocab::meta_end, "metadata end");
  expect_tag(seq, pos + 1, vocab::psd_begin, "PSD begin");
  pos += 2;

  if (pos != kHeaderLen)
    throw format_error("decode_sequence: internal header length mismatch",
                       static_cast<std::size_t>(pos));

  for (int i = 0; i < kPsdLen; ++i) {
    const Token t = seq.t[static_cast<std::size_t>(pos)];
    if (t < vocab::psd_token_min || t > vocab::psd_token_max)
      throw format_error("decode_sequence: PSD token outside [1,101]: " +
                             std::to_string(t),
                         static_cast<std::size_t>(pos));
    out.psd_dbm[static_cast<std::size_t>(i)] = static_cast<int>(t) - 119;
    ++pos;
  }
  expect_tag(seq, pos, vocab::psd_end, "PSD end");

  if (freq > static_cast<int>(plan.size()))
    throw format_error("decode_sequence: frequency token beyond band plan (" +
                           std::to_string(freq) + " > " +
                           std::to_string(plan.size()) + ")",
                       5);
  out.meta.gain_db = gain - 1;
  out.meta.center_freq_hz = plan.freqs_hz[static_cast<std::size_t>(freq - 1)];
  out.meta.bin_index = bin;
  CivilTime c;
  c.year = year + 2015;
  c.month = month;
  c.day = day;
  c.hour = hour - 1;
  c.minute = minute - 1;
  c.second = second - 1;
  out.meta.timestamp_utc = epoch_from_civil(c);
  return out;
}

// Positions whose logits predict the 128 forecast PSD tokens, given that
// the first n_in PSD values are observed context. Logit row p predicts the
// token at p + 1.
inline std::pair<int, int> forecast_logit_span(int n_in) {
  return {kHeaderLen + n_in - 1, kHeaderLen + kPsdLen - 1};
}

// ---------------------------------------------------------------------------
// Token file I/O: concatenated 292-byte records plus a JSON manifest at
// <path>.manifest.json.
// ---------------------------------------------------------------------------

inline std::filesystem::path manifest_path(const std::filesystem::path& p) {
  return std::filesystem::path(p.string() + ".manifest.json");
}

struct TokenFileManifest {
  std::uint64_t count = 0;
  BandPlan plan;
  int n_in = 128;
  std::string preset = "psd256";
  std::string created_utc;  // empty = not stamped
};

inline void write_token_file(const std::filesystem::path& path,
                             const std::vector<TokenSequence>& seqs,
                             const TokenFileManifest& mf) {
  {
    auto os = open_out(path);
    for (const auto& s : seqs)
      os.write(reinterpret_cast<const char*>(s.t.data()), kSeqLen);
    if (!os) throw io_error("short write: " + path.string());
  }
  nlohmann::json j;
  j["format"] = "lsm-tokens-v1";
  j["count"] = seqs.size();
  j["record_bytes"] = kSeqLen;
  j["band_plan_hz"] = mf.plan.freqs_hz;
  j["n_in"] = mf.n_in;
  j["preset"] = mf.preset;
  if (!mf.created_utc.empty()) j["created_utc"] = mf.created_utc;
  write_text(manifest_path(path), j.dump(2) + "\n");
}

inline std::pair<std::vector<TokenSequence>, TokenFileManifest> read_token_file(
    const std::filesystem::path& path) {
  const auto mpath = manifest_path(path);
  if (!std::filesystem::exists(mpath))
    throw format_error("missing token manifest: " + mpath.string());
  TokenFileManifest mf;
  try {
    const auto j = nlohmann::json::parse(slurp_text(mpath));
    if (j.value("format", std::string()) != "lsm-tokens-v1")
      throw format_error("unknown token file format in " + mpath.string());
    mf.count = j.at("count").get<std::uint64_t>();
    mf.plan = BandPlan(j.at("band_plan_hz").get<std::vector<std::int64_t>>());
    mf.n_in = j.value("n_in", 128);
    mf.preset = j.value("preset", std::string("psd256"));
    mf.created_utc = j.value("created_utc", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw format_error("corrupt token manifest " + mpath.string() + ": " + e.what());
  }

  const auto bytes = std::filesystem::file_size(path);
  if (bytes % kSeqLen != 0)
    throw format_error("token payload not a multiple of 292 bytes: " + path.string(),
                       static_cast<std::size_t>(bytes));
  const std::uint64_t n = bytes / kSeqLen;
  if (n != mf.count)
    throw format_error("token payload count disagrees with manifest: " +
                       std::to_string(n) + " != " + std::to_string(mf.count));

  std::vector<TokenSequence> seqs(n);
  auto is = open_in(path);
  StreamReader r(is, "token payload " + path.string());
  for (auto& s : seqs) r.read_exact(s.t.data(), kSeqLen);
  return {std::move(seqs), std::move(mf)};
}

}  // namespace lsm
