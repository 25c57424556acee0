// lsm -- spectrum forecasting toolkit CLI.
//
// Pipelines: synth -> preprocess -> tokenize -> stats/split -> train ->
// predict/eval -> export-plots. Every subcommand writes a resolved-config
// snapshot next to its outputs and is idempotent for fixed inputs and seed.
//
// Exit codes: 0 success, 1 usage error, 2 data/validation error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lsm/eval.hpp"
#include "lsm/iq.hpp"
#include "lsm/parallel.hpp"
#include "lsm/specgram.hpp"
#include "lsm/tokenizer.hpp"
#include "lsm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config resolution: defaults < preset < config file < --set overrides.
// Unknown keys are rejected.
// ---------------------------------------------------------------------------

json parse_scalar(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  try {
    std::size_t pos = 0;
    if (v.find_first_of(".eE") != std::string::npos) {
      const double d = std::stod(v, &pos);
      if (pos == v.size()) return d;
    } else {
      const long long i = std::stoll(v, &pos);
      if (pos == v.size()) return i;
    }
  } catch (...) {
  }
  return v;
}

void apply_overrides(json& resolved, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw CLI::ValidationError("--set", "expected key=value, got: " + kv);
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
      const auto dot = key.find('.', start);
      parts.push_back(key.substr(start, dot == std::string::npos ? dot : dot - start));
      if (dot == std::string::npos) break;
      start = dot + 1;
    }
    json* node = &resolved;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i]))
        throw CLI::ValidationError("--set", "unknown key: " + key);
      node = &(*node)[parts[i]];
    }
    if (!node->contains(parts.back()))
      throw CLI::ValidationError("--set", "unknown key: " + key);
    (*node)[parts.back()] = parse_scalar(val);
  }
}

struct Resolved {
  json sections;  // {"pipeline": {...}, "plan": {...}, "model": {...}}

  lsm::PipelineConfig pipeline() const {
    return lsm::pipeline_config_from_json(sections.at("pipeline"));
  }
  lsm::TrainPlan plan() const { return lsm::train_plan_from_json(sections.at("plan")); }
  lsm::LsmConfig model() const { return lsm::config_from_json(sections.at("model")); }
};

Resolved resolve_config(const std::string& preset, const std::string& config_file,
                        const std::vector<std::string>& sets) {
  Resolved r;
  r.sections["pipeline"] = lsm::pipeline_config_to_json(lsm::PipelineConfig{});
  r.sections["plan"] = lsm::train_plan_to_json(lsm::TrainPlan{});
  r.sections["model"] =
      lsm::config_to_json(lsm::preset_config(preset.empty() ? "tiny" : preset));
  if (!config_file.empty()) {
    const json f = json::parse(lsm::slurp_text(config_file));
    for (auto it = f.begin(); it != f.end(); ++it) {
      if (!r.sections.contains(it.key()))
        throw lsm::spec_error("config file: unknown section: " + it.key());
      json& dst = r.sections[it.key()];
      for (auto jt = it.value().begin(); jt != it.value().end(); ++jt) {
        if (!dst.contains(jt.key()))
          throw lsm::spec_error("config file: unknown key: " + it.key() + "." + jt.key());
        dst[jt.key()] = jt.value();
      }
    }
  }
  apply_overrides(r.sections, sets);
  return r;
}

void write_snapshot(const fs::path& where, const std::string& subcommand,
                    const json& resolved, const json& inputs) {
  json snap;
  snap["subcommand"] = subcommand;
  snap["resolved"] = resolved;
  snap["inputs"] = inputs;
  lsm::write_text(where, snap.dump(2) + "\n");
}

std::vector<fs::path> sorted_files(const fs::path& dir, const std::string& ext) {
  if (!fs::exists(dir)) throw lsm::io_error("no such directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

lsm::TokenDataset load_dataset(const fs::path& tokens, const std::string& stats_path) {
  auto [seqs, mf] = lsm::read_token_file(tokens);
  std::vector<lsm::BandStats> stats;
  if (!stats_path.empty())
    stats = lsm::band_stats_from_json(json::parse(lsm::slurp_text(stats_path)));
  return lsm::make_dataset(std::move(seqs), mf.plan, mf.n_in, stats);
}

std::string default_stamp(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("LSM_BUILD_STAMP")) return env;
  return lsm::format_iso8601(static_cast<std::int64_t>(std::time(nullptr)));
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string spec_file, out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 1;
};

int cmd_synth(const SynthArgs& a) {
  const json spec_json = json::parse(lsm::slurp_text(a.spec_file));
  fs::create_directories(a.out_dir);

  struct Job {
    lsm::SceneSpec scene;
    fs::path path;
  };
  std::vector<Job> jobs;
  const std::uint64_t base_seed =
      a.seed_set ? a.seed : spec_json.value("seed", std::uint64_t{0});

  if (spec_json.contains("bands")) {
    const std::int64_t start = lsm::parse_iso8601(
        spec_json.value("start_utc", std::string("2023-06-15T00:00:00Z")));
    lsm::SceneSpec proto;
    proto.duration_s = spec_json.value("duration_s", 1.0);
    proto.sample_rate_hz = spec_json.value("sample_rate_hz", std::int64_t{20'000'000});
    proto.noise_floor_dbm = spec_json.value("noise_floor_dbm", -100.0);
    proto.gain_db = spec_json.value("gain_db", 30);
    proto.site_id = spec_json.value("site_id", std::string("synth"));

    const auto& bands = spec_json.at("bands");
    int max_records = 0;
    for (const auto& b : bands) max_records = std::max(max_records, b.value("records", 1));
    // record-major interleave across bands, one capture per second, the way
    // a scanning receiver hops frequencies
    std::uint64_t global = 0;
    for (int r = 0; r < max_records; ++r) {
      for (std::size_t bi = 0; bi < bands.size(); ++bi, ++global) {
        const auto& b = bands[bi];
        if (r >= b.value("records", 1)) continue;
        lsm::SceneSpec s = proto;
        s.center_freq_hz = b.at("center_freq_hz").get<std::int64_t>();
        s.noise_floor_dbm = b.value("noise_floor_dbm", proto.noise_floor_dbm);
        if (b.contains("sinr_db") && !b.at("sinr_db").is_null()) {
          s.has_sinr = true;
          s.sinr_db = b.at("sinr_db").get<double>();
        }
        if (b.contains("components"))
          for (const auto& c : b.at("components"))
            s.components.push_back(lsm::scene_component_from_json(c));
        s.timestamp_utc = start + static_cast<std::int64_t>(global);
        s.seed = lsm::derive_seed(base_seed, global);
        char name[64];
        std::snprintf(name, sizeof name, "rec_%03zu_%05d.iq", bi, r);
        jobs.push_back({std::move(s), fs::path(a.out_dir) / name});
      }
    }
  } else {
    lsm::SceneSpec s = lsm::scene_spec_from_json(spec_json);
    if (a.seed_set) s.seed = a.seed;
    jobs.push_back({std::move(s), fs::path(a.out_dir) / "rec_000_00000.iq"});
  }

  lsm::parallel_for(jobs.size(), a.threads, [&](std::size_t i) {
    lsm::write_iq_record(lsm::synth_scene(jobs[i].scene), jobs[i].path);
  });

  write_snapshot(fs::path(a.out_dir) / "run-synth.json", "synth",
                 {{"seed", base_seed}, {"records", jobs.size()}},
                 {{"spec", a.spec_file}});
  std::cerr << "synth: wrote " << jobs.size() << " record(s) to " << a.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// preprocess / tokenize
// ---------------------------------------------------------------------------

struct PreprocessArgs {
  std::string in_dir, out_dir, config_file;
  std::vector<std::string> sets;
  int threads = 1;
};

int cmd_preprocess(const PreprocessArgs& a) {
  const auto resolved = resolve_config("tiny", a.config_file, a.sets);
  const auto cfg = resolved.pipeline();
  const auto records = sorted_files(a.in_dir, ".iq");
  if (records.empty()) throw lsm::io_error("no .iq records in " + a.in_dir);
  fs::create_directories(a.out_dir);

  lsm::parallel_for(records.size(), a.threads, [&](std::size_t i) {
    const auto rec = lsm::read_iq_record(records[i]);
    const auto spec = lsm::preprocess_spectrogram(rec, cfg);
    lsm::write_spectrogram(spec, fs::path(a.out_dir) / (records[i].stem().string() + ".psd"));
  });

  write_snapshot(fs::path(a.out_dir) / "run-preprocess.json", "preprocess",
                 resolved.sections.at("pipeline"),
                 {{"in", a.in_dir}, {"records", records.size()}});
  std::cerr << "preprocess: " << records.size() << " record(s) -> " << a.out_dir << "\n";
  return 0;
}

struct TokenizeArgs {
  std::string in_dir, out_file, plan_file, stamp, config_file;
  std::vector<std::string> sets;
};

int cmd_tokenize(const TokenizeArgs& a) {
  const auto resolved = resolve_config("tiny", a.config_file, a.sets);
  const auto cfg = resolved.pipeline();
  const auto dumps = sorted_files(a.in_dir, ".psd");
  if (dumps.empty()) throw lsm::io_error("no .psd dumps in " + a.in_dir);

  lsm::BandPlan plan;
  if (!a.plan_file.empty()) {
    plan = lsm::BandPlan(json::parse(lsm::slurp_text(a.plan_file))
                             .at("band_plan_hz")
                             .get<std::vector<std::int64_t>>());
  } else {
    std::vector<std::int64_t> freqs;
    for (const auto& p : dumps) {
      const auto f = lsm::read_spectrogram(p).prov.center_freq_hz;
      if (std::find(freqs.begin(), freqs.end(), f) == freqs.end()) freqs.push_back(f);
    }
    std::sort(freqs.begin(), freqs.end());
    plan = lsm::BandPlan(freqs);
  }

  std::vector<lsm::TokenSequence> seqs;
  for (const auto& p : dumps) {
    const auto spec = lsm::read_spectrogram(p);
    for (const auto& pair : lsm::split_sequences(spec, cfg.n_in))
      seqs.push_back(lsm::encode_sequence(pair, plan));
  }

  lsm::TokenFileManifest mf;
  mf.plan = plan;
  mf.n_in = cfg.n_in;
  mf.created_utc = default_stamp(a.stamp);
  lsm::write_token_file(a.out_file, seqs, mf);

  write_snapshot(fs::path(a.out_file + ".run.json"), "tokenize",
                 resolved.sections.at("pipeline"),
                 {{"in", a.in_dir}, {"sequences", seqs.size()}});
  std::cerr << "tokenize: " << seqs.size() << " sequence(s) -> " << a.out_file << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// stats / split
// ---------------------------------------------------------------------------

struct StatsArgs {
  std::string tokens, out_file;
};

int cmd_stats(const StatsArgs& a) {
  auto [seqs, mf] = lsm::read_token_file(a.tokens);
  if (seqs.empty()) throw lsm::spec_error("stats: empty token file");
  std::vector<std::int64_t> empty_bands;
  auto stats = lsm::compute_band_stats(seqs, mf.plan, &empty_bands);
  for (auto f : empty_bands)
    std::cerr << "stats: warning: band " << f << " Hz has no sequences, excluded\n";
  if (stats.size() >= 3) {
    lsm::detect_hd(stats);
  } else {
    std::cerr << "stats: fewer than 3 bands, HD detection skipped\n";
  }
  lsm::write_text(a.out_file, lsm::band_stats_to_json(stats).dump(2) + "\n");
  write_snapshot(fs::path(a.out_file + ".run.json"), "stats", json::object(),
                 {{"tokens", a.tokens}});
  std::cerr << "stats: " << stats.size() << " band(s) -> " << a.out_file << "\n";
  return 0;
}

struct SplitArgs {
  std::string tokens, out_dir, fractions = "0.8,0.1,0.1", stamp;
};

int cmd_split(const SplitArgs& a) {
  double f1, f2, f3;
  if (std::sscanf(a.fractions.c_str(), "%lf,%lf,%lf", &f1, &f2, &f3) != 3)
    throw lsm::spec_error("split: --fractions expects three comma-separated numbers");
  auto [seqs, mf] = lsm::read_token_file(a.tokens);
  std::vector<std::int64_t> ts;
  ts.reserve(seqs.size());
  for (const auto& s : seqs)
    ts.push_back(lsm::decode_sequence(s, mf.plan).meta.timestamp_utc);
  const auto idx = lsm::chronological_split(ts, f1, f2, f3);

  fs::create_directories(a.out_dir);
  auto write_part = [&](const char* name, const std::vector<std::size_t>& part) {
    std::vector<lsm::TokenSequence> out;
    out.reserve(part.size());
    for (auto i : part) out.push_back(seqs[i]);
    lsm::TokenFileManifest pm = mf;
    pm.created_utc = default_stamp(a.stamp);
    lsm::write_token_file(fs::path(a.out_dir) / (std::string(name) + ".tok"), out, pm);
  };
  write_part("train", idx.train);
  write_part("val", idx.val);
  write_part("test", idx.test);

  write_snapshot(fs::path(a.out_dir) / "run-split.json", "split",
                 {{"fractions", {f1, f2, f3}}},
                 {{"tokens", a.tokens},
                  {"train", idx.train.size()},
                  {"val", idx.val.size()},
                  {"test", idx.test.size()}});
  std::cerr << "split: " << idx.train.size() << "/" << idx.val.size() << "/"
            << idx.test.size() << " -> " << a.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train / finetune
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string train_tok, val_tok, out_dir, stats_file, preset = "tiny";
  std::string plan_file, config_file, ckpt;  // ckpt used by finetune
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool single_model = false;
  bool save_optimizer = false;
};

int train_one(const lsm::TokenDataset& tr, const lsm::TokenDataset* va,
              lsm::Model& model, lsm::TrainPlan plan, const std::string& label,
              const fs::path& out_dir, bool save_optimizer,
              const json& resolved_model) {
  std::ofstream log(out_dir / ("train-" + label + ".log.jsonl"), std::ios::trunc);
  lsm::AdamOptimizer opt(model, plan);
  const auto res = lsm::train_model(model, tr, va, plan, opt, [&](const lsm::StepLog& lg) {
    json line = {{"step", lg.step},       {"partition", label},
                 {"lr", lg.lr},           {"loss", lg.loss},
                 {"ce", lg.ce},           {"rms", lg.rms},
                 {"grad_norm", lg.grad_norm},
                 {"alphas", lg.alphas},   {"bands", lg.bands}};
    if (lg.has_val) line["val_loss"] = lg.val_loss;
    log << line.dump() << "\n";
  });

  // keep the best-validation weights
  if (!res.best_params_flat.empty()) lsm::restore_params(model, res.best_params_flat);

  lsm::CheckpointMeta meta;
  meta.step = res.steps_done;
  meta.seed = plan.seed;
  meta.loss_history = res.loss_history;
  meta.extra = {{"partition", label},
                {"best_val", res.best_val},
                {"best_val_step", res.best_val_step},
                {"model", resolved_model}};
  const auto path = out_dir / ("model-" + label + ".ckpt");
  lsm::save_checkpoint(model, path, meta,
                       save_optimizer ? &opt.state() : nullptr);
  std::cerr << "train[" << label << "]: " << res.steps_done << " step(s), best val "
            << res.best_val << " -> " << path.string() << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a) {
  auto resolved = resolve_config(a.preset, a.config_file, a.sets);
  if (!a.plan_file.empty()) {
    const json pf = json::parse(lsm::slurp_text(a.plan_file));
    for (auto it = pf.begin(); it != pf.end(); ++it) {
      if (!resolved.sections["plan"].contains(it.key()))
        throw lsm::spec_error("plan file: unknown key: " + it.key());
      resolved.sections["plan"][it.key()] = it.value();
    }
    apply_overrides(resolved.sections, a.sets);  // CLI overrides win over the file
  }
  lsm::TrainPlan plan = resolved.plan();
  if (a.seed_set) plan.seed = a.seed;

  const auto train_all = load_dataset(a.train_tok, a.stats_file);
  lsm::TokenDataset val_all;
  if (!a.val_tok.empty()) val_all = load_dataset(a.val_tok, a.stats_file);
  fs::create_directories(a.out_dir);

  write_snapshot(fs::path(a.out_dir) / "run-train.json", "train", resolved.sections,
                 {{"train", a.train_tok},
                  {"val", a.val_tok},
                  {"stats", a.stats_file},
                  {"preset", a.preset},
                  {"seed", plan.seed},
                  {"single_model", a.single_model}});

  auto subset = [](const lsm::TokenDataset& ds, bool want_hd) {
    lsm::TokenDataset out;
    out.plan = ds.plan;
    out.n_in = ds.n_in;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if ((ds.is_hd[i] != 0) != want_hd) continue;
      out.seqs.push_back(ds.seqs[i]);
      out.timestamps.push_back(ds.timestamps[i]);
      out.band_hz.push_back(ds.band_hz[i]);
      out.is_hd.push_back(ds.is_hd[i]);
    }
    return out;
  };

  if (a.single_model) {
    auto model = lsm::build_model(resolved.model(), plan.seed);
    return train_one(train_all, val_all.size() ? &val_all : nullptr, model, plan,
                     "single", a.out_dir, a.save_optimizer,
                     resolved.sections.at("model"));
  }

  // two-model regime: separate checkpoints per partition, when present
  const auto tr_reg = subset(train_all, false);
  const auto tr_hd = subset(train_all, true);
  const auto va_reg = subset(val_all, false);
  const auto va_hd = subset(val_all, true);
  int rc = 0;
  if (tr_reg.size() > 0) {
    auto model = lsm::build_model(resolved.model(), plan.seed);
    rc |= train_one(tr_reg, va_reg.size() ? &va_reg : nullptr, model, plan, "regular",
                    a.out_dir, a.save_optimizer, resolved.sections.at("model"));
  } else {
    std::cerr << "train: no regular-band sequences, skipping regular model\n";
  }
  if (tr_hd.size() > 0) {
    auto model = lsm::build_model(resolved.model(), lsm::derive_seed(plan.seed, 1));
    lsm::TrainPlan hd_plan = plan;
    rc |= train_one(tr_hd, va_hd.size() ? &va_hd : nullptr, model, hd_plan, "hd",
                    a.out_dir, a.save_optimizer, resolved.sections.at("model"));
  } else {
    std::cerr << "train: no HD-band sequences, skipping HD model\n";
  }
  return rc;
}

int cmd_finetune(const TrainArgs& a) {
  auto resolved = resolve_config(a.preset, a.config_file, a.sets);
  if (!a.plan_file.empty()) {
    const json pf = json::parse(lsm::slurp_text(a.plan_file));
    for (auto it = pf.begin(); it != pf.end(); ++it) {
      if (!resolved.sections["plan"].contains(it.key()))
        throw lsm::spec_error("plan file: unknown key: " + it.key());
      resolved.sections["plan"][it.key()] = it.value();
    }
    apply_overrides(resolved.sections, a.sets);
  }
  lsm::TrainPlan plan = resolved.plan();
  if (a.seed_set) plan.seed = a.seed;

  auto loaded = lsm::load_checkpoint(a.ckpt);
  const auto train_ds = load_dataset(a.train_tok, a.stats_file);
  lsm::TokenDataset val_ds;
  if (!a.val_tok.empty()) val_ds = load_dataset(a.val_tok, a.stats_file);
  fs::create_directories(a.out_dir);

  write_snapshot(fs::path(a.out_dir) / "run-finetune.json", "finetune",
                 resolved.sections,
                 {{"ckpt", a.ckpt},
                  {"train", a.train_tok},
                  {"val", a.val_tok},
                  {"seed", plan.seed}});

  lsm::AdamOptimizer opt(loaded.model, plan);
  if (loaded.has_optimizer) opt.load_state(loaded.opt);

  std::ofstream log(fs::path(a.out_dir) / "train-finetune.log.jsonl", std::ios::trunc);
  const auto res = lsm::train_model(
      loaded.model, train_ds, val_ds.size() ? &val_ds : nullptr, plan, opt,
      [&](const lsm::StepLog& lg) {
        json line = {{"step", lg.step}, {"lr", lg.lr},   {"loss", lg.loss},
                     {"ce", lg.ce},     {"rms", lg.rms}, {"grad_norm", lg.grad_norm}};
        if (lg.has_val) line["val_loss"] = lg.val_loss;
        log << line.dump() << "\n";
      });
  if (!res.best_params_flat.empty() && plan.steps > 0)
    lsm::restore_params(loaded.model, res.best_params_flat);

  lsm::CheckpointMeta meta;
  meta.step = loaded.meta.step + res.steps_done;
  meta.seed = plan.seed;
  meta.loss_history = res.loss_history;
  meta.extra = {{"finetuned_from", fs::path(a.ckpt).filename().string()},
                {"best_val", res.best_val}};
  const auto out = fs::path(a.out_dir) / "model-finetuned.ckpt";
  lsm::save_checkpoint(loaded.model, out, meta, a.save_optimizer ? &opt.state() : nullptr);
  std::cerr << "finetune: " << res.steps_done << " step(s) -> " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// predict / eval / export-plots
// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string ckpt, tokens, out_file, stamp;
  std::uint64_t limit = 0;
  int threads = 1;
};

int cmd_predict(const PredictArgs& a) {
  const auto loaded = lsm::load_checkpoint(a.ckpt);
  auto [seqs, mf] = lsm::read_token_file(a.tokens);
  if (seqs.empty()) throw lsm::spec_error("predict: empty token file");
  const std::size_t n = a.limit ? std::min<std::size_t>(a.limit, seqs.size()) : seqs.size();
  const int n_out = lsm::kPsdLen - mf.n_in;

  std::vector<lsm::TokenSequence> out(n);
  lsm::parallel_for(n, a.threads, [&](std::size_t i) {
    const auto& seq = seqs[i];
    std::vector<lsm::Token> prefix(seq.t.begin(),
                                   seq.t.begin() + lsm::kHeaderLen + mf.n_in);
    const auto pred = lsm::predict_sequence(loaded.model, prefix, mf.n_in, n_out);
    lsm::TokenSequence o = seq;
    for (int j = 0; j < n_out; ++j)
      o.t[static_cast<std::size_t>(lsm::kHeaderLen + mf.n_in + j)] =
          pred[static_cast<std::size_t>(j)];
    out[i] = o;
  });

  lsm::TokenFileManifest om = mf;
  om.preset = mf.preset + "+forecast";
  om.created_utc = default_stamp(a.stamp);
  lsm::write_token_file(a.out_file, out, om);
  write_snapshot(fs::path(a.out_file + ".run.json"), "predict", json::object(),
                 {{"ckpt", a.ckpt}, {"tokens", a.tokens}, {"sequences", n}});
  std::cerr << "predict: " << n << " sequence(s) -> " << a.out_file << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, tokens, out_file, csv_dir, stats_file;
  std::uint64_t limit = 0;
};

int cmd_eval(const EvalArgs& a) {
  const auto loaded = lsm::load_checkpoint(a.ckpt);
  auto ds = load_dataset(a.tokens, a.stats_file);
  // without a stats file, derive HD flags from the evaluated corpus itself
  if (a.stats_file.empty()) {
    auto stats = lsm::compute_band_stats(ds.seqs, ds.plan);
    if (stats.size() >= 3) {
      lsm::detect_hd(stats);
      ds = lsm::make_dataset(std::move(ds.seqs), ds.plan, ds.n_in, stats);
    }
  }

  auto rep = lsm::evaluate(loaded.model, ds, a.limit);
  rep.checkpoint = fs::path(a.ckpt).filename().string();
  lsm::write_text(a.out_file, lsm::report_to_json(rep).dump(2) + "\n");

  if (!a.csv_dir.empty()) {
    fs::create_directories(a.csv_dir);
    lsm::write_text(fs::path(a.csv_dir) / "rmse_per_band.csv", lsm::rmse_csv(rep));
    lsm::write_text(fs::path(a.csv_dir) / "mae_hist.csv", lsm::mae_hist_csv(rep));
    lsm::write_text(fs::path(a.csv_dir) / "kappa.csv", lsm::kappa_csv(rep));
  }
  write_snapshot(fs::path(a.out_file + ".run.json"), "eval", json::object(),
                 {{"ckpt", a.ckpt}, {"tokens", a.tokens}, {"sequences", rep.n_sequences}});
  std::cerr << "eval: model RMSE " << rep.model.overall_rmse_db << " dB, baseline "
            << rep.baseline.overall_rmse_db << " dB -> " << a.out_file << "\n";
  if (lsm::report_has_nan(rep)) throw lsm::error("eval: NaN metric in report");
  return 0;
}

struct InfoArgs {
  std::string path;
};

// Type-sniffing metadata inspector for every on-disk artifact.
int cmd_info(const InfoArgs& a) {
  const fs::path p(a.path);
  if (!fs::exists(p)) throw lsm::io_error("no such file: " + a.path);
  const auto ext = p.extension().string();
  json out;
  if (ext == ".iq") {
    const auto rec = lsm::read_iq_record(p);
    out = {{"type", "iq_record"},
           {"site_id", rec.site_id},
           {"center_freq_hz", rec.center_freq_hz},
           {"sample_rate_hz", rec.sample_rate_hz},
           {"gain_db", rec.gain_db},
           {"timestamp_utc", lsm::format_iso8601(rec.timestamp_utc)},
           {"duration_s", rec.duration_s},
           {"samples", rec.samples.size()}};
  } else if (ext == ".psd") {
    const auto s = lsm::read_spectrogram(p);
    out = {{"type", "spectrogram"},
           {"n_s", s.n_s},
           {"n_t", s.n_t},
           {"bin_bandwidth_hz", s.bin_bandwidth_hz},
           {"slice_duration_s", s.slice_duration_s},
           {"site_id", s.prov.site_id},
           {"center_freq_hz", s.prov.center_freq_hz},
           {"timestamp_utc", lsm::format_iso8601(s.prov.timestamp_utc)}};
  } else if (ext == ".tok" || ext == ".bin") {
    const auto [seqs, mf] = lsm::read_token_file(p);
    out = {{"type", "token_file"},
           {"count", seqs.size()},
           {"record_bytes", lsm::kSeqLen},
           {"n_in", mf.n_in},
           {"band_plan_hz", mf.plan.freqs_hz},
           {"preset", mf.preset}};
    if (!mf.created_utc.empty()) out["created_utc"] = mf.created_utc;
  } else if (ext == ".ckpt") {
    const auto loaded = lsm::load_checkpoint(p);
    out = {{"type", "checkpoint"},
           {"config", lsm::config_to_json(loaded.model.cfg)},
           {"parameters", loaded.model.total_params()},
           {"step", loaded.meta.step},
           {"seed", loaded.meta.seed},
           {"has_optimizer", loaded.has_optimizer}};
    if (!loaded.meta.extra.is_null()) out["extra"] = loaded.meta.extra;
  } else {
    throw lsm::spec_error("info: unrecognized extension: " + ext);
  }
  std::printf("%s\n", out.dump(2).c_str());
  return 0;
}

struct ExportArgs {
  std::string report, stats_file, out_dir;
};

int cmd_export_plots(const ExportArgs& a) {
  fs::create_directories(a.out_dir);
  if (!a.report.empty()) {
    const auto rep = lsm::report_from_json(json::parse(lsm::slurp_text(a.report)));
    lsm::write_text(fs::path(a.out_dir) / "rmse_per_band.csv", lsm::rmse_csv(rep));
    lsm::write_text(fs::path(a.out_dir) / "mae_hist.csv", lsm::mae_hist_csv(rep));
    lsm::write_text(fs::path(a.out_dir) / "kappa.csv", lsm::kappa_csv(rep));
  }
  if (!a.stats_file.empty()) {
    const auto stats =
        lsm::band_stats_from_json(json::parse(lsm::slurp_text(a.stats_file)));
    lsm::write_text(fs::path(a.out_dir) / "sd_mad.csv", lsm::sd_mad_csv(stats));
  }
  if (a.report.empty() && a.stats_file.empty())
    throw lsm::spec_error("export-plots: need --report and/or --stats");
  std::cerr << "export-plots: tables -> " << a.out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lsm -- tokenized RF spectrum forecasting toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate synthetic IQ records from a scene spec");
  c_synth->add_option("--spec", synth.spec_file, "Scene or corpus spec JSON")->required();
  c_synth->add_option("--out", synth.out_dir, "Output directory")->required();
  auto* synth_seed = c_synth->add_option("--seed", synth.seed, "Override the spec seed");
  c_synth->add_option("--threads", synth.threads, "Worker threads (1 = reference)");

  PreprocessArgs pre;
  auto* c_pre = app.add_subcommand("preprocess", "IQ records -> downsampled PSD spectrograms");
  c_pre->add_option("--in", pre.in_dir, "Directory of .iq records")->required();
  c_pre->add_option("--out", pre.out_dir, "Output directory for .psd dumps")->required();
  c_pre->add_option("--config", pre.config_file, "Config JSON (pipeline section)");
  c_pre->add_option("--set", pre.sets, "Override, e.g. pipeline.n_in=128");
  c_pre->add_option("--threads", pre.threads, "Worker threads (1 = reference)");

  TokenizeArgs tok;
  auto* c_tok = app.add_subcommand("tokenize", "PSD spectrograms -> 292-byte token sequences");
  c_tok->add_option("--in", tok.in_dir, "Directory of .psd dumps")->required();
  c_tok->add_option("--out", tok.out_file, "Output token file")->required();
  c_tok->add_option("--plan", tok.plan_file, "Band plan JSON (default: derived from dumps)");
  c_tok->add_option("--stamp", tok.stamp, "Manifest creation time (ISO-8601) for reproducible runs");
  c_tok->add_option("--config", tok.config_file, "Config JSON (pipeline section)");
  c_tok->add_option("--set", tok.sets, "Override, e.g. pipeline.n_in=128");

  StatsArgs stats;
  auto* c_stats = app.add_subcommand("stats", "Per-band SD/MAD and HD flags");
  c_stats->add_option("--tokens", stats.tokens, "Token file")->required();
  c_stats->add_option("--out", stats.out_file, "Output stats JSON")->required();

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Chronological train/val/test split");
  c_split->add_option("--tokens", split.tokens, "Token file")->required();
  c_split->add_option("--out", split.out_dir, "Output directory")->required();
  c_split->add_option("--fractions", split.fractions, "train,val,test (default 0.8,0.1,0.1)");
  c_split->add_option("--stamp", split.stamp, "Manifest creation time for reproducible runs");

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train forecaster checkpoint(s)");
  c_train->add_option("--train", train.train_tok, "Training token file")->required();
  c_train->add_option("--val", train.val_tok, "Validation token file");
  c_train->add_option("--out", train.out_dir, "Output directory")->required();
  c_train->add_option("--stats", train.stats_file, "Band stats JSON (for HD routing)");
  c_train->add_option("--preset", train.preset,
                      "Architecture preset: tiny|lsm-gpt|lsm-phi|lsm-gemma|lsm-mistral|lsm-llama");
  c_train->add_option("--plan", train.plan_file, "Train plan JSON");
  c_train->add_option("--config", train.config_file, "Config JSON (model/plan/pipeline)");
  c_train->add_option("--set", train.sets, "Override, e.g. plan.lr=0.001 or model.n_layers=4");
  auto* train_seed = c_train->add_option("--seed", train.seed, "Training seed");
  c_train->add_flag("--single-model", train.single_model,
                    "Train one model on all bands instead of HD/regular pair");
  c_train->add_flag("--save-optimizer", train.save_optimizer, "Embed Adam state in checkpoints");

  TrainArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Continue training from a checkpoint");
  c_ft->add_option("--ckpt", ft.ckpt, "Input checkpoint")->required();
  c_ft->add_option("--train", ft.train_tok, "Training token file")->required();
  c_ft->add_option("--val", ft.val_tok, "Validation token file");
  c_ft->add_option("--out", ft.out_dir, "Output directory")->required();
  c_ft->add_option("--stats", ft.stats_file, "Band stats JSON");
  c_ft->add_option("--plan", ft.plan_file, "Train plan JSON");
  c_ft->add_option("--config", ft.config_file, "Config JSON");
  c_ft->add_option("--set", ft.sets, "Override, e.g. plan.steps=100");
  auto* ft_seed = c_ft->add_option("--seed", ft.seed, "Fine-tuning seed");
  c_ft->add_flag("--save-optimizer", ft.save_optimizer, "Embed Adam state in checkpoint");

  PredictArgs pred;
  auto* c_pred = app.add_subcommand("predict", "Autoregressive forecasts for token sequences");
  c_pred->add_option("--ckpt", pred.ckpt, "Checkpoint")->required();
  c_pred->add_option("--tokens", pred.tokens, "Token file with observed prefixes")->required();
  c_pred->add_option("--out", pred.out_file, "Output token file with forecast suffixes")->required();
  c_pred->add_option("--limit", pred.limit, "Forecast at most N sequences");
  c_pred->add_option("--stamp", pred.stamp, "Manifest creation time for reproducible runs");
  c_pred->add_option("--threads", pred.threads, "Worker threads (1 = reference)");

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Forecast + metrics report (RMSE/MAE/kappa)");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_eval->add_option("--tokens", ev.tokens, "Token file with ground truth")->required();
  c_eval->add_option("--out", ev.out_file, "Report JSON path")->required();
  c_eval->add_option("--csv-dir", ev.csv_dir, "Also write CSV tables here");
  c_eval->add_option("--stats", ev.stats_file, "Band stats JSON (HD subset for kappa)");
  c_eval->add_option("--limit", ev.limit, "Evaluate at most N sequences");

  ExportArgs ex;
  auto* c_ex = app.add_subcommand("export-plots", "Plot-ready CSV tables from report/stats");
  c_ex->add_option("--report", ex.report, "Eval report JSON");
  c_ex->add_option("--stats", ex.stats_file, "Band stats JSON");
  c_ex->add_option("--out", ex.out_dir, "Output directory")->required();

  InfoArgs info;
  auto* c_info = app.add_subcommand("info", "Inspect a record/spectrogram/token/checkpoint file");
  c_info->add_option("--path", info.path, "File to inspect (.iq/.psd/.tok/.bin/.ckpt)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    synth.seed_set = synth_seed->count() > 0;
    train.seed_set = train_seed->count() > 0;
    ft.seed_set = ft_seed->count() > 0;
    if (c_synth->parsed()) return cmd_synth(synth);
    if (c_pre->parsed()) return cmd_preprocess(pre);
    if (c_tok->parsed()) return cmd_tokenize(tok);
    if (c_stats->parsed()) return cmd_stats(stats);
    if (c_split->parsed()) return cmd_split(split);
    if (c_train->parsed()) return cmd_train(train);
    if (c_ft->parsed()) return cmd_finetune(ft);
    if (c_pred->parsed()) return cmd_predict(pred);
    if (c_eval->parsed()) return cmd_eval(ev);
    if (c_ex->parsed()) return cmd_export_plots(ex);
    if (c_info->parsed()) return cmd_info(info);
  } catch (const lsm::error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad JSON input: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
