#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "lsm/binio.hpp"
#include "lsm/common.hpp"
#include "lsm/model.hpp"

// Checkpoint container (all integers little-endian):
//   magic "LSMCKPT1" | u32 version | u64 len + config JSON |
//   u64 len + meta JSON | u32 tensor count |
//   per tensor: u16 name len, name, u8 dtype (0 = f32), u8 ndim,
//               u64 dims..., payload (row-major f32 LE)
//
// Model parameters appear exactly once each; optional Adam moments are
// stored as extra tensors named "opt.m.<param>" / "opt.v.<param>".

namespace lsm {

constexpr char kCkptMagic[8] = {'L', 'S', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kCkptVersion = 1;

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  nlohmann::json extra;  // free-form (partition label, plan digest, ...)
};

struct OptimizerState {
  std::uint64_t step = 0;
  std::vector<std::vector<double>> m, v;  // aligned with Model::params
};

namespace detail {

inline void write_tensor(std::ostream& os, const std::string& name,
                         const std::vector<int>& shape, const float* data,
                         std::size_t n) {
  put_u16(os, static_cast<std::uint16_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u8(os, 0);  // dtype f32
  put_u8(os, static_cast<std::uint8_t>(shape.size()));
  for (int d : shape) put_u64(os, static_cast<std::uint64_t>(d));
  for (std::size_t i = 0; i < n; ++i) put_f32(os, data[i]);
}

}  // namespace detail

inline void save_checkpoint(const Model& m, const std::filesystem::path& path,
                            const CheckpointMeta& meta = {},
                            const OptimizerState* opt = nullptr) {
  auto os = open_out(path);
  os.write(kCkptMagic, 8);
  put_u32(os, kCkptVersion);

  const std::string cfg = config_to_json(m.cfg).dump();
  put_u64(os, cfg.size());
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));

  nlohmann::json mj;
  mj["step"] = meta.step;
  mj["seed"] = meta.seed;
  mj["loss_history"] = meta.loss_history;
  if (!meta.extra.is_null()) mj["extra"] = meta.extra;
  mj["has_optimizer"] = opt != nullptr;
  if (opt) mj["opt_step"] = opt->step;
  const std::string ms = mj.dump();
  put_u64(os, ms.size());
  os.write(ms.data(), static_cast<std::streamsize>(ms.size()));

  const std::uint32_t count =
      static_cast<std::uint32_t>(m.params.size() * (opt ? 3 : 1));
  put_u32(os, count);
  std::vector<float> tmp;
  for (const auto& t : m.params)
    detail::write_tensor(os, t.name, t.shape, t.w.data(), t.w.size());
  if (opt) {
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      const auto& t = m.params[i];
      tmp.assign(opt->m[i].begin(), opt->m[i].end());
      detail::write_tensor(os, "opt.m." + t.name, t.shape, tmp.data(), tmp.size());
      tmp.assign(opt->v[i].begin(), opt->v[i].end());
      detail::write_tensor(os, "opt.v." + t.name, t.shape, tmp.data(), tmp.size());
    }
  }
  if (!os) throw io_error("short write: " + path.string());
}

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
  bool has_optimizer = false;
  OptimizerState opt;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  auto is = open_in(path);
  StreamReader r(is, "checkpoint " + path.string());

  char magic[8];
  r.read_exact(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0)
    throw format_error("not a checkpoint file: " + path.string());
  const auto version = r.u32();
  if (version != kCkptVersion)
    throw format_error("unsupported checkpoint version " + std::to_string(version));

  LoadedCheckpoint out;
  nlohmann::json cfg_json, meta_json;
  try {
    cfg_json = nlohmann::json::parse(r.str(static_cast<std::size_t>(r.u64())));
    meta_json = nlohmann::json::parse(r.str(static_cast<std::size_t>(r.u64())));
  } catch (const nlohmann::json::exception& e) {
    throw format_error("corrupt checkpoint JSON: " + std::string(e.what()));
  }
  const LsmConfig cfg = config_from_json(cfg_json);
  out.meta.step = meta_json.value("step", std::uint64_t{0});
  out.meta.seed = meta_json.value("seed", std::uint64_t{0});
  out.meta.loss_history = meta_json.value("loss_history", std::vector<double>{});
  if (meta_json.contains("extra")) out.meta.extra = meta_json.at("extra");
  out.has_optimizer = meta_json.value("has_optimizer", false);
  out.opt.step = meta_json.value("opt_step", std::uint64_t{0});

  struct Raw {
    std::vector<int> shape;
    std::vector<float> data;
  };
  std::map<std::string, Raw> tensors;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.u16());
    const std::uint8_t dtype = r.u8();
    if (dtype != 0)
      throw format_error("unsupported tensor dtype " + std::to_string(dtype) +
                         " for " + name);
    const int ndim = r.u8();
    Raw raw;
    std::size_t n = 1;
    for (int dim = 0; dim < ndim; ++dim) {
      const auto v = r.u64();
      raw.shape.push_back(static_cast<int>(v));
      n *= static_cast<std::size_t>(v);
    }
    raw.data.resize(n);
    for (auto& f : raw.data) f = r.f32();
    if (!tensors.emplace(name, std::move(raw)).second)
      throw format_error("duplicate tensor in checkpoint: " + name);
  }

  // Rebuild the model against the config's allocation plan; every parameter
  // must be present exactly once with the right shape.
  out.model.cfg = cfg;
  for (const auto& ts : param_shapes(cfg)) {
    auto it = tensors.find(ts.name);
    if (it == tensors.end())
      throw format_error("checkpoint missing tensor: " + ts.name);
    if (it->second.shape != ts.shape)
      throw format_error("checkpoint tensor shape mismatch: " + ts.name);
    Tensor t;
    t.name = ts.name;
    t.shape = ts.shape;
    t.w = std::move(it->second.data);
    out.model.params.push_back(std::move(t));
    tensors.erase(it);
  }
  detail::wire_indices(out.model);

  if (out.has_optimizer) {
    out.opt.m.resize(out.model.params.size());
    out.opt.v.resize(out.model.params.size());
    for (std::size_t i = 0; i < out.model.params.size(); ++i) {
      const auto& name = out.model.params[i].name;
      for (auto [vec, prefix] : {std::pair{&out.opt.m[i], "opt.m."},
                                 std::pair{&out.opt.v[i], "opt.v."}}) {
        auto it = tensors.find(prefix + name);
        if (it == tensors.end())
          throw format_error("checkpoint missing optimizer tensor for " + name);
        vec->assign(it->second.data.begin(), it->second.data.end());
        tensors.erase(it);
      }
    }
  }
  for (const auto& [name, raw] : tensors)
    throw format_error("unexpected tensor in checkpoint: " + name);
  return out;
}

}  // namespace lsm
