#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "transadapter/binary_io.hpp"
#include "transadapter/training.hpp"

namespace transadapter {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace checkpoint_names {
inline const std::string momentum_prefix = "__optim__/momentum/";
inline const std::string hyper = "__optim__/hyper";       // [momentum, weight_decay, base_lr]
inline const std::string step = "__sched__/step";         // [step]
inline const std::string backbone = "__meta__/backbone";  // BackboneConfig fields
inline const std::string grl = "__meta__/grl";            // [placement, lambda]
} // namespace checkpoint_names

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

inline std::vector<std::uint8_t> encode_tensors(const std::vector<NamedArray> &tensors) {
  ByteWriter w;
  w.raw("TADP");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto &t : tensors) {
    if (shape_numel(t.shape) != t.values.size())
      throw ContractError("checkpoint: tensor " + t.name + " payload does not match its shape");
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name);
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto e : t.shape)
      w.u64(e);
    for (double v : t.values)
      w.f64(v);
  }
  w.seal();
  return w.bytes();
}

inline std::vector<NamedArray> decode_tensors(std::span<const std::uint8_t> bytes, const std::string &what) {
  ByteReader r(bytes, what);
  if (r.remaining() < 4 || r.str(4) != "TADP")
    throw FormatError(what + ": bad magic, expected TADP");
  r.verify_seal();
  const auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(what + ": checkpoint version " + std::to_string(version) + ", this build reads " +
                      std::to_string(kCheckpointVersion));
  const std::uint32_t count = r.u32();
  std::vector<NamedArray> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray t;
    t.name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint64_t e = r.u64();
      if (e == 0 || numel > r.remaining() / e)
        r.fail("implausible extent for tensor " + t.name);
      t.shape.push_back(e);
      numel *= e;
    }
    if (numel * 8 > r.remaining())
      r.fail("truncated payload for tensor " + t.name);
    t.values.resize(numel);
    for (auto &v : t.values)
      v = r.f64();
    out.push_back(std::move(t));
  }
  if (r.remaining() != 0)
    r.fail(std::to_string(r.remaining()) + " trailing bytes after last tensor");
  return out;
}

struct TrainingState {
  TransAdapterModel model;
  OptimState optim;
};

inline std::vector<NamedArray> checkpoint_tensors(const TransAdapterModel &model, const OptimState &optim) {
  namespace cn = checkpoint_names;
  std::vector<NamedArray> out;
  const auto params = model.parameters();
  if (optim.buffers.size() != params.size())
    throw ContractError("checkpoint: optimizer state does not match the model");
  for (const auto &p : params)
    out.push_back({p.name, p.tensor.shape(), p.tensor.values()});
  for (std::size_t i = 0; i < params.size(); ++i)
    out.push_back({cn::momentum_prefix + params[i].name, params[i].tensor.shape(), optim.buffers[i]});
  out.push_back({cn::hyper, {3}, {optim.momentum, optim.weight_decay, optim.base_lr}});
  out.push_back({cn::step, {1}, {static_cast<double>(optim.step)}});
  const auto &c = model.config;
  out.push_back({cn::backbone,
                 {8},
                 {double(c.image_size), double(c.patch_size), double(c.embed_dim), double(c.depth),
                  double(c.heads), double(c.window), double(c.shift), double(c.num_classes)}});
  const auto &g = model.gdd_local.config;
  out.push_back({cn::grl, {2}, {g.grl == GrlPlacement::before_stack ? 0.0 : 1.0, g.grl_lambda}});
  return out;
}

inline std::vector<std::uint8_t> encode_checkpoint(const TransAdapterModel &model, const OptimState &optim) {
  return encode_tensors(checkpoint_tensors(model, optim));
}

inline TrainingState decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string &what = "checkpoint") {
  namespace cn = checkpoint_names;
  std::map<std::string, NamedArray> by_name;
  for (auto &t : decode_tensors(bytes, what)) {
    const std::string name = t.name;
    if (!by_name.emplace(name, std::move(t)).second)
      throw FormatError(what + ": duplicate tensor name " + name);
  }
  auto take_meta = [&](const std::string &name, std::size_t n) {
    auto it = by_name.find(name);
    if (it == by_name.end() || it->second.values.size() != n)
      throw FormatError(what + ": missing or malformed " + name);
    std::vector<double> v = it->second.values;
    by_name.erase(it);
    return v;
  };
  auto as_size = [&](double v) {
    if (!(v >= 0.0) || v != std::floor(v))
      throw FormatError(what + ": non-integral metadata value");
    return static_cast<std::size_t>(v);
  };
  const auto bb = take_meta(cn::backbone, 8);
  BackboneConfig cfg;
  cfg.image_size = as_size(bb[0]);
  cfg.patch_size = as_size(bb[1]);
  cfg.embed_dim = as_size(bb[2]);
  cfg.depth = as_size(bb[3]);
  cfg.heads = as_size(bb[4]);
  cfg.window = as_size(bb[5]);
  cfg.shift = as_size(bb[6]);
  cfg.num_classes = as_size(bb[7]);
  const auto grl = take_meta(cn::grl, 2);
  const auto hyper = take_meta(cn::hyper, 3);
  const auto step = take_meta(cn::step, 1);

  TrainingState s{TransAdapterModel::make(cfg, 0, grl[0] == 0.0 ? GrlPlacement::before_stack
                                                                : GrlPlacement::after_stack),
                  {}};
  for (GddParams *g : {&s.model.gdd_attention, &s.model.gdd_local, &s.model.gdd_global})
    g->config.grl_lambda = grl[1];
  s.optim.momentum = hyper[0];
  s.optim.weight_decay = hyper[1];
  s.optim.base_lr = hyper[2];
  s.optim.step = as_size(step[0]);

  std::vector<std::string> missing;
  auto fill_from = [&](const std::string &name, const Shape &shape, std::span<double> dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      missing.push_back(name);
      return;
    }
    if (it->second.shape != shape)
      throw FormatError(what + ": tensor " + name + " has shape " + shape_str(it->second.shape) +
                        ", model expects " + shape_str(shape));
    std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    by_name.erase(it);
  };
  for (const auto &p : s.model.parameters()) {
    Tensor t = p.tensor;
    fill_from(p.name, t.shape(), t.data());
    s.optim.buffers.emplace_back(t.numel(), 0.0);
    fill_from(cn::momentum_prefix + p.name, t.shape(), s.optim.buffers.back());
  }
  if (!missing.empty() || !by_name.empty()) {
    std::string msg = what + ": parameter names do not match the model.";
    if (!missing.empty()) {
      msg += " Missing:";
      for (const auto &n : missing)
        msg += " " + n;
      msg += ".";
    }
    if (!by_name.empty()) {
      msg += " Unknown:";
      for (const auto &[n, _] : by_name)
        msg += " " + n;
      msg += ".";
    }
    throw FormatError(msg);
  }
  return s;
}

inline void save_checkpoint(const TransAdapterModel &model, const OptimState &optim,
                            const std::filesystem::path &path) {
  write_file(path, encode_checkpoint(model, optim));
}

inline TrainingState load_checkpoint(const std::filesystem::path &path) {
  return decode_checkpoint(read_file(path), path.string());
}

} // namespace transadapter
