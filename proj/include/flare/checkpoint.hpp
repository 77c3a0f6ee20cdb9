#pragma once

// FLCK checkpoints.
//
// Layout (little-endian): "FLCK", u32 version = 1, u64 JSON length, UTF-8 JSON
// metadata, u64 tensor count, tensors; then a u8 optimizer flag and, when set,
// a second tensor section holding the "m.<name>" and "v.<name>" moments.
// Each tensor is u16 name length, name, u8 rank, u64 dims[rank], f32 data.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flare/errors.hpp"
#include "flare/io.hpp"
#include "flare/model.hpp"
#include "flare/optim.hpp"
#include "flare/tensor.hpp"

namespace flare {

inline constexpr char kCheckpointMagic[4] = {'F', 'L', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  std::vector<NamedTensor> moments;  // all m.* in parameter order, then all v.*
  friend bool operator==(const OptimizerSnapshot&, const OptimizerSnapshot&) = default;
};

struct Checkpoint {
  ModelConfig model;
  std::uint64_t schedule_step = 0;
  // Free-form run state (train config, norm stats, history, epoch).
  nlohmann::json run = nlohmann::json::object();
  std::vector<NamedTensor> params;
  std::optional<OptimizerSnapshot> optimizer;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline void put_tensors(io::ByteWriter& w, const std::vector<NamedTensor>& ts) {
  w.put<std::uint64_t>(ts.size());
  for (const auto& t : ts) {
    if (t.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + t.name);
    if (t.value.rank() > 0xFF) throw FormatError("tensor rank too large: " + t.name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.str(t.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) w.put<std::uint64_t>(d);
    w.array(t.value.storage());
  }
}

inline std::vector<NamedTensor> get_tensors(io::ByteReader& r, const std::string& section) {
  const auto count = r.get<std::uint64_t>(section + " tensor count");
  std::vector<NamedTensor> ts;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string idx = section + " tensor #" + std::to_string(i);
    const auto len = r.get<std::uint16_t>(idx + " name length");
    NamedTensor t;
    t.name = r.str(len, idx + " name");
    const std::string what = "tensor '" + t.name + "'";
    const auto rank = r.get<std::uint8_t>(what + " rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>(what + " dims");
    std::size_t numel = 1;
    for (std::size_t d : shape) {
      if (d != 0 && numel > r.remaining() / d) r.need(r.remaining() + 1, what + " data");
      numel *= d;
    }
    t.value = Tensor<float>(shape, r.array<float>(numel, what + " data"));
    ts.push_back(std::move(t));
  }
  return ts;
}

}  // namespace detail

inline std::vector<char> encode_checkpoint(const Checkpoint& c) {
  nlohmann::json meta = {{"model", c.model}, {"schedule_step", c.schedule_step}, {"run", c.run}};
  if (c.optimizer) meta["optimizer_step"] = c.optimizer->step;
  const std::string js = meta.dump();

  io::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint64_t>(js.size());
  w.str(js);
  detail::put_tensors(w, c.params);
  w.put<std::uint8_t>(c.optimizer ? 1 : 0);
  if (c.optimizer) detail::put_tensors(w, c.optimizer->moments);
  return w.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<char> bytes, const std::string& origin = "checkpoint") {
  io::ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.str(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw BadMagicError(origin + ": not a FLCK checkpoint (bad magic)");
  }
  try {
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
      throw UnsupportedVersionError(origin + ": unsupported checkpoint version " +
                                    std::to_string(version));
    }
    const auto len = r.get<std::uint64_t>("config length");
    nlohmann::json meta;
    try {
      meta = nlohmann::json::parse(r.str(len, "config JSON"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(origin + ": malformed config JSON: " + e.what());
    }
    Checkpoint c;
    try {
      c.model = meta.at("model").get<ModelConfig>();
      c.schedule_step = meta.at("schedule_step").get<std::uint64_t>();
      c.run = meta.at("run");
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(origin + ": incomplete config JSON: " + e.what());
    }
    c.params = detail::get_tensors(r, "parameter");
    const auto flag = r.get<std::uint8_t>("optimizer flag");
    if (flag > 1) throw FormatError(origin + ": invalid optimizer flag");
    if (flag == 1) {
      OptimizerSnapshot s;
      s.step = meta.value("optimizer_step", std::uint64_t{0});
      s.moments = detail::get_tensors(r, "optimizer");
      c.optimizer = std::move(s);
    }
    if (!r.at_end()) {
      throw FormatError(origin + ": " + std::to_string(r.remaining()) + " trailing bytes");
    }
    return c;
  } catch (const TruncatedError& e) {
    throw TruncatedError(origin + ": " + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  io::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Conversion between parameter structs and named tensors.

template <class T>
std::vector<NamedTensor> named_tensors(const ModelParams<Tensor<T>>& p,
                                       const std::string& prefix = "") {
  std::vector<NamedTensor> out;
  for_each_param(p, [&](const std::string& name, const Tensor<T>& t) {
    out.push_back({prefix + name, t.template cast<float>()});
  });
  return out;
}

namespace detail {

template <class T>
void fill_from(ModelParams<Tensor<T>>& p, const std::vector<NamedTensor>& src, std::size_t offset,
               const std::string& prefix) {
  std::size_t i = offset;
  for_each_param(p, [&](const std::string& name, Tensor<T>& t) {
    if (i >= src.size()) {
      throw TensorMismatchError("checkpoint is missing tensor '" + prefix + name + "'");
    }
    const NamedTensor& s = src[i++];
    if (s.name != prefix + name) {
      throw TensorMismatchError("checkpoint tensor '" + s.name + "' where '" + prefix + name +
                                "' was expected");
    }
    if (s.value.shape() != t.shape()) {
      throw TensorMismatchError("checkpoint tensor '" + s.name + "' has shape " +
                                shape_str(s.value.shape()) + ", model expects " +
                                shape_str(t.shape()));
    }
    t = s.value.template cast<T>();
  });
}

template <class T>
std::size_t leaf_count(const ModelParams<Tensor<T>>& p) {
  std::size_t n = 0;
  for_each_param(p, [&](const std::string&, const Tensor<T>&) { ++n; });
  return n;
}

}  // namespace detail

// Rebuilds the parameter set for the checkpoint's model config. The tensor
// list must match the config's layout exactly.
template <class T>
ModelParams<Tensor<T>> params_from_checkpoint(const Checkpoint& c) {
  ModelParams<Tensor<T>> p = make_params<T>(c.model);
  const std::size_t expected = detail::leaf_count(p);
  if (c.params.size() != expected) {
    throw TensorMismatchError("checkpoint holds " + std::to_string(c.params.size()) +
                              " tensors, model config implies " + std::to_string(expected));
  }
  detail::fill_from(p, c.params, 0, "");
  return p;
}

template <class T>
OptimizerSnapshot snapshot_optimizer(const ModelParams<Tensor<T>>& layout,
                                     const OptimizerState<T>& s) {
  OptimizerSnapshot out;
  out.step = s.step;
  std::vector<std::string> names;
  for_each_param(layout, [&](const std::string& name, const Tensor<T>&) { names.push_back(name); });
  if (names.size() != s.m.size() || names.size() != s.v.size()) {
    throw DimensionError("snapshot_optimizer: state does not match parameter layout");
  }
  for (std::size_t i = 0; i < names.size(); ++i)
    out.moments.push_back({"m." + names[i], s.m[i].template cast<float>()});
  for (std::size_t i = 0; i < names.size(); ++i)
    out.moments.push_back({"v." + names[i], s.v[i].template cast<float>()});
  return out;
}

template <class T>
OptimizerState<T> optimizer_from_snapshot(const ModelConfig& cfg, const OptimizerSnapshot& s) {
  ModelParams<Tensor<T>> m = make_params<T>(cfg), v = make_params<T>(cfg);
  const std::size_t leaves = detail::leaf_count(m);
  if (s.moments.size() != 2 * leaves) {
    throw TensorMismatchError("optimizer section holds " + std::to_string(s.moments.size()) +
                              " tensors, model config implies " + std::to_string(2 * leaves));
  }
  detail::fill_from(m, s.moments, 0, "m.");
  detail::fill_from(v, s.moments, leaves, "v.");
  OptimizerState<T> out;
  out.step = s.step;
  for_each_param(m, [&](const std::string&, Tensor<T>& t) { out.m.push_back(std::move(t)); });
  for_each_param(v, [&](const std::string&, Tensor<T>& t) { out.v.push_back(std::move(t)); });
  return out;
}

}  // namespace flare
