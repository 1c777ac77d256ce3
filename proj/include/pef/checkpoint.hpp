#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pef/kv.hpp"
#include "pef/model.hpp"
#include "pef/tensor.hpp"

namespace pef {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& what)
      : std::runtime_error(what) {}
};

// Little-endian binary container: magic, version, embedded config text,
// length-prefixed name/shape/data records, optional optimizer moments.
// Values round-trip bit-exactly.
template <class Real>
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<Real>>> params;
  bool has_optimizer_state = false;
  std::int64_t optimizer_step = 0;
  std::vector<std::pair<std::string, Tensor<Real>>> moments1, moments2;
  std::int32_t epoch = 0;
};

namespace ckpt_detail {

constexpr char kMagic[8] = {'P', 'E', 'F', 'C', 'K', 'P', 'T', '\n'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw CheckpointError("corrupt checkpoint: truncated file");
  return v;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in) {
  const auto len = read_pod<std::uint32_t>(in);
  if (len > (1u << 24)) throw CheckpointError("corrupt checkpoint: bad string");
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (!in) throw CheckpointError("corrupt checkpoint: truncated file");
  return s;
}

template <class Real>
void write_tensor(std::ostream& out, const std::string& name,
                  const Tensor<Real>& t) {
  write_string(out, name);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (int i = 0; i < t.ndim(); ++i) write_pod<std::int32_t>(out, t.dim(i));
  out.write(reinterpret_cast<const char*>(t.data().data()),
            static_cast<std::streamsize>(t.size() * sizeof(Real)));
}

template <class Real>
std::pair<std::string, Tensor<Real>> read_tensor(std::istream& in) {
  const std::string name = read_string(in);
  const auto ndim = read_pod<std::uint32_t>(in);
  if (ndim > 8) throw CheckpointError("corrupt checkpoint: bad rank");
  Shape shape(ndim);
  for (auto& e : shape) e = read_pod<std::int32_t>(in);
  std::vector<Real> data(numel(shape));
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(Real)));
  if (!in) throw CheckpointError("corrupt checkpoint: truncated tensor data");
  return {name, Tensor<Real>(std::move(shape), std::move(data))};
}

}  // namespace ckpt_detail

template <class Real>
void save_checkpoint(const std::string& path, const Checkpoint<Real>& ck) {
  namespace d = ckpt_detail;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint: " + path);
  out.write(d::kMagic, sizeof(d::kMagic));
  d::write_pod<std::uint32_t>(out, d::kVersion);
  d::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(sizeof(Real)));
  d::write_string(out, kv_to_string(ck.config.to_kv()));
  d::write_pod<std::int32_t>(out, ck.epoch);
  d::write_pod<std::uint64_t>(out, ck.params.size());
  for (const auto& [name, t] : ck.params) d::write_tensor(out, name, t);
  d::write_pod<std::uint8_t>(out, ck.has_optimizer_state ? 1 : 0);
  if (ck.has_optimizer_state) {
    d::write_pod<std::int64_t>(out, ck.optimizer_step);
    d::write_pod<std::uint64_t>(out, ck.moments1.size());
    for (const auto& [name, t] : ck.moments1) d::write_tensor(out, name, t);
    for (const auto& [name, t] : ck.moments2) d::write_tensor(out, name, t);
  }
  if (!out) throw CheckpointError("write failure: " + path);
}

template <class Real>
Checkpoint<Real> load_checkpoint(const std::string& path) {
  namespace d = ckpt_detail;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, d::kMagic, sizeof(magic)) != 0)
    throw CheckpointError("corrupt checkpoint: bad magic");
  const auto version = d::read_pod<std::uint32_t>(in);
  if (version != d::kVersion)
    throw CheckpointError("checkpoint version mismatch: " +
                          std::to_string(version));
  const auto real_size = d::read_pod<std::uint32_t>(in);
  if (real_size != sizeof(Real))
    throw CheckpointError("checkpoint precision mismatch");
  Checkpoint<Real> ck;
  ck.config = ModelConfig::from_kv(parse_kv_string(d::read_string(in)));
  ck.epoch = d::read_pod<std::int32_t>(in);
  const auto count = d::read_pod<std::uint64_t>(in);
  if (count > (1u << 20)) throw CheckpointError("corrupt checkpoint: count");
  ck.params.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i)
    ck.params.push_back(d::read_tensor<Real>(in));
  ck.has_optimizer_state = d::read_pod<std::uint8_t>(in) != 0;
  if (ck.has_optimizer_state) {
    ck.optimizer_step = d::read_pod<std::int64_t>(in);
    const auto mcount = d::read_pod<std::uint64_t>(in);
    if (mcount != count) throw CheckpointError("corrupt checkpoint: moments");
    for (std::uint64_t i = 0; i < mcount; ++i)
      ck.moments1.push_back(d::read_tensor<Real>(in));
    for (std::uint64_t i = 0; i < mcount; ++i)
      ck.moments2.push_back(d::read_tensor<Real>(in));
  }
  return ck;
}

// Extract current model parameters into a checkpoint.
template <class Real>
Checkpoint<Real> snapshot(PoseModel<Real>& model, std::int32_t epoch = 0) {
  Checkpoint<Real> ck;
  ck.config = model.config();
  ck.epoch = epoch;
  model.visit([&](const std::string& name, Tensor<Real>& t) {
    ck.params.emplace_back(name, t.detach_copy());
  });
  return ck;
}

// Build a model from a checkpoint; every parameter must match the shape
// the config dictates.
template <class Real>
PoseModel<Real> restore_model(const Checkpoint<Real>& ck) {
  PoseModel<Real> model(ck.config);
  std::map<std::string, const Tensor<Real>*> by_name;
  for (const auto& [name, t] : ck.params) by_name[name] = &t;
  std::size_t used = 0;
  model.visit([&](const std::string& name, Tensor<Real>& t) {
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw CheckpointError("checkpoint missing parameter: " + name);
    if (it->second->shape() != t.shape())
      throw CheckpointError("checkpoint shape mismatch for " + name + ": " +
                            shape_str(it->second->shape()) + " vs " +
                            shape_str(t.shape()));
    t.data() = it->second->data();
    ++used;
  });
  if (used != ck.params.size())
    throw CheckpointError("checkpoint has extra parameters");
  return model;
}

}  // namespace pef
