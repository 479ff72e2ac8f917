#pragma once

// Checkpoint file, little-endian:
//
//   "MTPT" | u32 version
//   u32 config bytes, config text (key=value lines)
//   u32 P, then P parameters: u32 name bytes, name, u32 ndim, u64 dims[ndim],
//        f32 values[prod(dims)]
//   Adam: u64 step, then for each parameter f32 m[n], f32 v[n]
//   u64 next_step, u64 tokens_seen

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "mtp/corpus_store.hpp"
#include "mtp/error.hpp"
#include "mtp/model.hpp"
#include "mtp/optim.hpp"

namespace mtp {

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string config_text;
  struct Param {
    std::string name;
    Shape shape;
    std::vector<float> values;
  };
  std::vector<Param> params;
  std::uint64_t adam_step = 0;
  std::vector<std::vector<float>> adam_m;
  std::vector<std::vector<float>> adam_v;
  std::uint64_t next_step = 0;
  std::uint64_t tokens_seen = 0;
};

inline std::vector<std::uint8_t> serialize_checkpoint(const CheckpointData& c) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(c.config_text);
  w.u32(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& p : c.params) {
    w.str(p.name);
    w.u32(static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) w.u64(d);
    for (float v : p.values) w.f32(v);
  }
  w.u64(c.adam_step);
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const std::size_t n = c.params[i].values.size();
    for (std::size_t j = 0; j < n; ++j) w.f32(i < c.adam_m.size() ? c.adam_m[i][j] : 0.f);
    for (std::size_t j = 0; j < n; ++j) w.f32(i < c.adam_v.size() ? c.adam_v[i][j] : 0.f);
  }
  w.u64(c.next_step);
  w.u64(c.tokens_seen);
  return std::move(w.buffer());
}

inline CheckpointData deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader in(bytes.data(), bytes.size());
  char magic[4];
  in.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) fail("checkpoint: bad magic");
  const auto version = in.u32();
  if (version != kCheckpointVersion) fail("checkpoint: unsupported version ", version);
  CheckpointData c;
  c.config_text = in.str();
  const auto np = in.u32();
  c.params.resize(np);
  for (auto& p : c.params) {
    p.name = in.str();
    p.shape.resize(in.u32());
    for (auto& d : p.shape) d = in.u64();
    p.values.resize(shape_size(p.shape));
    for (auto& v : p.values) v = in.f32();
  }
  c.adam_step = in.u64();
  c.adam_m.resize(np);
  c.adam_v.resize(np);
  for (std::size_t i = 0; i < np; ++i) {
    const std::size_t n = c.params[i].values.size();
    c.adam_m[i].resize(n);
    c.adam_v[i].resize(n);
    for (auto& v : c.adam_m[i]) v = in.f32();
    for (auto& v : c.adam_v[i]) v = in.f32();
  }
  c.next_step = in.u64();
  c.tokens_seen = in.u64();
  if (in.remaining() != 0) fail("checkpoint: trailing bytes");
  return c;
}

template <typename T>
CheckpointData capture(const Model<T>& model, const AdamState<T>& adam, std::string config_text,
                       std::uint64_t next_step, std::uint64_t tokens_seen) {
  CheckpointData c;
  c.config_text = std::move(config_text);
  for (const auto& p : model.parameters()) {
    CheckpointData::Param cp{p.name, p.tensor.shape(), {}};
    for (T v : p.tensor.values()) cp.values.push_back(static_cast<float>(v));
    c.params.push_back(std::move(cp));
  }
  c.adam_step = adam.step;
  for (std::size_t i = 0; i < adam.m.size(); ++i) {
    c.adam_m.emplace_back(adam.m[i].begin(), adam.m[i].end());
    c.adam_v.emplace_back(adam.v[i].begin(), adam.v[i].end());
  }
  c.next_step = next_step;
  c.tokens_seen = tokens_seen;
  return c;
}

// Copies stored values into a model of the same configuration; the Adam
// state is restored when given.
template <typename T>
void restore(const CheckpointData& c, Model<T>& model, AdamState<T>* adam = nullptr) {
  auto& params = model.parameters();
  if (c.params.size() != params.size()) {
    fail("checkpoint: holds ", c.params.size(), " parameters, model has ", params.size());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = c.params[i];
    if (src.name != params[i].name || src.shape != params[i].tensor.shape()) {
      fail("checkpoint: parameter ", i, " is '", src.name, "' ", shape_string(src.shape),
           ", model expects '", params[i].name, "' ", shape_string(params[i].tensor.shape()));
    }
    auto dst = params[i].tensor.mutable_values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(src.values[j]);
  }
  if (adam) {
    adam->step = c.adam_step;
    adam->m.assign(params.size(), {});
    adam->v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam->m[i].assign(c.adam_m[i].begin(), c.adam_m[i].end());
      adam->v[i].assign(c.adam_v[i].begin(), c.adam_v[i].end());
    }
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointData& c) {
  write_file_bytes(path, serialize_checkpoint(c));
}

inline CheckpointData load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file_bytes(path));
}

}  // namespace mtp
