#pragma once

// Checkpoint container, all integers and floats little-endian:
//
//   magic        8 bytes  "INVGCKPT"
//   version      u32      (kCheckpointVersion)
//   config       i32 growth_rate, i32 dense_layers, f64 dropout,
//                i32 num_classes, i32 initial_channels, i32 input_size,
//                i32 input_channels
//   metadata     i32 epoch, u64 seed, f64 final_loss
//   count        u32      number of tensors
//   tensors      u32 name_len, name bytes, u32 rank, u32 extents[rank],
//                f32 values[product(extents)]
//
// Tensors are the model parameters followed by the running mean and
// variance of every normalization layer ("<norm>.running_mean",
// "<norm>.running_var").

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "invigil/error.hpp"
#include "invigil/model.hpp"

namespace invigil {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::string_view kCheckpointMagic = "INVGCKPT";

struct TrainingMetadata {
  std::int32_t epoch = 0;
  std::uint64_t seed = 0;
  double final_loss = 0.0;

  friend bool operator==(const TrainingMetadata&, const TrainingMetadata&) = default;
};

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  Model<float> model;
  TrainingMetadata metadata;
};

namespace detail {

class ByteWriter {
public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    out_.insert(out_.end(), p, p + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  std::vector<unsigned char> take() { return std::move(out_); }

private:
  std::vector<unsigned char> out_;
};

class ByteReader {
public:
  explicit ByteReader(std::span<const unsigned char> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw CheckpointError(std::string("truncated checkpoint while reading ") + what);
    }
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  bool done() const { return pos_ == in_.size(); }

private:
  std::span<const unsigned char> in_;
  std::size_t pos_ = 0;
};

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor<float>& t) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
  for (float v : t.values()) w.f32(v);
}

} // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Model<float>& model,
                                                    const TrainingMetadata& metadata,
                                                    std::uint32_t version = kCheckpointVersion) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic.data(), kCheckpointMagic.size());
  w.u32(version);
  const auto& c = model.config();
  w.i32(c.growth_rate);
  w.i32(c.dense_layers);
  w.f64(c.dropout);
  w.i32(c.num_classes);
  w.i32(c.initial_channels);
  w.i32(c.input_size);
  w.i32(c.input_channels);
  w.i32(metadata.epoch);
  w.u64(metadata.seed);
  w.f64(metadata.final_loss);
  w.u32(static_cast<std::uint32_t>(model.parameters().size() + 2 * model.norms().size()));
  for (const auto& p : model.parameters()) detail::write_tensor(w, p.name, p.value);
  for (const auto& n : model.norms()) {
    detail::write_tensor(w, n.name + ".running_mean", n.state.running_mean);
    detail::write_tensor(w, n.name + ".running_var", n.state.running_var);
  }
  return w.take();
}

/// Rebuilds the architecture from the embedded config, then requires every
/// stored tensor to match it by name and shape.
inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  detail::ByteReader r(bytes);
  if (r.text(kCheckpointMagic.size(), "magic") != kCheckpointMagic) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  Checkpoint ckpt;
  ckpt.format_version = r.u32("format version");
  if (ckpt.format_version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint format_version " +
                          std::to_string(ckpt.format_version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig config;
  config.growth_rate = r.i32("config");
  config.dense_layers = r.i32("config");
  config.dropout = r.f64("config");
  config.num_classes = r.i32("config");
  config.initial_channels = r.i32("config");
  config.input_size = r.i32("config");
  config.input_channels = r.i32("config");
  try {
    config.validate();
    for (int v : {config.growth_rate, config.dense_layers, config.num_classes,
                  config.initial_channels, config.input_size, config.input_channels}) {
      if (v > (1 << 16)) throw ConfigError("implausible extent " + std::to_string(v));
    }
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid embedded config: ") + e.what());
  }
  ckpt.metadata.epoch = r.i32("metadata");
  ckpt.metadata.seed = r.u64("metadata");
  ckpt.metadata.final_loss = r.f64("metadata");

  Model<float> model = Model<float>::build(config, 0);
  std::map<std::string, Tensor<float>*> slots;
  for (auto& p : model.parameters()) slots[p.name] = &p.value;
  for (auto& n : model.norms()) {
    slots[n.name + ".running_mean"] = &n.state.running_mean;
    slots[n.name + ".running_var"] = &n.state.running_var;
  }
  const std::uint32_t count = r.u32("tensor count");
  if (count != slots.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(count) +
                          " tensors but its config requires " + std::to_string(slots.size()));
  }
  std::map<std::string, bool> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("tensor name length");
    std::string name = r.text(name_len, "tensor name");
    auto slot = slots.find(name);
    if (slot == slots.end()) throw CheckpointError("unexpected tensor '" + name + "'");
    if (seen[name]) throw CheckpointError("duplicate tensor '" + name + "'");
    seen[name] = true;
    const std::uint32_t rank = r.u32("tensor rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(r.u32("tensor extents"));
    if (shape != slot->second->shape()) {
      throw CheckpointError("tensor '" + name + "' has shape " + shape_string(shape) +
                            " but the embedded config requires " +
                            shape_string(slot->second->shape()));
    }
    for (auto& v : slot->second->values()) v = r.f32("tensor values");
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last tensor");
  ckpt.model = std::move(model);
  return ckpt;
}

inline std::size_t save_checkpoint(const Model<float>& model, const TrainingMetadata& metadata,
                                   const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model, metadata);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
  return bytes.size();
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::vector<unsigned char> bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const Error& e) {
    throw CheckpointError(e.what());
  }
  return decode_checkpoint(bytes);
}

} // namespace invigil
