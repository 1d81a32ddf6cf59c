#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "olivine/error.hpp"
#include "olivine/model.hpp"
#include "olivine/pnm.hpp"

namespace olivine {

// OLWT weight file, all integers little-endian:
//   "OLWT" | version u32 | name (u16 len + UTF-8) | entry count u32 |
//   entries: name (u16 len + UTF-8), ndim u8, dims u32 x ndim, values f32 |
//   epoch u32 | best_val_metric f32
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape dims;
  std::vector<float> values;

  bool operator==(const CheckpointEntry&) const = default;
};

struct Checkpoint {
  std::string model_name;
  std::vector<CheckpointEntry> entries;
  std::uint32_t epoch = 0;
  float best_val_metric = 0.0F;

  const CheckpointEntry* find(std::string_view name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace ckpt_detail {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    for (int i = 0; i < 2; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(std::string_view s) {
    if (s.size() > 0xFFFF) throw DataError("checkpoint: name too long");
    u16(static_cast<std::uint16_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint16_t u16() {
    need(2);
    const auto v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + static_cast<std::size_t>(i)]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::size_t n = u16();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    std::string_view s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) throw DataError("unexpected end of checkpoint");
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline Bytes encode_checkpoint(const Checkpoint& ckpt) {
  ckpt_detail::Writer w;
  for (char c : std::string_view("OLWT")) w.u8(static_cast<std::uint8_t>(c));
  w.u32(kCheckpointVersion);
  w.str(ckpt.model_name);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    w.str(e.name);
    if (e.dims.size() > 255) throw DataError("checkpoint: too many dimensions in " + e.name);
    if (shape_volume(e.dims) != e.values.size()) throw DataError("checkpoint: entry " + e.name + " has inconsistent size");
    w.u8(static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) w.u32(static_cast<std::uint32_t>(d));
    for (float v : e.values) w.f32(v);
  }
  w.u32(ckpt.epoch);
  w.f32(ckpt.best_val_metric);
  return w.take();
}

inline Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ckpt_detail::Reader r(bytes);
  if (r.raw(4) != "OLWT") throw DataError("checkpoint: bad magic");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.model_name = r.str();
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str();
    const auto ndim = r.u8();
    for (std::uint8_t d = 0; d < ndim; ++d) e.dims.push_back(r.u32());
    const std::size_t n = shape_volume(e.dims);
    if (n > bytes.size()) throw DataError("unexpected end of checkpoint");
    e.values.resize(n);
    for (auto& v : e.values) v = r.f32();
    ckpt.entries.push_back(std::move(e));
  }
  ckpt.epoch = r.u32();
  ckpt.best_val_metric = r.f32();
  if (!r.at_end()) throw DataError("checkpoint: trailing bytes");
  return ckpt;
}

inline Checkpoint capture_checkpoint(Network<float>& net, std::uint32_t epoch = 0, float best_val_metric = 0.0F) {
  Checkpoint ckpt;
  ckpt.model_name = net.name();
  ckpt.epoch = epoch;
  ckpt.best_val_metric = best_val_metric;
  for (auto* p : net.state()) {
    ckpt.entries.push_back({p->name, p->value.shape(), std::vector<float>(p->value.values().begin(), p->value.values().end())});
  }
  return ckpt;
}

inline Bytes save_checkpoint(Network<float>& net, std::uint32_t epoch = 0, float best_val_metric = 0.0F) {
  return encode_checkpoint(capture_checkpoint(net, epoch, best_val_metric));
}

// Validates name and every entry against the network, then copies values in.
inline void apply_checkpoint(const Checkpoint& ckpt, Network<float>& net) {
  auto state = net.state();
  const std::size_t n = std::min(state.size(), ckpt.entries.size());
  std::string mismatch;
  for (std::size_t i = 0; i < n && mismatch.empty(); ++i) {
    const auto& e = ckpt.entries[i];
    if (e.name != state[i]->name) {
      mismatch = "entry " + std::to_string(i) + " is '" + e.name + "', model expects '" + state[i]->name + "'";
    } else if (e.dims != state[i]->value.shape()) {
      mismatch = "entry '" + e.name + "' has shape " + shape_string(e.dims) + ", model expects " +
                 shape_string(state[i]->value.shape());
    }
  }
  if (mismatch.empty() && ckpt.entries.size() != state.size()) {
    mismatch = "checkpoint has " + std::to_string(ckpt.entries.size()) + " entries, model expects " +
               std::to_string(state.size()) + " (first missing or extra entry '" +
               (ckpt.entries.size() > n ? ckpt.entries[n].name : state[n]->name) + "')";
  }
  if (ckpt.model_name != net.name()) {
    throw ShapeError("checkpoint model '" + ckpt.model_name + "' does not match '" + net.name() + "'" +
                     (mismatch.empty() ? std::string() : ": " + mismatch));
  }
  if (!mismatch.empty()) throw ShapeError("checkpoint mismatch: " + mismatch);
  for (std::size_t i = 0; i < state.size(); ++i) state[i]->value = Tensor<float>(ckpt.entries[i].dims, ckpt.entries[i].values);
}

inline Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes, Network<float>& net) {
  auto ckpt = decode_checkpoint(bytes);
  apply_checkpoint(ckpt, net);
  return ckpt;
}

// Transfer initialization: copies every entry outside the final Dense layer
// (these must match exactly); the classifier is copied only when its shape
// matches, otherwise the network keeps its fresh head.
inline bool apply_backbone(const Checkpoint& ckpt, Network<float>& net) {
  if (ckpt.model_name != net.name()) {
    throw ShapeError("checkpoint model '" + ckpt.model_name + "' does not match '" + net.name() + "'");
  }
  const std::string head_prefix = "head.classifier.";
  bool head_loaded = true;
  for (auto* p : net.state()) {
    const auto* e = ckpt.find(p->name);
    const bool is_head = p->name.starts_with(head_prefix);
    if (!e) {
      if (is_head) {
        head_loaded = false;
        continue;
      }
      throw ShapeError("checkpoint lacks entry '" + p->name + "'");
    }
    if (e->dims != p->value.shape()) {
      if (is_head) {
        head_loaded = false;
        continue;
      }
      throw ShapeError("checkpoint entry '" + p->name + "' has shape " + shape_string(e->dims) + ", model expects " +
                       shape_string(p->value.shape()));
    }
    p->value = Tensor<float>(e->dims, e->values);
  }
  return head_loaded;
}

// Rebuilds the preset a checkpoint was saved from: class count from the
// classifier, input channels from the stem convolution.
inline ModelSpec spec_from_checkpoint(const Checkpoint& ckpt, BatchNormOptions bn = {}) {
  const auto* head = ckpt.find("head.classifier.weight");
  const auto* stem = ckpt.find("stem.conv.weight");
  if (!head || !stem || head->dims.size() != 2 || stem->dims.size() != 4) {
    throw DataError("checkpoint does not describe a known preset");
  }
  return build_preset(ckpt.model_name, head->dims[0], stem->dims[1], bn);
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace olivine
