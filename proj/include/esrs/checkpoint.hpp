#pragma once

// Binary container shared by model checkpoints and encoding caches:
//
//   "ESRS" | u32 version | u64 manifest length | manifest (UTF-8 JSON)
//   | f32 payload of every entry in manifest order
//   | [optimizer: f32 first moments, then f32 second moments, same order]
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "esrs/error.hpp"
#include "esrs/numcore/tensor.hpp"

namespace esrs {

inline constexpr char kCheckpointMagic[4] = {'E', 'S', 'R', 'S'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const ParamEntry&) const = default;
};

struct OptimizerSnapshot {
  std::uint64_t step = 0;
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;

  bool operator==(const OptimizerSnapshot&) const = default;
};

struct Checkpoint {
  std::string model_kind;
  nlohmann::json config = nlohmann::json::object();
  std::vector<ParamEntry> params;
  std::optional<OptimizerSnapshot> optimizer;
  nlohmann::json dev_metrics = nlohmann::json::object();

  const ParamEntry& param(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return p;
    throw FormatError("checkpoint has no parameter '" + name + "'", 0);
  }
};

template <Scalar T>
ParamEntry to_entry(const NamedTensor<T>& nt) {
  return {nt.name, nt.tensor.shape(), std::vector<float>(nt.tensor.values().begin(), nt.tensor.values().end())};
}

/// Copies a stored entry into an existing tensor of the same shape.
template <Scalar T>
void load_entry(const ParamEntry& e, Tensor<T>& t) {
  if (e.shape != t.shape()) {
    throw DimensionError("parameter '" + e.name + "' stored as " + shape_str(e.shape) +
                         ", model expects " + shape_str(t.shape()));
  }
  auto dst = t.mutable_values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
}

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const char*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(const std::vector<float>& v) {
    for (float f : v) u32(std::bit_cast<std::uint32_t>(f));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}

  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) {
      throw FormatError(std::string("truncated checkpoint while reading ") + what, pos_);
    }
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> f32(std::size_t n, const char* what) {
    need(n * 4, what);
    std::vector<float> v(n);
    for (auto& f : v) f = std::bit_cast<float>(u32(what));
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  const std::string& data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json manifest;
  manifest["model_kind"] = ckpt.model_kind;
  manifest["config"] = ckpt.config;
  manifest["dev_metrics"] = ckpt.dev_metrics;
  auto& list = manifest["params"] = nlohmann::json::array();
  for (const auto& p : ckpt.params) {
    if (numel(p.shape) != p.values.size()) {
      throw ContractError("parameter '" + p.name + "' shape " + shape_str(p.shape) +
                          " disagrees with its payload");
    }
    list.push_back({{"name", p.name}, {"shape", p.shape}});
  }
  manifest["optimizer"] = ckpt.optimizer ? nlohmann::json{{"step", ckpt.optimizer->step}}
                                         : nlohmann::json(nullptr);
  const std::string text = manifest.dump();

  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.u64(text.size());
  w.raw(text.data(), text.size());
  for (const auto& p : ckpt.params) w.f32(p.values);
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    if (o.first_moment.size() != ckpt.params.size() || o.second_moment.size() != ckpt.params.size())
      throw ContractError("optimizer state does not mirror the parameter list");
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
      if (o.first_moment[i].size() != ckpt.params[i].values.size() ||
          o.second_moment[i].size() != ckpt.params[i].values.size())
        throw ContractError("optimizer moment size mismatch for '" + ckpt.params[i].name + "'");
    }
    for (const auto& m : o.first_moment) w.f32(m);
    for (const auto& v : o.second_moment) w.f32(v);
  }
  return w.take();
}

inline Checkpoint deserialize_checkpoint(const std::string& data) {
  detail::ByteReader r(data);
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) throw FormatError("bad magic header", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  const std::uint64_t len = r.u64("manifest length");
  const std::size_t manifest_at = r.pos();
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(r.bytes(len, "manifest"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt manifest: ") + e.what(), manifest_at);
  }
  Checkpoint ckpt;
  try {
    ckpt.model_kind = manifest.at("model_kind").get<std::string>();
    ckpt.config = manifest.at("config");
    ckpt.dev_metrics = manifest.at("dev_metrics");
    for (const auto& p : manifest.at("params"))
      ckpt.params.push_back({p.at("name").get<std::string>(), p.at("shape").get<Shape>(), {}});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete manifest: ") + e.what(), manifest_at);
  }
  for (auto& p : ckpt.params) p.values = r.f32(numel(p.shape), "parameter payload");
  if (manifest.contains("optimizer") && !manifest["optimizer"].is_null()) {
    OptimizerSnapshot o;
    o.step = manifest["optimizer"].at("step").get<std::uint64_t>();
    for (const auto& p : ckpt.params) o.first_moment.push_back(r.f32(p.values.size(), "first moment"));
    for (const auto& p : ckpt.params) o.second_moment.push_back(r.f32(p.values.size(), "second moment"));
    ckpt.optimizer = std::move(o);
  }
  if (!r.done()) throw FormatError("trailing bytes after payload", r.pos());
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint '" + path + "'");
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(data);
}

}  // namespace esrs
