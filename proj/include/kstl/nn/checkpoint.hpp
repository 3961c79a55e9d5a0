#pragma once

// KSTL checkpoint format (all integers little-endian):
//
//   "KSTL"            4 bytes magic
//   version           u32 (currently 1)
//   payload_length    u64
//   payload:
//     meta_length     u32, followed by UTF-8 JSON metadata
//     tensor_count    u32
//     per tensor:     u32 name length, name bytes, u8 dtype (1 = f32, 2 = f64),
//                     u32 rank, u64 dims[rank], raw little-endian values
//   crc32(payload)    u32
//
// Velocity tensors are stored under "<param>@velocity"; batch-norm running
// statistics are listed in the metadata under "buffers".

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "kstl/core/errors.hpp"
#include "kstl/core/tensor.hpp"
#include "kstl/nn/model.hpp"

namespace kstl::nn {

class CheckpointError : public Error {
 public:
  CheckpointError(std::string category, const std::string& m) : Error(std::move(category), m) {}
};
class BadMagicError : public CheckpointError {
 public:
  explicit BadMagicError(const std::string& m) : CheckpointError("checkpoint-magic", m) {}
};
class UnsupportedVersionError : public CheckpointError {
 public:
  explicit UnsupportedVersionError(const std::string& m) : CheckpointError("checkpoint-version", m) {}
};
class TruncatedCheckpointError : public CheckpointError {
 public:
  explicit TruncatedCheckpointError(const std::string& m) : CheckpointError("checkpoint-truncated", m) {}
};
class ChecksumError : public CheckpointError {
 public:
  explicit ChecksumError(const std::string& m) : CheckpointError("checkpoint-checksum", m) {}
};
class ArchMismatchError : public CheckpointError {
 public:
  explicit ArchMismatchError(const std::string& m) : CheckpointError("checkpoint-arch", m) {}
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

struct CheckpointMeta {
  std::string stage;  // stage0 | scratch | hetl | hotl
  std::uint64_t seed = 0;
  std::vector<std::string> class_keys;
  ArchitectureConfig arch;
  std::string arch_hash;
  std::string backbone_hash;
  nlohmann::json extra = nlohmann::json::object();
};

/// Values are held as double; float tensors round-trip exactly because the
/// dtype tag is kept and every float is representable as a double.
struct StoredTensor {
  std::string name;
  DType dtype = DType::f32;
  Tensor<double> value;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::vector<StoredTensor> params;
  std::vector<StoredTensor> velocities;
  std::vector<StoredTensor> buffers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
  }
  const StoredTensor* find_param(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return &p;
    return nullptr;
  }
};

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, std::string stage, std::uint64_t seed,
                           std::vector<std::string> class_keys, nlohmann::json extra = nlohmann::json::object()) {
  Checkpoint c;
  c.meta.stage = std::move(stage);
  c.meta.seed = seed;
  c.meta.class_keys = std::move(class_keys);
  c.meta.arch = model.arch();
  c.meta.arch_hash = arch_hash(model.arch());
  c.meta.backbone_hash = backbone_hash(model.arch());
  c.meta.extra = std::move(extra);
  for (const auto& e : model.params().values()) c.params.push_back({e.name, dtype_of<T>(), e.value.template cast<double>()});
  for (const auto& e : model.params().velocities())
    c.velocities.push_back({e.name, dtype_of<T>(), e.value.template cast<double>()});
  for (const auto& e : model.state().buffers) c.buffers.push_back({e.name, dtype_of<T>(), e.value.template cast<double>()});
  return c;
}

namespace detail {

class Writer {
 public:
  std::vector<std::uint8_t> bytes;
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(std::string_view s) { bytes.insert(bytes.end(), s.begin(), s.end()); }
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  std::uint8_t u8() { return need(1)[0]; }
  std::uint32_t u32() {
    auto p = need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    auto p = need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  }
  std::string str(std::size_t n) {
    auto p = need(n);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::uint8_t* need(std::size_t n) {
    if (b_.size() - pos_ < n) throw TruncatedCheckpointError("checkpoint payload ends early at byte " + std::to_string(pos_));
    const std::uint8_t* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void write_tensor(Writer& w, const std::string& name, const StoredTensor& t) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.raw(name);
  w.u8(static_cast<std::uint8_t>(t.dtype));
  w.u32(static_cast<std::uint32_t>(t.value.rank()));
  for (std::size_t d : t.value.shape()) w.u64(d);
  for (double v : t.value.values()) {
    if (t.dtype == DType::f32)
      w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    else
      w.u64(std::bit_cast<std::uint64_t>(v));
  }
}

}  // namespace detail

inline nlohmann::json meta_to_json(const CheckpointMeta& m, const std::vector<StoredTensor>& buffers) {
  nlohmann::json names = nlohmann::json::array();
  for (const auto& b : buffers) names.push_back(b.name);
  return {{"stage", m.stage},         {"seed", m.seed},   {"class_keys", m.class_keys},
          {"arch", m.arch},           {"arch_hash", m.arch_hash}, {"backbone_hash", m.backbone_hash},
          {"buffers", names},         {"extra", m.extra}};
}

inline std::vector<std::uint8_t> save_checkpoint(const Checkpoint& c) {
  detail::Writer payload;
  const std::string meta = meta_to_json(c.meta, c.buffers).dump();
  payload.u32(static_cast<std::uint32_t>(meta.size()));
  payload.raw(meta);
  payload.u32(static_cast<std::uint32_t>(c.params.size() + c.velocities.size() + c.buffers.size()));
  for (const auto& t : c.params) detail::write_tensor(payload, t.name, t);
  for (const auto& t : c.velocities) detail::write_tensor(payload, t.name + "@velocity", t);
  for (const auto& t : c.buffers) detail::write_tensor(payload, t.name, t);

  detail::Writer out;
  out.raw("KSTL");
  out.u32(kCheckpointVersion);
  out.u64(payload.bytes.size());
  out.bytes.insert(out.bytes.end(), payload.bytes.begin(), payload.bytes.end());
  out.u32(detail::crc32_of(payload.bytes));
  return std::move(out.bytes);
}

inline Checkpoint load_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw TruncatedCheckpointError("checkpoint shorter than its magic");
  if (std::memcmp(bytes.data(), "KSTL", 4) != 0) throw BadMagicError("not a KSTL checkpoint (bad magic)");
  detail::Reader header(bytes.subspan(4));
  if (bytes.size() < 16) throw TruncatedCheckpointError("checkpoint header truncated");
  const std::uint32_t version = header.u32();
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t payload_len = header.u64();
  if (bytes.size() - 16 < payload_len + 4)
    throw TruncatedCheckpointError("checkpoint declares " + std::to_string(payload_len) + " payload bytes, file has " +
                                   std::to_string(bytes.size() - 16));
  const auto payload = bytes.subspan(16, payload_len);
  detail::Reader crc_reader(bytes.subspan(16 + payload_len, 4));
  const std::uint32_t stored_crc = crc_reader.u32();
  const std::uint32_t actual_crc = detail::crc32_of(payload);
  if (stored_crc != actual_crc) throw ChecksumError("checkpoint CRC32 mismatch: payload corrupted");

  detail::Reader r(payload);
  const auto meta = nlohmann::json::parse(r.str(r.u32()));
  Checkpoint c;
  c.meta.stage = meta.at("stage").get<std::string>();
  c.meta.seed = meta.at("seed").get<std::uint64_t>();
  c.meta.class_keys = meta.at("class_keys").get<std::vector<std::string>>();
  c.meta.arch = meta.at("arch").get<ArchitectureConfig>();
  c.meta.arch_hash = meta.at("arch_hash").get<std::string>();
  c.meta.backbone_hash = meta.at("backbone_hash").get<std::string>();
  c.meta.extra = meta.at("extra");
  const auto buffer_names = meta.at("buffers").get<std::set<std::string>>();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    StoredTensor t;
    t.name = r.str(r.u32());
    t.dtype = static_cast<DType>(r.u8());
    if (t.dtype != DType::f32 && t.dtype != DType::f64)
      throw CheckpointError("checkpoint-format", "unknown dtype tag for tensor '" + t.name + "'");
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u64();
    std::vector<double> values(shape_product(shape));
    for (auto& v : values)
      v = t.dtype == DType::f32 ? static_cast<double>(std::bit_cast<float>(r.u32())) : std::bit_cast<double>(r.u64());
    t.value = Tensor<double>(shape, std::move(values));
    if (t.name.ends_with("@velocity")) {
      t.name.resize(t.name.size() - 9);
      c.velocities.push_back(std::move(t));
    } else if (buffer_names.contains(t.name)) {
      c.buffers.push_back(std::move(t));
    } else {
      c.params.push_back(std::move(t));
    }
  }
  if (!r.done()) throw CheckpointError("checkpoint-format", "trailing bytes after tensor table");
  return c;
}

inline void write_checkpoint_file(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = save_checkpoint(c);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return load_checkpoint(bytes);
}

/// Copies every parameter, velocity and buffer of `c` into `model`. The
/// checkpoint's architecture hash must equal the model's.
template <typename T>
void restore(Model<T>& model, const Checkpoint& c, bool with_velocity = true) {
  const std::string want = arch_hash(model.arch());
  if (c.meta.arch_hash != want)
    throw ArchMismatchError("checkpoint arch hash " + c.meta.arch_hash + " does not match requested arch hash " + want);
  for (const auto& t : c.params) model.params().value(t.name) = t.value.template cast<T>();
  if (with_velocity)
    for (const auto& t : c.velocities) model.params().velocity(t.name) = t.value.template cast<T>();
  else
    model.params().reset_velocity();
  for (const auto& t : c.buffers) model.state().buffers.at(t.name) = t.value.template cast<T>();
}

/// Copies only "backbone.*" parameters and buffers; the backbone hashes must
/// match. Head parameters keep their current (fresh) values.
template <typename T>
void restore_backbone(Model<T>& model, const Checkpoint& c) {
  const std::string want = backbone_hash(model.arch());
  if (c.meta.backbone_hash != want)
    throw ArchMismatchError("checkpoint backbone hash " + c.meta.backbone_hash +
                            " does not match requested backbone hash " + want);
  for (const auto& t : c.params)
    if (t.name.starts_with("backbone.")) model.params().value(t.name) = t.value.template cast<T>();
  for (const auto& t : c.buffers)
    if (t.name.starts_with("backbone.")) model.state().buffers.at(t.name) = t.value.template cast<T>();
  model.params().reset_velocity();
}

}  // namespace kstl::nn
