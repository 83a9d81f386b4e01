#pragma once

// Binary checkpoint container:
//
//   "TDLR" | u32 version | u32 json_len | json bytes | u32 tensor_count |
//   per tensor: u32 name_len | name | u32 ndim | u64 dims[ndim] | f32 values[prod(dims)]
//
// All integers and floats are little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "core.hpp"

namespace toddler {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Tensor {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> values;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= static_cast<std::size_t>(d);
    return n;
  }
  bool operator==(const Tensor&) const = default;
};

struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
  const Tensor& at(const std::string& name) const {
    const Tensor* t = find(name);
    require(t != nullptr, ErrorKind::invalid_argument, "checkpoint: missing tensor '" + name + "'");
    return *t;
  }
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<std::uint8_t>& b) : b_(b) {}

  void need(std::size_t n) const {
    require(pos_ + n <= b_.size(), ErrorKind::truncated, "checkpoint: truncated data");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::io, "write failed for '" + path.string() + "'");
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck) {
  detail::ByteWriter w;
  w.raw("TDLR", 4);
  w.u32(ck.version);
  const std::string meta = ck.metadata.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.raw(meta.data(), meta.size());
  w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& t : ck.tensors) {
    require(t.values.size() == t.numel(), ErrorKind::shape_mismatch,
            "checkpoint: tensor '" + t.name + "' has inconsistent shape");
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    for (float f : t.values) w.f32(f);
  }
  return std::move(w.bytes());
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  require(r.str(4) == "TDLR", ErrorKind::bad_magic, "checkpoint: bad magic");
  Checkpoint ck;
  ck.version = r.u32();
  require(ck.version == kCheckpointVersion, ErrorKind::unsupported_version,
          "checkpoint: unsupported version " + std::to_string(ck.version));
  const std::uint32_t meta_len = r.u32();
  try {
    ck.metadata = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::invalid_argument, std::string("checkpoint: bad metadata: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  ck.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = r.str(r.u32());
    const std::uint32_t ndim = r.u32();
    r.need(static_cast<std::size_t>(ndim) * 8);
    t.shape.resize(ndim);
    for (auto& d : t.shape) d = r.u64();
    const std::size_t n = t.numel();
    r.need(n * 4);
    t.values.resize(n);
    for (auto& f : t.values) f = r.f32();
    ck.tensors.push_back(std::move(t));
  }
  require(r.at_end(), ErrorKind::invalid_argument, "checkpoint: trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file(path));
}

}  // namespace toddler
