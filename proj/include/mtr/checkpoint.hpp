// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container. Everything little-endian, no padding:
//
//   "MTRC" | u32 version = 1 | u32 meta length | meta JSON bytes
//   | u32 entry count | entries...
//   entry: u16 name length | name | u8 ndim | u32 dim x ndim
//          | u64 payload bytes | f32 payload
#pragma once

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "mtr/errors.hpp"

namespace mtr {

inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'R', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kMaxEntryName = 256;

struct CheckpointEntry {
  std::string name;
  std::vector<std::uint32_t> shape;
  std::vector<float> values;
  friend bool operator==(const CheckpointEntry& a, const CheckpointEntry& b) {
    if (a.name != b.name || a.shape != b.shape || a.values.size() != b.values.size()) return false;
    // bitwise, so NaN payloads and signed zeros compare as stored
    return std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
  }
};

struct Checkpoint {
  std::string meta;  // model configuration as JSON text
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  void add(std::string name, std::vector<std::uint32_t> shape, std::vector<float> values) {
    entries.push_back({std::move(name), std::move(shape), std::move(values)});
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline void check_entry(const CheckpointEntry& e) {
  if (e.name.empty() || e.name.size() > kMaxEntryName)
    throw FormatError("checkpoint entry name must be 1.." + std::to_string(kMaxEntryName) + " bytes: '" + e.name + "'");
  for (unsigned char c : e.name)
    if (c < 0x20 || c > 0x7e) throw FormatError("checkpoint entry name is not printable ASCII: '" + e.name + "'");
  if (e.shape.size() > 255) throw FormatError("checkpoint entry '" + e.name + "' has too many dimensions");
  std::uint64_t n = 1;
  for (auto d : e.shape) n *= d;
  if (n != e.values.size())
    throw PayloadMismatchError("checkpoint entry '" + e.name + "': shape holds " + std::to_string(n) + " values, got " +
                               std::to_string(e.values.size()));
}

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <class T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { le(std::bit_cast<std::uint32_t>(v)); }
  const std::vector<unsigned char>& buffer() const noexcept { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& buf) : buf_(buf) {}

  void need(std::size_t n, const std::string& what) const {
    if (buf_.size() - pos_ < n) throw TruncationError("checkpoint truncated while reading " + what);
  }
  template <class T>
  T le(const std::string& what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(buf_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  float f32() {
    std::uint32_t bits = 0;
    for (std::size_t i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return std::bit_cast<float>(bits);
  }
  std::size_t remaining() const noexcept { return buf_.size() - pos_; }

 private:
  const std::vector<unsigned char>& buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> serialize(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.le<std::uint32_t>(kCheckpointVersion);
  w.le<std::uint32_t>(static_cast<std::uint32_t>(ckpt.meta.size()));
  w.bytes(ckpt.meta.data(), ckpt.meta.size());
  w.le<std::uint32_t>(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (std::size_t i = 0; i < ckpt.entries.size(); ++i) {
    const auto& e = ckpt.entries[i];
    detail::check_entry(e);
    for (std::size_t j = 0; j < i; ++j)
      if (ckpt.entries[j].name == e.name) throw FormatError("duplicate checkpoint entry '" + e.name + "'");
    w.le<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.le<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (auto d : e.shape) w.le<std::uint32_t>(d);
    w.le<std::uint64_t>(static_cast<std::uint64_t>(e.values.size()) * 4);
    for (float v : e.values) w.f32(v);
  }
  return w.buffer();
}

inline Checkpoint deserialize(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (magic != std::string(kCheckpointMagic, 4)) throw FormatError("not a checkpoint: bad magic");
  const auto version = r.le<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  const auto meta_len = r.le<std::uint32_t>("metadata length");
  ckpt.meta = r.str(meta_len, "metadata");
  const auto count = r.le<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "entry #" + std::to_string(i);
    CheckpointEntry e;
    const auto name_len = r.le<std::uint16_t>(where + " name length");
    e.name = r.str(name_len, where + " name");
    const std::string label = "entry '" + e.name + "'";
    const auto ndim = r.le<std::uint8_t>(label + " rank");
    std::uint64_t n = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      e.shape.push_back(r.le<std::uint32_t>(label + " shape"));
      n *= e.shape.back();
    }
    const auto payload = r.le<std::uint64_t>(label + " payload length");
    if (payload != n * 4)
      throw PayloadMismatchError(label + ": shape needs " + std::to_string(n * 4) + " payload bytes, header says " +
                                 std::to_string(payload));
    r.need(payload, label + " payload");
    e.values.resize(n);
    for (auto& v : e.values) v = r.f32();
    detail::check_entry(e);
    for (const auto& prev : ckpt.entries)
      if (prev.name == e.name) throw FormatError("duplicate checkpoint entry '" + e.name + "'");
    ckpt.entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) throw FormatError("checkpoint has " + std::to_string(r.remaining()) + " trailing bytes");
  return ckpt;
}

inline void save(const Checkpoint& ckpt, const std::string& path) {
  const auto bytes = serialize(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline Checkpoint load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("failed reading '" + path + "'");
  return deserialize(bytes);
}

}  // namespace mtr
