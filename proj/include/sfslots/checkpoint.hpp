#pragma once

// SFSL checkpoint container.
//
//   "SFSL" | u32 version | u32 count
//   count x ( u32 name_len | name bytes | u32 rank | rank x u64 dim | f32 data )
//   u32 CRC-32 of every preceding byte
//
// All integers and floats are little-endian regardless of host order.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "sfslots/errors.hpp"
#include "sfslots/tensor.hpp"

namespace sfsl {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'S', 'F', 'S', 'L'};

// Ordered list of named tensors; order is preserved through save and load.
using NamedTensors = std::vector<std::pair<std::string, TensorF>>;

inline const TensorF* find_tensor(const NamedTensors& ts, const std::string& name) {
  for (const auto& [n, t] : ts)
    if (n == name) return &t;
  return nullptr;
}

inline const TensorF& require_tensor(const NamedTensors& ts, const std::string& name) {
  const TensorF* t = find_tensor(ts, name);
  if (!t) throw CheckpointError("checkpoint has no tensor '" + name + "'");
  return *t;
}

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& buf, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return end_ - pos_; }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint is truncated");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

inline std::uint32_t crc32_of(const char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

inline std::string encode_checkpoint(const NamedTensors& tensors) {
  std::set<std::string> seen;
  std::string buf(kCheckpointMagic, 4);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (!seen.insert(name).second) throw CheckpointError("duplicate tensor name: " + name);
    detail::put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    detail::put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.dims()) detail::put_u64(buf, d);
    for (float f : t.data()) detail::put_u32(buf, std::bit_cast<std::uint32_t>(f));
  }
  detail::put_u32(buf, detail::crc32_of(buf.data(), buf.size()));
  return buf;
}

inline NamedTensors decode_checkpoint(const std::string& buf) {
  if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError("not an SFSL checkpoint");
  const std::size_t body = buf.size() - 4;
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= std::uint32_t(static_cast<unsigned char>(buf[body + i])) << (8 * i);
  if (stored != detail::crc32_of(buf.data(), body)) throw CheckpointError("checkpoint CRC mismatch");

  detail::Reader r(buf, body);
  r.bytes(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  NamedTensors out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name = r.bytes(len);
    if (!seen.insert(name).second) throw CheckpointError("duplicate tensor name: " + name);
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw CheckpointError("bad rank for tensor " + name);
    Shape dims(rank);
    std::uint64_t n = 1;
    for (auto& d : dims) {
      d = r.u64();
      if (d == 0 || d > r.remaining()) throw CheckpointError("bad dims for tensor " + name);
      n *= d;
      if (n > r.remaining() / 4 + 1) throw CheckpointError("tensor " + name + " overruns the file");
    }
    std::vector<float> data(n);
    for (auto& f : data) f = std::bit_cast<float>(r.u32());
    out.emplace_back(std::move(name), TensorF(std::move(dims), std::move(data)));
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after the last tensor");
  return out;
}

// Writes to a sibling temp file and renames it over `path`, so a reader never
// sees a partial container.
inline void save_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path) {
  const std::string buf = encode_checkpoint(tensors);
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  auto tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.flush();
    if (!out) {
      out.close();
      std::filesystem::remove(tmp);
      throw IoError("short write to " + tmp.string());
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
  }
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_checkpoint(buf);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace sfsl
