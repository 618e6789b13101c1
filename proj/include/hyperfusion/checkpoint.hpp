#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hyperfusion/fusion.hpp"
#include "hyperfusion/netpbm.hpp"

// Layout (little-endian):
//   "HYFN" | u32 version | u32 tensor count
//   per tensor: u16 name length | name bytes | u8 dtype (0 f64, 1 f32) | u8 rank
//               | u32 dims[rank] | payload

namespace hyperfusion {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class StorageType : std::uint8_t { f64 = 0, f32 = 1 };

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out_.append(b, sizeof(T));
  }
  void bytes(std::string_view s) { out_.append(s); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view b) : b_(b) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw FormatError(std::string("checkpoint: truncated ") + what + ", need " + std::to_string(n) +
                            " bytes, have " + std::to_string(remaining()),
                        pos_);
  }

  template <class T>
  T get(const char* what) {
    need(sizeof(T), what);
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    need(n, what);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  std::string_view b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(std::span<const NamedTensor> tensors, StorageType dtype = StorageType::f64) {
  detail::ByteWriter w;
  w.bytes("HYFN");
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    if (nt.name.empty() || nt.name.size() > 0xffff) throw ParameterError("checkpoint: bad tensor name '" + nt.name + "'");
    if (nt.tensor.rank() > 0xff) throw ParameterError("checkpoint: rank too large for " + nt.name);
    w.put<std::uint16_t>(static_cast<std::uint16_t>(nt.name.size()));
    w.bytes(nt.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.dims()) {
      if (d > 0xffffffffu) throw ParameterError("checkpoint: dimension too large in " + nt.name);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    }
    for (double v : nt.tensor.values()) {
      if (dtype == StorageType::f64)
        w.put<double>(v);
      else
        w.put<float>(static_cast<float>(v));
    }
  }
  return w.take();
}

/// Decodes a checkpoint. Every malformed input raises FormatError with the
/// byte offset of the failure.
inline std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.take(4, "magic") != "HYFN") throw FormatError("checkpoint: bad magic", 0);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<NamedTensor> out;
  std::set<std::string, std::less<>> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t at = r.offset();
    const auto len = r.get<std::uint16_t>("name length");
    if (len == 0) throw FormatError("checkpoint: empty tensor name", at);
    std::string name(r.take(len, "name"));
    if (!seen.insert(name).second) throw FormatError("checkpoint: duplicate tensor '" + name + "'", at);
    const std::size_t dtype_at = r.offset();
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw FormatError("checkpoint: unknown dtype " + std::to_string(dtype) + " for " + name, dtype_at);
    const auto rank = r.get<std::uint8_t>("rank");
    Shape dims(rank);
    std::uint64_t numel = 1;
    for (auto& d : dims) {
      const std::size_t dim_at = r.offset();
      d = r.get<std::uint32_t>("dims");
      if (d == 0) throw FormatError("checkpoint: zero dimension in " + name, dim_at);
      numel *= d;
      if (numel > r.remaining()) throw FormatError("checkpoint: payload of " + name + " exceeds file size", dim_at);
    }
    const std::size_t width = dtype == 0 ? sizeof(double) : sizeof(float);
    auto payload = r.take(static_cast<std::size_t>(numel) * width, "payload");
    Tensor t(dims);
    auto v = t.values();
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (dtype == 0) {
        std::memcpy(&v[j], payload.data() + j * width, width);
      } else {
        float f;
        std::memcpy(&f, payload.data() + j * width, width);
        v[j] = f;
      }
    }
    out.push_back({std::move(name), std::move(t)});
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes after last tensor", r.offset());
  return out;
}

inline void save_checkpoint(const std::string& path, std::span<const NamedTensor> tensors,
                            StorageType dtype = StorageType::f64) {
  detail::write_file(path, encode_checkpoint(tensors, dtype));
}

inline std::vector<NamedTensor> load_checkpoint(const std::string& path) {
  try {
    return decode_checkpoint(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.message(), e.offset());
  }
}

}  // namespace hyperfusion
