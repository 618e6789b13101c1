#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "hyperfusion/errors.hpp"
#include "hyperfusion/metrics.hpp"
#include "hyperfusion/reflect.hpp"
#include "hyperfusion/tensor.hpp"

namespace hyperfusion {

/// 8-bit raster, row-major, channels interleaved (1 = P5, 3 = P6).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> data;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed: " + path);
}

class HeaderReader {
 public:
  HeaderReader(std::string_view bytes, std::size_t pos) : b_(bytes), pos_(pos) {}

  std::size_t offset() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t number(const char* what, std::size_t* at = nullptr) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    if (at) *at = start;
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > 1u << 20) throw FormatError(std::string("netpbm: ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("netpbm: expected ") + what, start);
    return v;
  }

  void single_whitespace() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_])))
      throw FormatError("netpbm: expected whitespace before raster", pos_);
    ++pos_;
  }

 private:
  std::string_view b_;
  std::size_t pos_;
};

}  // namespace detail

/// Parses binary P5/P6 with maxval 255. Comments may appear in the header.
inline Image8 parse_netpbm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw FormatError("netpbm: bad magic (expected P5 or P6)", 0);
  Image8 img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  detail::HeaderReader r(bytes, 2);
  img.width = r.number("width");
  img.height = r.number("height");
  std::size_t maxval_at = 0;
  const std::size_t maxval = r.number("maxval", &maxval_at);
  if (img.width == 0 || img.height == 0) throw FormatError("netpbm: zero image dimension", 2);
  if (maxval != 255) throw FormatError("netpbm: maxval " + std::to_string(maxval) + " unsupported", maxval_at);
  r.single_whitespace();
  const std::size_t start = r.offset();
  const std::size_t need = img.width * img.height * img.channels;
  if (bytes.size() - start < need)
    throw FormatError("netpbm: raster truncated, need " + std::to_string(need) + " bytes, have " +
                          std::to_string(bytes.size() - start),
                      bytes.size());
  img.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                  bytes.begin() + static_cast<std::ptrdiff_t>(start + need));
  return img;
}

inline Image8 load_netpbm(const std::string& path) {
  try {
    return parse_netpbm(detail::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.message(), e.offset());
  }
}

inline std::string encode_netpbm(const Image8& img) {
  if (img.channels != 1 && img.channels != 3)
    throw ParameterError("netpbm: channel count must be 1 or 3, got " + std::to_string(img.channels));
  if (img.data.size() != img.width * img.height * img.channels)
    throw ShapeError("netpbm: raster size does not match dimensions");
  std::string out = (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " +
                    std::to_string(img.height) + "\n255\n";
  out.append(img.data.begin(), img.data.end());
  return out;
}

inline void save_netpbm(const std::string& path, const Image8& img) { detail::write_file(path, encode_netpbm(img)); }

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// RGB raster to an [H,W,3] tensor of grid-snapped values q/255.
inline Tensor image_to_tensor(const Image8& img) {
  if (img.channels != 3) throw FormatError("expected an RGB (P6) image", 0);
  Tensor t({img.height, img.width, 3});
  for (std::size_t i = 0; i < img.data.size(); ++i) t[i] = to_grid(img.data[i] / 255.0);
  return t;
}

inline Image8 tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || t.dim(2) != 3) throw ShapeError("tensor_to_image: expected [H,W,3], got " + shape_string(t.dims()));
  Image8 img{t.dim(1), t.dim(0), 3, std::vector<std::uint8_t>(t.numel())};
  for (std::size_t i = 0; i < t.numel(); ++i) img.data[i] = to_byte(t[i]);
  return img;
}

/// Grayscale raster to a binary mask; values >= 128 are foreground.
inline GroundTruthMask image_to_mask(const Image8& img) {
  if (img.channels != 1) throw FormatError("expected a grayscale (P5) mask", 0);
  GroundTruthMask m{img.width, img.height, std::vector<std::uint8_t>(img.data.size())};
  for (std::size_t i = 0; i < img.data.size(); ++i) m.values[i] = img.data[i] >= 128 ? 1 : 0;
  return m;
}

inline Image8 mask_to_image(const GroundTruthMask& m) {
  Image8 img{m.width, m.height, 1, std::vector<std::uint8_t>(m.values.size())};
  for (std::size_t i = 0; i < m.values.size(); ++i) img.data[i] = m.values[i] ? 255 : 0;
  return img;
}

inline SaliencyMap image_to_saliency(const Image8& img) {
  if (img.channels != 1) throw FormatError("expected a grayscale (P5) saliency map", 0);
  SaliencyMap m{img.width, img.height, std::vector<double>(img.data.size())};
  for (std::size_t i = 0; i < img.data.size(); ++i) m.values[i] = img.data[i] / 255.0;
  return m;
}

inline Image8 saliency_to_image(const SaliencyMap& m) {
  Image8 img{m.width, m.height, 1, std::vector<std::uint8_t>(m.values.size())};
  for (std::size_t i = 0; i < m.values.size(); ++i) img.data[i] = to_byte(m.values[i]);
  return img;
}

}  // namespace hyperfusion
