#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "hyperfusion/metrics.hpp"
#include "hyperfusion/netpbm.hpp"

namespace hyperfusion {

struct ManifestEntry {
  std::string image;  // resolved path
  std::string mask;
};

struct DatasetManifest {
  std::string split = "train";
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
};

/// Reads a manifest; entry paths are resolved against the manifest's
/// directory and must exist.
inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path + ": " + e.what(), e.byte);
  }
  const auto base = std::filesystem::path(path).parent_path();
  DatasetManifest m;
  try {
    m.split = j.value("split", std::string("train"));
    m.seed = j.value("seed", std::uint64_t{0});
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry{(base / e.at("image").get<std::string>()).string(),
                          (base / e.at("mask").get<std::string>()).string()};
      for (const auto* f : {&entry.image, &entry.mask})
        if (!std::filesystem::exists(*f)) throw InputError("manifest " + path + ": missing file " + *f);
      m.entries.push_back(std::move(entry));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("manifest " + path + ": " + e.what());
  }
  if (m.entries.empty()) throw InputError("manifest " + path + " has no entries");
  return m;
}

/// Writes `m` with entry paths made relative to the manifest's directory.
inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  const auto base = std::filesystem::path(path).parent_path();
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries)
    entries.push_back({{"image", std::filesystem::relative(e.image, base).generic_string()},
                       {"mask", std::filesystem::relative(e.mask, base).generic_string()}});
  const nlohmann::json j = {{"split", m.split}, {"seed", m.seed}, {"entries", entries}};
  detail::write_file(path, j.dump(2) + "\n");
}

/// Image [H,W,3] on the pixel grid plus its mask.
struct Sample {
  Tensor image;
  GroundTruthMask mask;
};

inline Sample load_sample(const ManifestEntry& e) {
  Sample s{image_to_tensor(load_netpbm(e.image)), image_to_mask(load_netpbm(e.mask))};
  if (s.mask.width != s.image.dim(1) || s.mask.height != s.image.dim(0))
    throw InputError("mask " + e.mask + " does not match image " + e.image);
  return s;
}

// ------------------------------------------------------------ synthetic scenes

enum class ShapeKind { ellipse, rectangle, blob };

struct ShapeSpec {
  ShapeKind kind = ShapeKind::ellipse;
  double cx = 0, cy = 0;  // pixel units
  double rx = 1, ry = 1;  // half extents
  double angle = 0;
  std::array<double, 3> color{};
  // blob: radius scaled by 1 + Σ a_i cos(f_i θ + p_i)
  std::vector<std::array<double, 3>> harmonics;

  double max_reach() const {
    double a = 0.0;
    for (const auto& h : harmonics) a += std::abs(h[0]);
    const double r = std::max(rx, ry) * (1.0 + a);
    return kind == ShapeKind::rectangle ? r * std::numbers::sqrt2 : r;
  }

  bool contains(double x, double y) const {
    const double dx = x - cx, dy = y - cy;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    switch (kind) {
      case ShapeKind::ellipse: return u * u + v * v <= 1.0;
      case ShapeKind::rectangle: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
      case ShapeKind::blob: {
        const double theta = std::atan2(v, u);
        double scale = 1.0;
        for (const auto& h : harmonics) scale += h[0] * std::cos(h[1] * theta + h[2]);
        return std::sqrt(u * u + v * v) <= scale;
      }
    }
    return false;
  }
};

struct SceneSpec {
  std::size_t width = 64;
  std::size_t height = 64;
  std::array<double, 3> base{};
  double noise_scale = 0.06;
  std::vector<ShapeSpec> shapes;
  std::uint64_t seed = 0;
};

inline constexpr double kMinColorDistance = 0.2;
inline constexpr double kMinForeground = 0.08;
inline constexpr double kMaxForeground = 0.4;

/// Draws a scene description: a textured background and 1-3 shapes lying
/// fully inside the canvas.
inline SceneSpec random_scene(std::size_t canvas, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneSpec s;
  s.width = s.height = canvas;
  s.seed = rng();
  for (double& c : s.base) c = 0.15 + 0.7 * u(rng);
  std::array<double, 3> fg;
  do {
    for (double& c : fg) c = u(rng);
  } while (std::hypot(fg[0] - s.base[0], fg[1] - s.base[1], fg[2] - s.base[2]) < 0.45);

  const auto count = static_cast<std::size_t>(1 + rng() % 3);
  const double size = static_cast<double>(canvas);
  for (std::size_t i = 0; i < count; ++i) {
    ShapeSpec sh;
    sh.kind = static_cast<ShapeKind>(rng() % 3);
    sh.rx = size * (0.1 + 0.14 * u(rng)) / std::sqrt(static_cast<double>(count));
    sh.ry = sh.rx * (0.6 + 0.8 * u(rng));
    sh.angle = std::numbers::pi * u(rng);
    if (sh.kind == ShapeKind::blob)
      for (int h = 0; h < 3; ++h) sh.harmonics.push_back({0.08 * u(rng), static_cast<double>(2 + h), 6.28 * u(rng)});
    const double reach = std::min(sh.max_reach(), size / 2 - 2);
    sh.cx = reach + 1 + (size - 2 * reach - 2) * u(rng);
    sh.cy = reach + 1 + (size - 2 * reach - 2) * u(rng);
    for (std::size_t c = 0; c < 3; ++c) sh.color[c] = std::clamp(fg[c] + 0.08 * (u(rng) - 0.5), 0.0, 1.0);
    s.shapes.push_back(std::move(sh));
  }
  return s;
}

/// Renders a scene to 8-bit image and mask rasters.
inline std::pair<Image8, Image8> render_scene(const SceneSpec& s) {
  std::mt19937_64 rng(s.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  // Low-frequency texture: a few random plane waves.
  std::array<std::array<double, 4>, 3> waves;
  for (auto& w : waves) w = {0.02 + 0.15 * u(rng), 0.02 + 0.15 * u(rng), 6.28 * u(rng), u(rng) - 0.5};
  Image8 img{s.width, s.height, 3, std::vector<std::uint8_t>(s.width * s.height * 3)};
  Image8 mask{s.width, s.height, 1, std::vector<std::uint8_t>(s.width * s.height)};
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      double texture = 0.0;
      for (const auto& w : waves) texture += std::sin(w[0] * px + w[1] * py + w[2]) * (1.0 + w[3]);
      texture *= s.noise_scale / 3.0;
      const ShapeSpec* hit = nullptr;
      for (const auto& sh : s.shapes)
        if (sh.contains(px, py)) hit = &sh;
      const std::size_t i = y * s.width + x;
      mask.data[i] = hit ? 255 : 0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double grain = 0.03 * (u(rng) - 0.5);
        const double v = hit ? hit->color[c] + 0.5 * texture + grain : s.base[c] + texture + grain;
        img.data[i * 3 + c] = to_byte(v);
      }
    }
  return {img, mask};
}

struct SceneStats {
  double foreground_fraction = 0.0;
  double color_distance = 0.0;  // mean foreground vs mean background colour
};

inline SceneStats scene_stats(const Image8& img, const Image8& mask) {
  std::array<double, 3> fg{}, bg{};
  std::size_t nf = 0, nb = 0;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    auto& acc = mask.data[i] ? fg : bg;
    (mask.data[i] ? nf : nb)++;
    for (std::size_t c = 0; c < 3; ++c) acc[c] += img.data[i * 3 + c] / 255.0;
  }
  SceneStats st;
  st.foreground_fraction = static_cast<double>(nf) / static_cast<double>(mask.data.size());
  if (nf && nb) {
    double d2 = 0.0;
    for (std::size_t c = 0; c < 3; ++c) {
      const double d = fg[c] / static_cast<double>(nf) - bg[c] / static_cast<double>(nb);
      d2 += d * d;
    }
    st.color_distance = std::sqrt(d2);
  }
  return st;
}

/// Draws scenes until one satisfies the foreground-area and contrast bounds.
inline std::pair<Image8, Image8> generate_scene(std::size_t canvas, std::mt19937_64& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto [img, mask] = render_scene(random_scene(canvas, rng));
    const auto st = scene_stats(img, mask);
    if (st.foreground_fraction >= kMinForeground && st.foreground_fraction <= kMaxForeground &&
        st.color_distance >= kMinColorDistance)
      return {std::move(img), std::move(mask)};
  }
  throw ParameterError("generate_scene: no valid scene for canvas " + std::to_string(canvas));
}

/// Writes `count` image/mask pairs and `manifest.json` into `out_dir`.
inline DatasetManifest gen_dataset(std::size_t count, std::size_t canvas, std::uint64_t seed,
                                   const std::string& out_dir) {
  if (count == 0) throw ParameterError("gen_dataset: count must be >= 1");
  if (canvas < 8) throw ParameterError("gen_dataset: canvas must be >= 8");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw InputError("gen_dataset: cannot create " + out_dir + ": " + ec.message());
  std::mt19937_64 rng(seed);
  DatasetManifest m;
  m.seed = seed;
  const auto dir = std::filesystem::path(out_dir);
  for (std::size_t i = 0; i < count; ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    auto [img, mask] = generate_scene(canvas, rng);
    ManifestEntry e{(dir / ("img_" + std::string(stem) + ".ppm")).string(),
                    (dir / ("mask_" + std::string(stem) + ".pgm")).string()};
    save_netpbm(e.image, img);
    save_netpbm(e.mask, mask);
    m.entries.push_back(std::move(e));
  }
  save_manifest((dir / "manifest.json").string(), m);
  return m;
}

// ------------------------------------------------------------ augmentation

inline Sample mirror_horizontal(const Sample& s) {
  const std::size_t h = s.image.dim(0), w = s.image.dim(1), c = s.image.dim(2);
  Sample out{Tensor(s.image.dims()), s.mask};
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t k = 0; k < c; ++k) out.image[(y * w + x) * c + k] = s.image[(y * w + (w - 1 - x)) * c + k];
      out.mask.values[y * w + x] = s.mask.values[y * w + (w - 1 - x)];
    }
  return out;
}

/// Bilinear resize of an [H,W,C] tensor (pixel-centre alignment); results are
/// snapped to the pixel grid.
inline Tensor resize_bilinear(const Tensor& img, std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw,
                              std::size_t out_h, std::size_t out_w) {
  const std::size_t w = img.dim(1), c = img.dim(2);
  Tensor out({out_h, out_w, c});
  auto coord = [](std::size_t d, std::size_t src, std::size_t dst) {
    const double v = (static_cast<double>(d) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
    return std::clamp(v, 0.0, static_cast<double>(src - 1));
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, ch, out_h);
    const auto ya = static_cast<std::size_t>(sy);
    const std::size_t yb = std::min(ya + 1, ch - 1);
    const double fy = sy - static_cast<double>(ya);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, cw, out_w);
      const auto xa = static_cast<std::size_t>(sx);
      const std::size_t xb = std::min(xa + 1, cw - 1);
      const double fx = sx - static_cast<double>(xa);
      for (std::size_t k = 0; k < c; ++k) {
        auto at = [&](std::size_t yy, std::size_t xx) { return img[((y0 + yy) * w + (x0 + xx)) * c + k]; };
        const double v = (1 - fy) * ((1 - fx) * at(ya, xa) + fx * at(ya, xb)) + fy * ((1 - fx) * at(yb, xa) + fx * at(yb, xb));
        out[(y * out_w + x) * c + k] = to_grid(v);
      }
    }
  }
  return out;
}

/// Crops [y0, y0+ch) x [x0, x0+cw) and resizes back to the original size.
/// The mask is interpolated the same way and re-binarized at 0.5.
inline Sample crop_resize(const Sample& s, std::size_t y0, std::size_t x0, std::size_t ch, std::size_t cw) {
  const std::size_t h = s.image.dim(0), w = s.image.dim(1);
  if (ch == 0 || cw == 0 || y0 + ch > h || x0 + cw > w)
    throw ParameterError("crop_resize: crop window outside the image");
  Tensor m({h, w, 1});
  for (std::size_t i = 0; i < s.mask.values.size(); ++i) m[i] = s.mask.values[i];
  Sample out{resize_bilinear(s.image, y0, x0, ch, cw, h, w), {w, h, std::vector<std::uint8_t>(h * w)}};
  Tensor mr = resize_bilinear(m, y0, x0, ch, cw, h, w);
  for (std::size_t i = 0; i < out.mask.values.size(); ++i) out.mask.values[i] = mr[i] >= 0.5 ? 1 : 0;
  return out;
}

inline constexpr double kMinCropFraction = 0.8;

/// Random crop keeping at least 80% of each side, then a horizontal mirror
/// with probability 1/2; the same transform is applied to image and mask.
inline Sample augment(const Sample& s, std::mt19937_64& rng) {
  const std::size_t h = s.image.dim(0), w = s.image.dim(1);
  auto pick = [&](std::size_t n) {
    const auto lo = static_cast<std::size_t>(std::ceil(kMinCropFraction * static_cast<double>(n)));
    return lo + static_cast<std::size_t>(rng() % (n - lo + 1));
  };
  const std::size_t ch = pick(h), cw = pick(w);
  const std::size_t y0 = rng() % (h - ch + 1), x0 = rng() % (w - cw + 1);
  Sample out = crop_resize(s, y0, x0, ch, cw);
  if (rng() & 1) out = mirror_horizontal(out);
  return out;
}

inline Sample augment(const Sample& s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return augment(s, rng);
}

}  // namespace hyperfusion
