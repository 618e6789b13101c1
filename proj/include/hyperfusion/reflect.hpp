#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "hyperfusion/tensor.hpp"

namespace hyperfusion {

/// Spacing of the value grid used for pixels and the cached dataset mean.
/// Differences and sums of grid values in [-2,2] are exact, so a pair built
/// from grid inputs inverts without rounding.
inline constexpr double kPixelQuantum = 1.0 / 16777216.0;

inline double to_grid(double v) { return std::nearbyint(v / kPixelQuantum) * kPixelQuantum; }

/// Reflection scale k and the mean image E subtracted before reflecting.
/// `mean` is either a per-channel vector [C] broadcast over H and W, or a full
/// [H,W,C] array matching the image.
struct SepParams {
  double k = 1.0;
  Tensor mean;
};

/// Transmitted image X - E and its reflection -k (X - E).
struct ReflectivePair {
  Tensor transmitted;
  Tensor reflected;
};

/// Splits an [H,W,C] image into its transmitted/reflected pair.
inline ReflectivePair separate(const Tensor& image, const SepParams& params) {
  if (!(params.k > 0.0) || !std::isfinite(params.k))
    throw ParameterError("separate: reflection scale k must be positive, got " + std::to_string(params.k));
  if (!image.defined() || image.rank() != 3)
    throw ShapeError("separate: expected [H,W,C] image, got " +
                     (image.defined() ? shape_string(image.dims()) : std::string("undefined")));
  if (!params.mean.defined()) throw ParameterError("separate: mean is undefined");
  if (!params.mean.all_finite()) throw ParameterError("separate: mean has non-finite entries");
  if (!image.all_finite()) throw ParameterError("separate: image has non-finite entries");

  const std::size_t channels = image.dim(2);
  const bool per_channel = params.mean.rank() == 1 && params.mean.numel() == channels;
  if (!per_channel && params.mean.dims() != image.dims())
    detail::shape_fail("separate", image.dims(), params.mean.dims(), "mean must be [C] or match the image");

  ReflectivePair pair{Tensor(image.dims()), Tensor(image.dims())};
  const auto x = image.values();
  const auto e = params.mean.values();
  auto t = pair.transmitted.values();
  auto r = pair.reflected.values();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double centred = x[i] - (per_channel ? e[i % channels] : e[i]);
    t[i] = centred;
    r[i] = -params.k * centred;
  }
  return pair;
}

/// Stacks [H,W,C] images into one [N,C,H,W] batch.
inline Tensor to_nchw(std::span<const Tensor> images) {
  if (images.empty()) throw InputError("to_nchw: no images");
  const Shape first = images.front().dims();
  if (first.size() != 3) throw ShapeError("to_nchw: expected [H,W,C] images, got " + shape_string(first));
  const std::size_t h = first[0], w = first[1], c = first[2];
  Tensor out({images.size(), c, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].dims() != first) detail::shape_fail("to_nchw", first, images[n].dims(), "batch shapes differ");
    const auto v = images[n].values();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) out[((n * c + ch) * h + y) * w + x] = v[(y * w + x) * c + ch];
  }
  return out;
}

/// Batches per-image pairs into one NCHW pair.
inline ReflectivePair to_nchw(std::span<const ReflectivePair> pairs) {
  std::vector<Tensor> t, r;
  for (const auto& p : pairs) {
    t.push_back(p.transmitted);
    r.push_back(p.reflected);
  }
  return {to_nchw(std::span<const Tensor>(t)), to_nchw(std::span<const Tensor>(r))};
}

/// Per-channel mean over every pixel of every [H,W,C] image, returned as [C].
inline Tensor dataset_mean(std::span<const Tensor> images) {
  if (images.empty()) throw InputError("dataset_mean: no images");
  const std::size_t channels = images.front().dim(images.front().rank() - 1);
  std::vector<double> sums(channels, 0.0);
  std::size_t pixels = 0;
  for (const auto& img : images) {
    if (img.rank() != 3 || img.dim(2) != channels)
      detail::shape_fail("dataset_mean", images.front().dims(), img.dims(), "channel count must agree");
    const auto v = img.values();
    for (std::size_t i = 0; i < v.size(); ++i) sums[i % channels] += v[i];
    pixels += img.dim(0) * img.dim(1);
  }
  Tensor mean({channels});
  for (std::size_t c = 0; c < channels; ++c) mean[c] = sums[c] / static_cast<double>(pixels);
  return mean;
}

}  // namespace hyperfusion
