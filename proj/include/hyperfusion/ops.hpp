#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hyperfusion/tape.hpp"
#include "hyperfusion/tensor.hpp"

namespace hyperfusion {

/// Per-channel normalization parameters plus running statistics.
struct NormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;  // buffers, never trained
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;

  NormState() = default;
  explicit NormState(std::size_t channels)
      : gamma({channels}, 1.0, true),
        beta({channels}, 0.0, true),
        running_mean({channels}, 0.0),
        running_var({channels}, 1.0) {}

  std::size_t channels() const { return running_mean.numel(); }
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Geometry of a (possibly strided) convolution over one image.
struct ConvGeom {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;

  std::size_t col_rows() const { return channels * kernel * kernel; }
  std::size_t col_cols() const { return out_h * out_w; }
};

inline ConvGeom make_geom(std::size_t c, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                          std::size_t pad) {
  ConvGeom g{c, h, w, k, stride, pad, 0, 0};
  g.out_h = (h + 2 * pad - k) / stride + 1;
  g.out_w = (w + 2 * pad - k) / stride + 1;
  return g;
}

// Output columns ox whose input column ox*stride + kx - pad lies inside the image.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeom& g, std::size_t kx) {
  const std::size_t lo = kx >= g.pad ? 0 : (g.pad - kx + g.stride - 1) / g.stride;
  if (kx >= g.width + g.pad) return {0, 0};
  const std::size_t limit = g.width + g.pad - kx;  // ox*stride < limit
  const std::size_t hi = std::min(g.out_w, (limit + g.stride - 1) / g.stride);
  return {std::min(lo, hi), hi};
}

// Patch matrix for output rows [row_begin, row_end): one row per (c, ky, kx),
// one column per output position in that band.
inline void im2col(const double* x, const ConvGeom& g, double* col, std::size_t row_begin = 0,
                   std::size_t row_end = std::size_t(-1)) {
  row_end = std::min(row_end, g.out_h);
  const std::size_t cols = (row_end - row_begin) * g.out_w;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c) {
    const double* plane = x + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t oy = row_begin; oy < row_end; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          double* dst = row + (oy - row_begin) * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * g.width;
          const auto [lo, hi] = valid_columns(g, kx);
          std::fill(dst, dst + lo, 0.0);
          if (g.stride == 1) {
            std::copy(src + (lo + kx - g.pad), src + (hi + kx - g.pad), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + kx - g.pad];
          }
          std::fill(dst + hi, dst + g.out_w, 0.0);
        }
      }
    }
  }
}

// Accumulates col back onto x (adjoint of im2col over the same band).
inline void col2im(const double* col, const ConvGeom& g, double* x, std::size_t row_begin = 0,
                   std::size_t row_end = std::size_t(-1)) {
  row_end = std::min(row_end, g.out_h);
  const std::size_t cols = (row_end - row_begin) * g.out_w;
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.channels; ++c) {
    double* plane = x + c * g.height * g.width;
    for (std::size_t ky = 0; ky < g.kernel; ++ky) {
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* row = col + ((c * g.kernel + ky) * g.kernel + kx) * cols;
        for (std::size_t oy = row_begin; oy < row_end; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * g.width;
          const double* src = row + (oy - row_begin) * g.out_w;
          const auto [lo, hi] = valid_columns(g, kx);
          for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + kx - g.pad] += src[ox];
        }
      }
    }
  }
}

// Output rows per im2col band, sized so one band stays cache resident.
inline std::size_t band_rows(const ConvGeom& g) {
  constexpr std::size_t kBandDoubles = std::size_t{1} << 15;
  return std::clamp<std::size_t>(kBandDoubles / std::max<std::size_t>(g.col_rows() * g.out_w, 1), 1, g.out_h);
}

inline void require_rank4(const std::string& op, const Tensor& x) {
  if (!x.defined() || x.rank() != 4)
    throw ShapeError(op + ": expected NCHW tensor, got " + (x.defined() ? shape_string(x.dims()) : "undefined"));
}

inline Tensor make_output(Shape dims, bool requires_grad) { return Tensor(std::move(dims), 0.0, requires_grad); }

}  // namespace detail

/// Stride-1 convolution with zero "same" padding (pad = K/2).
/// input [N,C,H,W], kernel [O,C,K,K] with K odd, optional bias [O].
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& kernel, const Tensor& bias = {}) {
  detail::require_rank4("conv2d", input);
  if (!kernel.defined() || kernel.rank() != 4 || kernel.dim(2) != kernel.dim(3) || kernel.dim(2) % 2 == 0)
    throw ShapeError("conv2d: kernel must be [O,C,K,K] with odd K, got " + shape_string(kernel.dims()));
  if (kernel.dim(1) != input.dim(1))
    detail::shape_fail("conv2d", input.dims(), kernel.dims(), "input channels differ from kernel C");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t o = kernel.dim(0), k = kernel.dim(2);
  if (bias.defined() && (bias.numel() != o))
    detail::shape_fail("conv2d", kernel.dims(), bias.dims(), "bias length differs from output channels");

  const auto g = detail::make_geom(c, h, w, k, 1, k / 2);
  const bool rg = any_requires_grad({&input, &kernel, &bias});
  Tensor out = detail::make_output({n, o, h, w}, rg);

  const bool pointwise = (k == 1);
  const std::size_t band = detail::band_rows(g);
  detail::AlignedBuffer col(pointwise ? 0 : g.col_rows() * band * w);
  const detail::ConstMap wm(kernel.values().data(), static_cast<Eigen::Index>(o),
                            static_cast<Eigen::Index>(g.col_rows()));
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = input.values().data() + i * c * h * w;
    detail::MutMap ym(out.values().data() + i * o * h * w, static_cast<Eigen::Index>(o),
                      static_cast<Eigen::Index>(h * w));
    if (pointwise) {
      ym.noalias() = wm * detail::ConstMap(x, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(h * w));
    } else {
      for (std::size_t r0 = 0; r0 < h; r0 += band) {
        const std::size_t r1 = std::min(h, r0 + band), cols = (r1 - r0) * w;
        detail::im2col(x, g, col.data(), r0, r1);
        const detail::ConstMap cm(col.data(), static_cast<Eigen::Index>(g.col_rows()), static_cast<Eigen::Index>(cols));
        ym.middleCols(static_cast<Eigen::Index>(r0 * w), static_cast<Eigen::Index>(cols)).noalias() = wm * cm;
      }
    }
    if (bias.defined())
      for (std::size_t oc = 0; oc < o; ++oc) ym.row(static_cast<Eigen::Index>(oc)).array() += bias[oc];
  }

  if (rg) {
    tape.record("conv2d", {input, kernel, bias}, out, [input, kernel, bias, out, g, n, o, pointwise, band]() mutable {
      const std::size_t c = g.channels, h = g.height, w = g.width, hw = h * w;
      const auto gy = out.grad();
      detail::AlignedBuffer col(pointwise ? 0 : g.col_rows() * band * w);
      detail::AlignedBuffer dcol(col.size());
      const detail::ConstMap wm(kernel.values().data(), static_cast<Eigen::Index>(o),
                                static_cast<Eigen::Index>(g.col_rows()));
      const auto rows = static_cast<Eigen::Index>(g.col_rows());
      for (std::size_t i = 0; i < n; ++i) {
        detail::ConstMap dy(gy.data() + i * o * hw, static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(hw));
        if (bias.defined() && bias.requires_grad()) {
          auto gb = bias.grad_mut();
          for (std::size_t oc = 0; oc < o; ++oc) gb[oc] += dy.row(static_cast<Eigen::Index>(oc)).sum();
        }
        const double* x = input.values().data() + i * c * hw;
        double* dx = input.requires_grad() ? input.grad_mut().data() + i * c * hw : nullptr;
        std::optional<detail::MutMap> dw;
        if (kernel.requires_grad()) dw.emplace(kernel.grad_mut().data(), static_cast<Eigen::Index>(o), rows);
        if (pointwise) {
          const detail::ConstMap xm(x, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(hw));
          if (dw) dw->noalias() += dy * xm.transpose();
          if (dx) detail::MutMap(dx, static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(hw)).noalias() += wm.transpose() * dy;
          continue;
        }
        for (std::size_t r0 = 0; r0 < h; r0 += band) {
          const std::size_t r1 = std::min(h, r0 + band), cols = (r1 - r0) * w;
          const auto dyb = dy.middleCols(static_cast<Eigen::Index>(r0 * w), static_cast<Eigen::Index>(cols));
          if (dw) {
            detail::im2col(x, g, col.data(), r0, r1);
            dw->noalias() += dyb * detail::ConstMap(col.data(), rows, static_cast<Eigen::Index>(cols)).transpose();
          }
          if (dx) {
            detail::MutMap(dcol.data(), rows, static_cast<Eigen::Index>(cols)).noalias() = wm.transpose() * dyb;
            detail::col2im(dcol.data(), g, dx, r0, r1);
          }
        }
      }
    });
  }
  return out;
}

/// Transposed convolution, stride 2, kernel 4x4, padding 1: doubles H and W.
/// input [N,Ci,H,W], kernel [Ci,Co,4,4] -> [N,Co,2H,2W]. This is exactly the
/// adjoint of a stride-2 4x4 convolution with the same kernel read as [Ci,Co,4,4].
inline Tensor upsample2x(Tape& tape, const Tensor& input, const Tensor& kernel) {
  detail::require_rank4("upsample2x", input);
  if (!kernel.defined() || kernel.rank() != 4 || kernel.dim(2) != 4 || kernel.dim(3) != 4)
    throw ShapeError("upsample2x: kernel must be [Ci,Co,4,4], got " + shape_string(kernel.dims()));
  if (kernel.dim(0) != input.dim(1))
    detail::shape_fail("upsample2x", input.dims(), kernel.dims(), "input channels differ from kernel Ci");
  const std::size_t n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t co = kernel.dim(1);
  // Geometry of the forward (downsampling) convolution this op is the adjoint of.
  const auto g = detail::make_geom(co, 2 * h, 2 * w, 4, 2, 1);
  const bool rg = any_requires_grad({&input, &kernel});
  Tensor out = detail::make_output({n, co, 2 * h, 2 * w}, rg);

  const std::size_t hw = h * w, rows = g.col_rows();
  const detail::ConstMap km(kernel.values().data(), static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(rows));
  detail::AlignedBuffer col(rows * hw);
  for (std::size_t i = 0; i < n; ++i) {
    detail::ConstMap xm(input.values().data() + i * ci * hw, static_cast<Eigen::Index>(ci),
                        static_cast<Eigen::Index>(hw));
    detail::MutMap cm(col.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
    cm.noalias() = km.transpose() * xm;
    detail::col2im(col.data(), g, out.values().data() + i * co * 4 * hw);
  }

  if (rg) {
    tape.record("upsample2x", {input, kernel}, out, [input, kernel, out, g, n, ci, hw, rows]() mutable {
      const auto gy = out.grad();
      detail::AlignedBuffer dcol(rows * hw);
      const detail::ConstMap km(kernel.values().data(), static_cast<Eigen::Index>(ci),
                                static_cast<Eigen::Index>(rows));
      for (std::size_t i = 0; i < n; ++i) {
        detail::im2col(gy.data() + i * g.channels * 4 * hw, g, dcol.data());
        detail::ConstMap dc(dcol.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(hw));
        if (input.requires_grad()) {
          detail::MutMap dx(input.grad_mut().data() + i * ci * hw, static_cast<Eigen::Index>(ci),
                            static_cast<Eigen::Index>(hw));
          dx.noalias() += km * dc;
        }
        if (kernel.requires_grad()) {
          detail::ConstMap xm(input.values().data() + i * ci * hw, static_cast<Eigen::Index>(ci),
                              static_cast<Eigen::Index>(hw));
          detail::MutMap dk(kernel.grad_mut().data(), static_cast<Eigen::Index>(ci),
                            static_cast<Eigen::Index>(rows));
          dk.noalias() += xm * dc.transpose();
        }
      }
    });
  }
  return out;
}

/// 2x2 max pooling with stride 2. Ties go to the first position in row-major
/// order within the window.
inline Tensor maxpool2d(Tape& tape, const Tensor& input) {
  detail::require_rank4("maxpool2d", input);
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2) throw ShapeError("maxpool2d: spatial dims must be even, got " + shape_string(input.dims()));
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor out = detail::make_output({n, c, oh, ow}, input.requires_grad());
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.numel());
  const auto x = input.values();
  auto y = out.values();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox, ++o) {
        std::size_t best = base + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * oy + dy) * w + 2 * ox + dx;
            if (x[idx] > x[best] || std::isnan(x[idx])) best = idx;
          }
        y[o] = x[best];
        (*argmax)[o] = best;
      }
    }
  }
  if (input.requires_grad()) {
    tape.record("maxpool2d", {input}, out, [input, out, argmax]() mutable {
      auto gx = input.grad_mut();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
    });
  }
  return out;
}

/// Channel-wise concatenation of NCHW tensors sharing N, H and W.
inline Tensor concat_channels(Tape& tape, std::span<const Tensor> inputs) {
  if (inputs.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& t : inputs) detail::require_rank4("concat_channels", t);
  const Tensor& first = inputs.front();
  const std::size_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
  std::size_t total = 0;
  bool rg = false;
  for (const auto& t : inputs) {
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w)
      detail::shape_fail("concat_channels", first.dims(), t.dims(), "N, H, W must agree");
    total += t.dim(1);
    rg = rg || t.requires_grad();
  }
  Tensor out = detail::make_output({n, total, h, w}, rg);
  const std::size_t hw = h * w;
  auto y = out.values();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t offset = 0;
    for (const auto& t : inputs) {
      const std::size_t ct = t.dim(1);
      const auto src = t.values().subspan(i * ct * hw, ct * hw);
      std::copy(src.begin(), src.end(), y.begin() + static_cast<std::ptrdiff_t>((i * total + offset) * hw));
      offset += ct;
    }
  }
  if (rg) {
    std::vector<Tensor> ins(inputs.begin(), inputs.end());
    tape.record("concat_channels", ins, out, [ins, out, n, total, hw]() mutable {
      const auto gy = out.grad();
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t offset = 0;
        for (auto& t : ins) {
          const std::size_t ct = t.dim(1);
          if (t.requires_grad()) {
            auto gx = t.grad_mut();
            const double* src = gy.data() + (i * total + offset) * hw;
            double* dst = gx.data() + i * ct * hw;
            for (std::size_t j = 0; j < ct * hw; ++j) dst[j] += src[j];
          }
          offset += ct;
        }
      }
    });
  }
  return out;
}

inline Tensor concat_channels(Tape& tape, std::initializer_list<Tensor> inputs) {
  std::vector<Tensor> v(inputs);
  return concat_channels(tape, std::span<const Tensor>(v));
}

/// Channels [begin, begin+count) of an NCHW tensor.
inline Tensor slice_channels(Tape& tape, const Tensor& input, std::size_t begin, std::size_t count) {
  detail::require_rank4("slice_channels", input);
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (count == 0 || begin + count > c)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + "," + std::to_string(begin + count) +
                     ") outside " + shape_string(input.dims()));
  Tensor out = detail::make_output({n, count, input.dim(2), input.dim(3)}, input.requires_grad());
  for (std::size_t i = 0; i < n; ++i) {
    const auto src = input.values().subspan((i * c + begin) * hw, count * hw);
    std::copy(src.begin(), src.end(), out.values().begin() + static_cast<std::ptrdiff_t>(i * count * hw));
  }
  if (input.requires_grad()) {
    tape.record("slice_channels", {input}, out, [input, out, n, c, hw, begin, count]() mutable {
      auto gx = input.grad_mut();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < count * hw; ++j) gx[(i * c + begin) * hw + j] += gy[i * count * hw + j];
    });
  }
  return out;
}

/// [N,1,H,W] -> [N,reps,H,W] by copying the single channel.
inline Tensor repeat_channels(Tape& tape, const Tensor& input, std::size_t reps) {
  detail::require_rank4("repeat_channels", input);
  if (input.dim(1) != 1) throw ShapeError("repeat_channels: expected 1 channel, got " + shape_string(input.dims()));
  std::vector<Tensor> copies(reps, input);
  return concat_channels(tape, std::span<const Tensor>(copies));
}

inline Tensor relu(Tape& tape, const Tensor& input) {
  Tensor out = detail::make_output(input.dims(), input.requires_grad());
  const auto x = input.values();
  auto y = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] <= 0.0 ? 0.0 : x[i];
  if (input.requires_grad()) {
    tape.record("relu", {input}, out, [input, out]() mutable {
      auto gx = input.grad_mut();
      const auto gy = out.grad();
      const auto x = input.values();
      for (std::size_t i = 0; i < gy.size(); ++i)
        if (x[i] > 0.0) gx[i] += gy[i];
    });
  }
  return out;
}

namespace detail {

template <class Fwd, class Bwd>
Tensor binary_elementwise(Tape& tape, const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  if (a.dims() != b.dims()) shape_fail(op, a.dims(), b.dims());
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = make_output(a.dims(), rg);
  const auto x = a.values(), z = b.values();
  auto y = out.values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(x[i], z[i]);
  if (rg) {
    tape.record(op, {a, b}, out, [a, b, out, bwd]() mutable {
      const auto gy = out.grad();
      const auto x = a.values(), z = b.values();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += bwd(x[i], z[i], gy[i]).first;
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += bwd(x[i], z[i], gy[i]).second;
      }
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, "add", a, b, [](double x, double z) { return x + z; },
      [](double, double, double g) { return std::pair{g, g}; });
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, "sub", a, b, [](double x, double z) { return x - z; },
      [](double, double, double g) { return std::pair{g, -g}; });
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      tape, "mul", a, b, [](double x, double z) { return x * z; },
      [](double x, double z, double g) { return std::pair{g * z, g * x}; });
}

inline Tensor scale(Tape& tape, const Tensor& input, double factor) {
  Tensor out = detail::make_output(input.dims(), input.requires_grad());
  const auto x = input.values();
  auto y = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = factor * x[i];
  if (input.requires_grad()) {
    tape.record("scale", {input}, out, [input, out, factor]() mutable {
      auto gx = input.grad_mut();
      const auto gy = out.grad();
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += factor * gy[i];
    });
  }
  return out;
}

/// Sum of all elements, as a scalar tensor.
inline Tensor sum(Tape& tape, const Tensor& input) {
  Tensor out = detail::make_output({1}, input.requires_grad());
  double s = 0.0;
  for (double v : input.values()) s += v;
  out[0] = s;
  if (input.requires_grad()) {
    tape.record("sum", {input}, out, [input, out]() mutable {
      auto gx = input.grad_mut();
      const double g = out.grad()[0];
      for (double& v : gx) v += g;
    });
  }
  return out;
}

/// Σ weights[i] * input[i] for a constant weight vector.
inline Tensor weighted_sum(Tape& tape, const Tensor& input, std::vector<double> weights) {
  if (weights.size() != input.numel())
    throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                     shape_string(input.dims()));
  Tensor out = detail::make_output({1}, input.requires_grad());
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * input[i];
  out[0] = s;
  if (input.requires_grad()) {
    tape.record("weighted_sum", {input}, out, [input, out, w = std::move(weights)]() mutable {
      auto gx = input.grad_mut();
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < w.size(); ++i) gx[i] += g * w[i];
    });
  }
  return out;
}

/// Σ_n ||a_n - b_n||_2 over the leading (sample) axis. The gradient of the
/// norm at a zero difference is taken as zero.
inline Tensor sample_l2_distance(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) detail::shape_fail("sample_l2_distance", a.dims(), b.dims());
  const std::size_t n = a.dim(0), per = a.numel() / n;
  const bool rg = any_requires_grad({&a, &b});
  Tensor out = detail::make_output({1}, rg);
  auto norms = std::make_shared<std::vector<double>>(n, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
      const double d = a[j] - b[j];
      ss += d * d;
    }
    (*norms)[i] = std::sqrt(ss);
    total += (*norms)[i];
  }
  out[0] = total;
  if (rg) {
    tape.record("sample_l2_distance", {a, b}, out, [a, b, out, norms, n, per]() mutable {
      const double g = out.grad()[0];
      for (std::size_t i = 0; i < n; ++i) {
        const double norm = (*norms)[i];
        if (norm == 0.0) continue;
        for (std::size_t j = i * per; j < (i + 1) * per; ++j) {
          const double d = g * (a[j] - b[j]) / norm;
          if (a.requires_grad()) a.grad_mut()[j] += d;
          if (b.requires_grad()) b.grad_mut()[j] -= d;
        }
      }
    });
  }
  return out;
}

/// Foreground probability from two-class logits: exp(s1) / (exp(s0) + exp(s1)).
/// s [N,2,H,W] -> [N,1,H,W], evaluated in the overflow-free logistic form.
inline Tensor pixel_softmax2(Tape& tape, const Tensor& logits) {
  detail::require_rank4("pixel_softmax2", logits);
  if (logits.dim(1) != 2)
    throw ShapeError("pixel_softmax2: expected 2 channels, got " + shape_string(logits.dims()));
  const std::size_t n = logits.dim(0), hw = logits.dim(2) * logits.dim(3);
  Tensor out = detail::make_output({n, 1, logits.dim(2), logits.dim(3)}, logits.requires_grad());
  const auto s = logits.values();
  auto p = out.values();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < hw; ++j) {
      const double d = s[(2 * i + 1) * hw + j] - s[2 * i * hw + j];
      if (d >= 0.0) {
        p[i * hw + j] = 1.0 / (1.0 + std::exp(-d));
      } else {
        const double e = std::exp(d);
        p[i * hw + j] = e / (1.0 + e);
      }
    }
  if (logits.requires_grad()) {
    tape.record("pixel_softmax2", {logits}, out, [logits, out, n, hw]() mutable {
      auto gs = logits.grad_mut();
      const auto gy = out.grad();
      const auto p = out.values();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = gy[i * hw + j] * p[i * hw + j] * (1.0 - p[i * hw + j]);
          gs[(2 * i + 1) * hw + j] += d;
          gs[2 * i * hw + j] -= d;
        }
    });
  }
  return out;
}

/// Batch normalization over N, H, W per channel. Training mode normalizes with
/// batch statistics and folds them into the running estimates (unbiased
/// variance); eval mode uses the running estimates.
inline Tensor batchnorm(Tape& tape, const Tensor& input, NormState& state, bool training) {
  detail::require_rank4("batchnorm", input);
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (state.channels() != c || state.gamma.numel() != c || state.beta.numel() != c)
    throw ShapeError("batchnorm: state has " + std::to_string(state.channels()) + " channels, input " +
                     shape_string(input.dims()));
  const bool rg = any_requires_grad({&input, &state.gamma, &state.beta});
  Tensor out = detail::make_output(input.dims(), rg);
  const double m = static_cast<double>(n * hw);
  auto xhat = std::make_shared<std::vector<double>>(input.numel());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  const auto x = input.values();
  auto y = out.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean, var;
    if (training) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) s += x[(i * c + ch) * hw + j];
      mean = s / m;
      double ss = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < hw; ++j) {
          const double d = x[(i * c + ch) * hw + j] - mean;
          ss += d * d;
        }
      var = ss / m;
      const double unbiased = m > 1.0 ? ss / (m - 1.0) : var;
      state.running_mean[ch] = (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mean;
      state.running_var[ch] = (1.0 - state.momentum) * state.running_var[ch] + state.momentum * unbiased;
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const double inv = 1.0 / std::sqrt(var + state.epsilon);
    (*inv_std)[ch] = inv;
    const double gm = state.gamma[ch], bt = state.beta[ch];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < hw; ++j) {
        const std::size_t idx = (i * c + ch) * hw + j;
        const double xh = (x[idx] - mean) * inv;
        (*xhat)[idx] = xh;
        y[idx] = gm * xh + bt;
      }
  }
  if (rg) {
    Tensor gamma = state.gamma, beta = state.beta;
    tape.record("batchnorm", {input, gamma, beta}, out,
                [input, gamma, beta, out, xhat, inv_std, n, c, hw, m, training]() mutable {
                  const auto gy = out.grad();
                  for (std::size_t ch = 0; ch < c; ++ch) {
                    double sdy = 0.0, sdyx = 0.0;
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < hw; ++j) {
                        const std::size_t idx = (i * c + ch) * hw + j;
                        sdy += gy[idx];
                        sdyx += gy[idx] * (*xhat)[idx];
                      }
                    if (gamma.requires_grad()) gamma.grad_mut()[ch] += sdyx;
                    if (beta.requires_grad()) beta.grad_mut()[ch] += sdy;
                    if (!input.requires_grad()) continue;
                    auto gx = input.grad_mut();
                    const double scale = gamma[ch] * (*inv_std)[ch];
                    for (std::size_t i = 0; i < n; ++i)
                      for (std::size_t j = 0; j < hw; ++j) {
                        const std::size_t idx = (i * c + ch) * hw + j;
                        if (training)
                          gx[idx] += scale / m * (m * gy[idx] - sdy - (*xhat)[idx] * sdyx);
                        else
                          gx[idx] += scale * gy[idx];
                      }
                  }
                });
  }
  return out;
}

}  // namespace hyperfusion
