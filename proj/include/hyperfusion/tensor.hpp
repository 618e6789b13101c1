#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hyperfusion/errors.hpp"

namespace hyperfusion {

inline std::size_t shape_numel(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

// Cache-line aligned storage, so vectorized kernels see the same alignment on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

struct TensorData {
  Shape dims;
  AlignedBuffer values;
  AlignedBuffer grad;  // empty until first accumulation
  bool requires_grad = false;
  std::size_t id = 0;

  static std::size_t next_id() {
    static std::atomic<std::size_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
  }
};

}  // namespace detail

/// Dense row-major array of doubles with an optional gradient buffer.
///
/// Tensor is a shared handle: copies alias the same storage, which is how a
/// single convolution kernel is read by several branches of the network.
/// Use clone() for an independent deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape dims, double fill = 0.0, bool requires_grad = false)
      : data_(std::make_shared<detail::TensorData>()) {
    for (std::size_t d : dims)
      if (d == 0) throw ShapeError("Tensor: zero-sized dimension in " + shape_string(dims));
    data_->values.assign(shape_numel(dims), fill);
    data_->dims = std::move(dims);
    data_->requires_grad = requires_grad;
    data_->id = detail::TensorData::next_id();
  }

  static Tensor from(Shape dims, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(dims) != values.size())
      throw ShapeError("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                       shape_string(dims));
    Tensor t(std::move(dims), 0.0, requires_grad);
    std::copy(values.begin(), values.end(), t.data_->values.begin());
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  bool defined() const noexcept { return static_cast<bool>(data_); }
  std::size_t id() const noexcept { return data_ ? data_->id : 0; }

  const Shape& dims() const { return data_->dims; }
  std::size_t rank() const { return data_->dims.size(); }
  std::size_t dim(std::size_t i) const { return data_->dims.at(i); }
  std::size_t numel() const { return data_->values.size(); }

  std::span<double> values() { return data_->values; }
  std::span<const double> values() const { return data_->values; }
  double operator[](std::size_t i) const { return data_->values[i]; }
  double& operator[](std::size_t i) { return data_->values[i]; }

  double item() const {
    if (numel() != 1) throw ContractError("Tensor::item on tensor of shape " + shape_string(dims()));
    return data_->values[0];
  }

  bool requires_grad() const noexcept { return data_ && data_->requires_grad; }
  void set_requires_grad(bool on) { data_->requires_grad = on; }

  bool has_grad() const noexcept { return data_ && !data_->grad.empty(); }
  std::span<const double> grad() const { return data_->grad; }

  /// Gradient buffer, allocated (zeroed) on first use.
  std::span<double> grad_mut() const {
    if (data_->grad.empty()) data_->grad.assign(data_->values.size(), 0.0);
    return data_->grad;
  }

  void zero_grad() {
    if (!data_->grad.empty()) std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
  }
  void drop_grad() const { detail::AlignedBuffer().swap(data_->grad); }

  bool same_storage(const Tensor& other) const noexcept { return data_ == other.data_; }

  Tensor clone() const {
    Tensor t(dims(), 0.0, data_->requires_grad);
    t.data_->values = data_->values;
    return t;
  }

  /// Same values, new identity, no gradient tracking.
  Tensor detach() const {
    Tensor t(dims());
    t.data_->values = data_->values;
    return t;
  }

  Tensor reshaped(Shape dims) const {
    if (shape_numel(dims) != numel())
      detail::shape_fail("reshape", this->dims(), dims, "element count differs");
    Tensor t(std::move(dims));
    t.data_->values = data_->values;
    return t;
  }

  bool all_finite() const {
    return std::all_of(data_->values.begin(), data_->values.end(), [](double v) { return std::isfinite(v); });
  }

 private:
  std::shared_ptr<detail::TensorData> data_;
};

}  // namespace hyperfusion
