#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <type_traits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "jea/errors.hpp"

namespace jea {

using Shape = std::vector<std::size_t>;

// Allocator whose value-less construct() default-initializes, so resizing a
// float buffer that is about to be overwritten skips the zero fill.
// 64-byte aligned storage. Eigen picks its vectorized paths from buffer
// alignment, so unaligned buffers make results depend on where the heap put
// them; aligned ones keep every run bit-identical.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T, typename A = AlignedAllocator<T>>
class DefaultInitAllocator : public A {
  using traits = std::allocator_traits<A>;

 public:
  template <typename U>
  struct rebind {
    using other = DefaultInitAllocator<U, typename traits::template rebind_alloc<U>>;
  };
  using A::A;

  template <typename U>
  void construct(U* ptr) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(ptr)) U;
  }
  template <typename U, typename... Args>
  void construct(U* ptr, Args&&... args) {
    traits::construct(static_cast<A&>(*this), ptr, std::forward<Args>(args)...);
  }
};

struct Uninitialized {};
inline constexpr Uninitialized uninitialized{};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// Dense row-major array. `grad` is empty until a gradient is accumulated.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using Storage = std::vector<T, DefaultInitAllocator<T>>;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  // Contents are indeterminate; the caller overwrites every element.
  Tensor(Shape shape, Uninitialized) : shape_(std::move(shape)), data_(shape_numel(shape_)) {}

  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    check_size();
  }

  void check_size() const {
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("tensor shape " + shape_str(shape_) + " does not match " +
                           std::to_string(data_.size()) + " elements");
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t ndim() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  // Size of the last axis; row count is everything before it.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : data_.size() / cols(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  Storage& storage() noexcept { return data_; }
  const Storage& storage() const noexcept { return data_; }
  std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<T> row(std::size_t r) { return std::span<T>(data_).subspan(r * cols(), cols()); }
  std::span<const T> row(std::size_t r) const {
    return std::span<const T>(data_).subspan(r * cols(), cols());
  }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<T> grad() noexcept { return grad_; }
  std::span<const T> grad() const noexcept { return grad_; }
  void ensure_grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), T{0});
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T{0}); }
  void drop_grad() { grad_.clear(); grad_.shrink_to_fit(); }

  Tensor reshaped(Shape shape) const {
    Tensor out(std::move(shape), uninitialized);
    out.check_size();
    if (out.size() != size()) throw DimensionError("reshape changes element count");
    std::copy(data_.begin(), data_.end(), out.data_.begin());
    return out;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_, uninitialized);
    std::transform(data_.begin(), data_.end(), out.storage().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  Storage data_;
  std::vector<T, AlignedAllocator<T>> grad_;
};

}  // namespace jea
