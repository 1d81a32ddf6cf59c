#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "olivine/error.hpp"

namespace olivine {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_volume(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

// Every block is 64-byte aligned so vectorized kernels take the same path,
// and round the same way, wherever a buffer happens to land.
inline constexpr std::align_val_t kTensorAlignment{64};

// Recycles large buffers by exact size. Activation tensors of a handful of
// sizes are created and dropped on every batch, and fresh pages from the OS
// cost more than the arithmetic done on them.
class BufferPool {
 public:
  static constexpr std::size_t kMinBytes = std::size_t{1} << 20;
  static constexpr std::size_t kMaxCached = std::size_t{1} << 30;

  static BufferPool& local() {
    thread_local BufferPool pool;
    return pool;
  }

  void* take(std::size_t bytes) {
    if (auto it = free_.find(bytes); it != free_.end()) {
      void* p = it->second;
      free_.erase(it);
      cached_ -= bytes;
      return p;
    }
    return ::operator new(bytes, kTensorAlignment);
  }

  void give(void* p, std::size_t bytes) {
    while (cached_ + bytes > kMaxCached && !free_.empty()) {
      auto it = std::prev(free_.end());
      cached_ -= it->first;
      ::operator delete(it->second, kTensorAlignment);
      free_.erase(it);
    }
    if (bytes > kMaxCached) {
      ::operator delete(p, kTensorAlignment);
      return;
    }
    free_.emplace(bytes, p);
    cached_ += bytes;
  }

  BufferPool() = default;
  BufferPool(const BufferPool&) = delete;
  BufferPool& operator=(const BufferPool&) = delete;
  ~BufferPool() {
    for (auto& [bytes, p] : free_) ::operator delete(p, kTensorAlignment);
  }

 private:
  std::multimap<std::size_t, void*> free_;
  std::size_t cached_ = 0;
};

// Pooled for large blocks; resize() default-initializes instead of zeroing.
template <typename T>
struct PoolAllocator {
  using value_type = T;

  PoolAllocator() = default;
  template <typename U>
  PoolAllocator(const PoolAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    if (bytes >= BufferPool::kMinBytes) return static_cast<T*>(BufferPool::local().take(bytes));
    return static_cast<T*>(::operator new(bytes, kTensorAlignment));
  }
  void deallocate(T* p, std::size_t n) noexcept {
    const std::size_t bytes = n * sizeof(T);
    if (bytes >= BufferPool::kMinBytes) {
      BufferPool::local().give(p, bytes);
    } else {
      ::operator delete(p, kTensorAlignment);
    }
  }

  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }

  template <typename U>
  bool operator==(const PoolAllocator<U>&) const noexcept {
    return true;
  }
};

}  // namespace detail

// Dense row-major tensor (last axis fastest). Value type; copies are deep.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_volume(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    check_shape();
    if (shape_volume(shape_) != data_.size()) {
      throw ShapeError("tensor of shape " + shape_string(shape_) + " cannot hold " +
                       std::to_string(data_.size()) + " values");
    }
  }

  // Contents unspecified; for outputs that are fully overwritten.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.check_shape();
    t.data_.resize(shape_volume(t.shape_));
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  // Multi-index access; the index count must equal rank().
  template <typename... Idx>
  T& operator()(Idx... idx) noexcept {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }
  template <typename... Idx>
  const T& operator()(Idx... idx) const noexcept {
    return data_[offset(static_cast<std::size_t>(idx)...)];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  Tensor reshaped(Shape shape) const {
    if (shape_volume(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  Tensor& operator+=(const Tensor& other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor& operator*=(T scale) {
    for (auto& v : data_) v *= scale;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }

  bool operator==(const Tensor& other) const = default;

  void require_same_shape(const Tensor& other, std::string_view what) const {
    if (shape_ != other.shape_) {
      throw ShapeError(std::string(what) + ": shape " + shape_string(shape_) + " vs " +
                       shape_string(other.shape_));
    }
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_string(shape_));
    }
  }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const noexcept {
    std::size_t flat = 0;
    std::size_t axis = 0;
    ((flat = flat * shape_[axis++] + idx), ...);
    return flat;
  }

  Shape shape_;
  std::vector<T, detail::PoolAllocator<T>> data_;
};

}  // namespace olivine
