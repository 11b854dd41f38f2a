#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sawnet/error.hpp"

namespace sawnet {

using Shape = std::vector<std::size_t>;

enum class DType { f32, f64 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};

inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }
inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

// Dense row-major array. Rank 0 is a scalar holding one element.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != element_count(shape_))
      throw DimensionError("tensor of shape " + to_string(shape_) + " needs " +
                           std::to_string(element_count(shape_)) + " elements, got " +
                           std::to_string(data_.size()));
  }

  static Tensor scalar(T v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size())
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           to_string(shape_));
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  T* raw() noexcept { return data_.data(); }
  const T* raw() const noexcept { return data_.data(); }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

  T item() const {
    if (data_.size() != 1)
      throw DimensionError("item() on tensor of shape " + to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const& { return Tensor(std::move(shape), data_); }
  Tensor reshaped(Shape shape) && { return Tensor(std::move(shape), std::move(data_)); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    for (const auto& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (auto e : shape_)
      if (e == 0) throw DimensionError("zero extent in shape " + to_string(shape_));
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size())
      throw DimensionError("index rank " + std::to_string(idx.size()) + " vs shape " +
                           to_string(shape_));
    std::size_t off = 0, axis = 0;
    for (auto i : idx) {
      if (i >= shape_[axis]) throw DimensionError("index out of range for " + to_string(shape_));
      off = off * shape_[axis++] + i;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

using IndexTensor = Tensor<std::int64_t>;

}  // namespace sawnet
