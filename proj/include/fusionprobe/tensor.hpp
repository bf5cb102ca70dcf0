#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fusionprobe/error.hpp"

namespace fprobe {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Scalars are represented with shape {1}.
template <typename Scalar>
class Tensor {
 public:
  using value_type = Scalar;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), Scalar{0}) {
    check_shape();
  }

  Tensor(Shape shape, std::vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    require(data_.size() == shape_size(shape_), ErrorCode::kDimension,
            [&] { return "tensor of shape " + shape_string(shape_) + " given " + std::to_string(data_.size()) +
                " values"; });
  }

  static Tensor filled(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor scalar(Scalar value) { return Tensor({1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const Scalar> data() const noexcept { return data_; }
  std::span<Scalar> data() noexcept { return data_; }
  const std::vector<Scalar>& vec() const noexcept { return data_; }

  Scalar operator[](std::size_t i) const { return data_[i]; }
  Scalar& operator[](std::size_t i) { return data_[i]; }

  Scalar item() const {
    require(data_.size() == 1, ErrorCode::kDimension, "item() on non-scalar tensor");
    return data_[0];
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    std::vector<Other> out(data_.begin(), data_.end());
    return Tensor<Other>(shape_, std::move(out));
  }

  bool all_finite() const {
    if constexpr (std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>) {
      using Bits = std::conditional_t<std::is_same_v<Scalar, float>, std::uint32_t, std::uint64_t>;
      constexpr Bits exponent = std::is_same_v<Scalar, float> ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
      Bits bad = 0;
      for (Scalar v : data_) bad |= static_cast<Bits>((std::bit_cast<Bits>(v) & exponent) == exponent);
      return bad == 0;
    } else {
      for (Scalar v : data_)
        if (!std::isfinite(v)) return false;
      return true;
    }
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    for (std::size_t d : shape_)
      require(d > 0, ErrorCode::kDimension, [&] { return "zero-sized dimension in " + shape_string(shape_); });
  }

  Shape shape_;
  std::vector<Scalar> data_;
};

}  // namespace fprobe
