#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "meshnet/errors.hpp"

namespace meshnet {

/// Dense N-d numeric array. Activations are 5-d (batch, channels, x, y, z)
/// with x fastest-varying in memory, matching the volume layout.
/// `grad` is either empty or a same-size buffer.
template <typename T>
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<T> values;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    values.assign(static_cast<std::size_t>(count(shape)), T(0));
  }
  Tensor(std::vector<std::int64_t> s, std::vector<T> v)
      : shape(std::move(s)), values(std::move(v)) {
    if (static_cast<std::int64_t>(values.size()) != count(shape))
      throw ShapeError("tensor value count does not match shape");
  }

  static std::int64_t count(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) {
      if (d <= 0) throw ShapeError("tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  std::int64_t dim(std::size_t i) const { return shape.at(i); }

  bool has_grad() const { return !grad.empty(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), T(0));
  }
  void zero_grad() {
    if (has_grad()) std::fill(grad.begin(), grad.end(), T(0));
  }

  T* data() { return values.data(); }
  const T* data() const { return values.data(); }

  /// Index into a 5-d activation tensor (n, c, x, y, z), x contiguous.
  std::int64_t at5(std::int64_t n, std::int64_t c, std::int64_t x,
                   std::int64_t y, std::int64_t z) const {
    const std::int64_t X = shape[2], Y = shape[3], Z = shape[4];
    return x + X * (y + Y * (z + Z * (c + shape[1] * n)));
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.values.resize(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      out.values[i] = static_cast<U>(values[i]);
    return out;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i)
      os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
  }
};

}  // namespace meshnet
