#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "sfslots/errors.hpp"

namespace sfsl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor (last dim fastest). Scalar is float in production
// code; double instantiations exist for gradient oracles.
template <class S>
class Tensor {
 public:
  using value_type = S;

  Tensor() = default;

  explicit Tensor(Shape dims, S fill = S(0)) : dims_(std::move(dims)) {
    check_dims();
    data_.assign(shape_size(dims_), fill);
  }

  Tensor(Shape dims, std::vector<S> data) : dims_(std::move(dims)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_size(dims_)) {
      throw ShapeError("tensor payload has " + std::to_string(data_.size()) +
                       " elements, dims " + shape_str(dims_) + " need " +
                       std::to_string(shape_size(dims_)));
    }
  }

  static Tensor zeros(Shape dims) { return Tensor(std::move(dims), S(0)); }
  static Tensor ones(Shape dims) { return Tensor(std::move(dims), S(1)); }
  static Tensor scalar(S v) { return Tensor(Shape{1}, v); }

  // 2-D convenience: {{1,2},{3,4}}.
  static Tensor matrix(std::initializer_list<std::initializer_list<S>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<S> flat;
    flat.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      flat.insert(flat.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(flat));
  }

  const Shape& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rows/cols view a tensor of rank >= 1 as [prod(leading) x last].
  std::size_t cols() const { return dims_.empty() ? 0 : dims_.back(); }
  std::size_t rows() const { return cols() == 0 ? 0 : size() / cols(); }

  std::span<S> data() { return data_; }
  std::span<const S> data() const { return data_; }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  S& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const S& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  Tensor reshaped(Shape dims) const {
    if (shape_size(dims) != size()) {
      throw ShapeError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
    }
    return Tensor(std::move(dims), data_);
  }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](S v) { return std::isfinite(v); });
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

 private:
  void check_dims() const {
    for (auto d : dims_) {
      if (d == 0) throw ShapeError("tensor dims must be positive, got " + shape_str(dims_));
    }
  }

  Shape dims_;
  std::vector<S> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Bitwise equality (distinguishes -0.0 from 0.0 and compares NaN payloads).
template <class S>
bool bit_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.dims() != b.dims()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                    [](S x, S y) { return std::memcmp(&x, &y, sizeof(S)) == 0; });
}

template <class S>
S max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.dims() != b.dims()) throw ShapeError("max_abs_diff: shape mismatch");
  S m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace sfsl
