#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "cpae/errors.hpp"

namespace cpae {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

// Dense value holder. Values are float for training, double for the
// finite-difference harness; both instantiations share all the code below.
template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> values;

  Tensor() = default;
  Tensor(Shape s, std::vector<S> v) : shape(std::move(s)), values(std::move(v)) {
    if (static_cast<std::int64_t>(values.size()) != numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) +
                       " does not match shape " + shape_str(shape));
    check_finite();
  }

  static Tensor zeros(Shape s) {
    auto n = numel(s);
    return Tensor(std::move(s), std::vector<S>(static_cast<std::size_t>(n), S(0)));
  }

  static Tensor full(Shape s, S fill) {
    auto n = numel(s);
    return Tensor(std::move(s), std::vector<S>(static_cast<std::size_t>(n), fill));
  }

  static Tensor scalar(S v) { return Tensor({1}, {v}); }

  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }

  S& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols() + c]; }
  S at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols() + c]; }

  bool is_scalar() const { return size() == 1; }
  S item() const {
    if (!is_scalar()) throw ShapeError("item() on non-scalar tensor " + shape_str(shape));
    return values[0];
  }

  void check_finite(const std::string& name = "") const {
    for (S v : values) {
      if (!std::isfinite(static_cast<double>(v)))
        throw ContractError("non-finite value in tensor" + (name.empty() ? "" : " '" + name + "'"));
    }
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = static_cast<T>(values[i]);
    return Tensor<T>(shape, std::move(out));
  }
};

// Learnable tensor: lives across optimizer steps, accumulates gradients until
// cleared. Graph leaves reference it by pointer.
template <typename S>
struct Param {
  std::string name;
  Shape shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily, same shape as value when present

  Param() = default;
  Param(std::string n, Tensor<S> init)
      : name(std::move(n)), shape(init.shape), value(std::move(init.values)) {}

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }

  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
  }

  Tensor<S> tensor() const { return Tensor<S>(shape, value); }
};

}  // namespace cpae
