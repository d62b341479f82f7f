#ifndef COUNTERSEG_TENSOR_HPP
#define COUNTERSEG_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "counterseg/common.hpp"

namespace counterseg {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) {
    CSEG_CHECK(e > 0, "tensor extent must be positive");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense tensor of doubles. Construction rejects NaN/Inf and shape/value-count
// mismatches; everything in a computation graph that needs to tolerate
// transient non-finite values works on raw buffers instead.
struct Tensor {
  Shape shape;
  std::vector<double> v;
  bool requires_grad = false;

  Tensor() = default;

  Tensor(Shape s, std::vector<double> values, bool req_grad = false)
      : shape(std::move(s)), v(std::move(values)), requires_grad(req_grad) {
    CSEG_CHECK(shape_numel(shape) == static_cast<std::int64_t>(v.size()),
               "tensor value count does not match shape " + shape_str(shape));
    for (double x : v) CSEG_CHECK(std::isfinite(x), "tensor rejects non-finite values");
  }

  static Tensor zeros(Shape s, bool req_grad = false) {
    std::int64_t n = shape_numel(s);
    Tensor t;
    t.shape = std::move(s);
    t.v.assign(static_cast<std::size_t>(n), 0.0);
    t.requires_grad = req_grad;
    return t;
  }

  static Tensor full(Shape s, double value, bool req_grad = false) {
    CSEG_CHECK(std::isfinite(value), "tensor rejects non-finite values");
    Tensor t = zeros(std::move(s), req_grad);
    std::fill(t.v.begin(), t.v.end(), value);
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace counterseg

#endif
