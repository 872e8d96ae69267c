#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "odg/common.hpp"

namespace odg {

/// Dense row-major float64 tensor. Plain value type; all training state and
/// every intermediate activation is one of these.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s, double fill = 0.0) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), fill);
  }
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static std::int64_t numel_of(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::ostringstream out;
    out << "(";
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? "," : "") << s[i];
    out << ")";
    return out.str();
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
  bool is_scalar() const { return numel() == 1; }
  double scalar() const {
    if (!is_scalar()) throw ShapeError("expected scalar, got shape " + shape_str(shape));
    return data[0];
  }

  double& at(int i) { return data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return data[static_cast<std::size_t>(i)]; }
  // 2-D accessors (row-major)
  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * shape[1] + c]; }
  // 3-D accessors, shape (C,H,W)
  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + y) * shape[2] + x];
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

}  // namespace odg
