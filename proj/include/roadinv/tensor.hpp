#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace roadinv {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dense row-major tensor of 64-bit floats.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), values_(checked_size(shape_), 0.0) {}

  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.values_) x = v;
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<double> values) {
    Tensor t;
    t.shape_ = std::move(shape);
    if (checked_size(t.shape_) != static_cast<std::int64_t>(values.size()))
      throw ShapeError("tensor: value count does not match shape");
    t.values_ = std::move(values);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  const std::vector<int>& shape() const { return shape_; }
  int extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(values_.size()); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  double& operator[](std::int64_t i) { return values_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }

  // [C,H,W] indexing
  double& at(int c, int h, int w) {
    return values_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  double at(int c, int h, int w) const {
    return values_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  // [R,C] indexing
  double& at(int r, int c) {
    return values_[static_cast<std::size_t>(r) * shape_[1] + c];
  }
  double at(int r, int c) const {
    return values_[static_cast<std::size_t>(r) * shape_[1] + c];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double v : values_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(double v) {
    for (double& x : values_) x = v;
  }

  static std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) r += ",";
      r += std::to_string(s[i]);
    }
    return r + "]";
  }

 private:
  static std::int64_t checked_size(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw ShapeError("tensor: non-positive extent in " + shape_str(shape));
      n *= e;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<double> values_;
};

}  // namespace roadinv
