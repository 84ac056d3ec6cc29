// Dense row-major tensor of 64-bit reals.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace colab {

using Shape = std::vector<std::size_t>;

/// Raised when tensor extents do not compose.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a documented precondition of an operation is violated.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ", ";
    out << shape[i];
  }
  out << ']';
  return out.str();
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(numel(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size()) {
      throw ShapeError("tensor shape " + colab::to_string(shape_) + " does not match " +
                       std::to_string(data_.size()) + " elements");
    }
  }

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  const double& operator[](std::size_t i) const noexcept { return data_[i]; }

  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + colab::to_string(shape_));
    return data_[0];
  }

  /// Number of leading-axis entries (samples for a batch tensor).
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  /// Elements per leading-axis entry.
  std::size_t row_size() const { return rows() == 0 ? 0 : data_.size() / rows(); }

  std::span<const double> row(std::size_t i) const {
    const std::size_t n = row_size();
    return std::span<const double>(data_).subspan(i * n, n);
  }
  std::span<double> row(std::size_t i) {
    const std::size_t n = row_size();
    return std::span<double>(data_).subspan(i * n, n);
  }

  Tensor reshaped(Shape shape) const {
    if (numel(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + colab::to_string(shape_) + " to " + colab::to_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Closed interval of admissible input values.
struct ValueRange {
  double lo = 0.0;
  double hi = 1.0;
  friend bool operator==(const ValueRange&, const ValueRange&) = default;
};

/// sign with sign(0) = 0.
inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

/// Copies rows `indices` of a batch tensor into a new batch tensor.
inline Tensor gather_rows(const Tensor& t, std::span<const std::size_t> indices) {
  Shape shape = t.shape();
  shape.at(0) = indices.size();
  Tensor out(shape);
  const std::size_t n = t.row_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy_n(t.row(indices[i]).begin(), n, out.row(i).begin());
  }
  return out;
}

inline double linf_norm(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace colab
