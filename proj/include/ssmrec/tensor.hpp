#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmrec {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float64 array. Shapes are small vectors; the leading
/// dimension is the batch dimension wherever a primitive works per row.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor vector(std::initializer_list<double> v) {
    return Tensor(Shape{v.size()}, std::vector<double>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }

  /// Product of every dimension after the first; 1 for rank ≤ 1.
  std::size_t row_size() const;
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const;

  /// Same values, different shape. Element count must match.
  Tensor reshaped(Shape shape) const;
  void fill(double v);

  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// FNV-1a over the raw bytes of every value, in order.
std::uint64_t checksum(std::span<const double> values, std::uint64_t seed = 1469598103934665603ULL);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace ssmrec
