#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace dmilab {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

/// Dense row-major float64 tensor. Rank 0 (scalar), 1 and 2 are what the
/// library works with; higher ranks are storable but no operation consumes them.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  /// Row-major nested literal, e.g. Tensor::matrix({{1, 2}, {3, 4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }

  /// Rank-2 helpers. A rank-1 tensor reads as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

  double item() const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Named parameter tensors. Ordered so that iteration (and hashing) is
/// deterministic.
using ParamStore = std::map<std::string, Tensor>;

/// Gradient of a scalar loss with respect to each reachable trainable parameter.
using GradientMap = std::map<std::string, Tensor>;

/// FNV-1a over names, shapes and raw bytes. Used for stage-discipline audits.
std::uint64_t param_hash(const ParamStore& params);
std::uint64_t tensor_hash(const Tensor& t);

}  // namespace dmilab
