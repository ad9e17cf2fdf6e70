#include "dmilab/tensor_grad/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>

#include "dmilab/errors.hpp"

namespace dmilab {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

}  // namespace

Tensor::Tensor() : shape_{}, data_{0.0} {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_to_string(shape_) + " holds " +
                     std::to_string(product(shape_)) + " values, got " +
                     std::to_string(data_.size()));
  }
}

Tensor Tensor::zeros(Shape shape) { return filled(std::move(shape), 0.0); }

Tensor Tensor::filled(Shape shape, double value) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data) {
  return Tensor({rows, cols}, std::move(data));
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 2) return shape_[0];
  if (shape_.size() <= 1) return 1;
  throw ShapeError("rows() on tensor of shape " + shape_to_string(shape_));
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 2) return shape_[1];
  if (shape_.size() == 1) return shape_[0];
  if (shape_.empty()) return 1;
  throw ShapeError("cols() on tensor of shape " + shape_to_string(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
  }
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

void mix_tensor(std::uint64_t& h, const Tensor& t) {
  for (std::size_t d : t.shape()) {
    const std::uint64_t d64 = d;
    fnv_mix(h, &d64, sizeof d64);
  }
  fnv_mix(h, t.values().data(), t.numel() * sizeof(double));
}

}  // namespace

std::uint64_t tensor_hash(const Tensor& t) {
  std::uint64_t h = kFnvOffset;
  mix_tensor(h, t);
  return h;
}

std::uint64_t param_hash(const ParamStore& params) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : params) {
    fnv_mix(h, name.data(), name.size());
    mix_tensor(h, t);
  }
  return h;
}

}  // namespace dmilab
