#include "spen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "spen/errors.hpp"

namespace spen {

namespace {
std::size_t checked_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    if (e == 0) throw DimensionError("zero extent in tensor shape");
    n *= e;
  }
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (checked_numel(shape_) != data_.size()) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str());
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.data_.assign(1, v);
  return t;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  t.fill(v);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw ContractError("item() on non-scalar tensor of shape " + shape_str());
  }
  return data_[0];
}

double& Tensor::at2(std::size_t i, std::size_t j) { return data_[i * shape_[rank() - 1] + j]; }
double Tensor::at2(std::size_t i, std::size_t j) const { return data_[i * shape_[rank() - 1] + j]; }

double& Tensor::at3(std::size_t i, std::size_t j, std::size_t k) {
  const std::size_t d1 = shape_[rank() - 2], d2 = shape_[rank() - 1];
  return data_[(i * d1 + j) * d2 + k];
}
double Tensor::at3(std::size_t i, std::size_t j, std::size_t k) const {
  const std::size_t d1 = shape_[rank() - 2], d2 = shape_[rank() - 1];
  return data_[(i * d1 + j) * d2 + k];
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("axis out of range for shape " + shape_str());
  return shape_[axis];
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
  os << "]";
  return os.str();
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::validate_finite(const std::string& context) const {
  if (!all_finite()) throw NumericError("non-finite value in " + context);
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) {
    throw DimensionError("operator+= shapes " + shape_str() + " vs " + other.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator-=(const Tensor& other) {
  if (!same_shape(other)) {
    throw DimensionError("operator-= shapes " + shape_str() + " vs " + other.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double c) {
  for (double& v : data_) v *= c;
  return *this;
}

void Tensor::axpy(double c, const Tensor& other) {
  if (!same_shape(other)) {
    throw DimensionError("axpy shapes " + shape_str() + " vs " + other.shape_str());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += c * other.data_[i];
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::fabs(v));
  return m;
}

double Tensor::dot(const Tensor& other) const {
  if (!same_shape(other)) {
    throw DimensionError("dot shapes " + shape_str() + " vs " + other.shape_str());
  }
  double s = 0.0;
  for (std::size_t i = 0; i < data_.size(); ++i) s += data_[i] * other.data_[i];
  return s;
}

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

Tensor operator+(Tensor a, const Tensor& b) {
  a += b;
  return a;
}
Tensor operator-(Tensor a, const Tensor& b) {
  a -= b;
  return a;
}
Tensor operator*(Tensor a, double c) {
  a *= c;
  return a;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw DimensionError("max_abs_diff shapes " + a.shape_str() + " vs " + b.shape_str());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

double rel_error(const Tensor& computed, const Tensor& reference, double floor) {
  double scale = std::max(computed.max_abs(), reference.max_abs()) + floor;
  return max_abs_diff(computed, reference) / scale;
}

}  // namespace spen
