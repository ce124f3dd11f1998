#ifndef SPEN_TENSOR_HPP
#define SPEN_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace spen {

// Dense row-major tensor of 64-bit reals. Rank 0 (shape {}) is a scalar
// holding one value. Shapes with a zero extent are rejected.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::size_t> shape);
  static Tensor full(std::vector<std::size_t> shape, double v);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& raw() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Scalar access; throws ContractError when numel() != 1.
  double item() const;

  // 2-D / 3-D indexed access used by image and tagging code.
  double& at2(std::size_t i, std::size_t j);
  double at2(std::size_t i, std::size_t j) const;
  double& at3(std::size_t i, std::size_t j, std::size_t k);
  double at3(std::size_t i, std::size_t j, std::size_t k) const;
  std::size_t extent(std::size_t axis) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  void fill(double v);
  bool all_finite() const;
  // Throws NumericError naming `context` when a non-finite value is present.
  void validate_finite(const std::string& context) const;

  // In-place arithmetic; shapes must match exactly.
  Tensor& operator+=(const Tensor& other);
  Tensor& operator-=(const Tensor& other);
  Tensor& operator*=(double c);
  // this += c * other
  void axpy(double c, const Tensor& other);

  double max_abs() const;       // L-infinity norm
  double dot(const Tensor& other) const;
  double sum() const;

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && data_ == other.data_;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// Elementwise helpers returning new tensors.
Tensor operator+(Tensor a, const Tensor& b);
Tensor operator-(Tensor a, const Tensor& b);
Tensor operator*(Tensor a, double c);

double max_abs_diff(const Tensor& a, const Tensor& b);

// Relative error between a computed tensor and a reference, as used by the
// gradient-check suites: \max_i |a_i - b_i| / (\max_i max(|a_i|,|b_i|) + floor).
double rel_error(const Tensor& computed, const Tensor& reference, double floor = 1e-10);

}  // namespace spen

#endif
