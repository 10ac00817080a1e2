#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ptrojan {

/// Raised when operand shapes do not conform for an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a computation produces NaN or Inf.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

/// Dense row-major double tensor. Rank-1 tensors behave as 1 x n rows in
/// matrix operations.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(element_count(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::size_t rows() const noexcept {
    return shape_.size() >= 2 ? shape_[0] : (shape_.empty() ? 0 : 1);
  }
  std::size_t cols() const noexcept {
    if (shape_.empty()) return 0;
    if (shape_.size() == 1) return shape_[0];
    return data_.size() / shape_[0];
  }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item: tensor of shape " + shape_string(shape_) + " is not scalar");
    }
    return data_[0];
  }

  bool all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  bool same_shape(const Tensor& o) const noexcept { return rows() == o.rows() && cols() == o.cols(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t element_count(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }
  void validate_shape() const {
    if (shape_.empty()) throw ShapeError("tensor: empty shape");
    for (auto d : shape_) {
      if (d == 0) throw ShapeError("tensor: zero dimension in " + shape_string(shape_));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline std::string dims(const Tensor& t) {
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

namespace kernels {

namespace detail {

// R rows of C, one strip of W columns. Partial strips (w < W) run the same
// sequence of operations on fewer lanes.
template <std::size_t R, std::size_t W>
inline void gemm_block(const double* a, std::size_t lda, const double* b, double* c, std::size_t k,
                       std::size_t n, std::size_t w) {
  double acc[R][W];
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < W; ++j) acc[r][j] = j < w ? c[r * n + j] : 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    double av[R];
    bool any = false;
    for (std::size_t r = 0; r < R; ++r) {
      av[r] = a[r * lda + p];
      any = any || av[r] != 0.0;
    }
    if (!any) continue;
    const double* brow = b + p * n;
    if (w == W) {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < W; ++j) acc[r][j] += av[r] * brow[j];
    } else {
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < w; ++j) acc[r][j] += av[r] * brow[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < w; ++j) c[r * n + j] = acc[r][j];
}

}  // namespace detail

// C(m x n) += A(m x k) * B(k x n). Each output element adds its k products
// in ascending order onto the existing value.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
  constexpr std::size_t W = 32;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    for (std::size_t j0 = 0; j0 < n; j0 += W)
      detail::gemm_block<4, W>(a + i * k, k, b + j0, c + i * n + j0, k, n, std::min(W, n - j0));
  }
  for (; i < m; ++i) {
    for (std::size_t j0 = 0; j0 < n; j0 += W)
      detail::gemm_block<1, W>(a + i * k, k, b + j0, c + i * n + j0, k, n, std::min(W, n - j0));
  }
}

inline Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  Tensor out = Tensor::matrix(c, r);
  const double* src = a.data();
  double* dst = out.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) dst[j * r + i] = src[i * c + j];
  return out;
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  gemm_acc(a.data(), b.data(), out.data(), a.rows(), a.cols(), b.cols());
  return out;
}

// A * B^T
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) { return matmul(a, transpose(b)); }

// A^T * B
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) { return matmul(transpose(a), b); }

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace kernels

}  // namespace ptrojan
