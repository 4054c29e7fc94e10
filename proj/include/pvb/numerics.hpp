#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pvb/error.hpp"

namespace pvb {

// Dense row-major matrix of doubles. Vectors are represented as n x 1 or
// 1 x n matrices, whichever reads more naturally at the call site.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> values);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  // Bitwise equality of shape and contents.
  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

Matrix transpose(const Matrix& a);
Matrix matmul(const Matrix& a, const Matrix& b);     // a * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);  // a^T * b
Matrix matmul_nt(const Matrix& a, const Matrix& b);  // a * b^T

double trace(const Matrix& a);
double frobenius_sq(const Matrix& a);
double frobenius_norm(const Matrix& a);
double inner(const Matrix& a, const Matrix& b);  // sum_ij a_ij b_ij
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& a);
Matrix lower_triangle(const Matrix& a);  // zeroes the strict upper triangle

void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what);

// Row-wise numerically stable softmax / log-sum-exp.
Matrix softmax_rows(const Matrix& logits);
double log_sum_exp(std::span<const double> v);

// Lower-triangular L with L L^T = a. Throws NotPositiveDefinite on a
// non-positive pivot, NotSquare / InvalidArgument on malformed input.
Matrix cholesky(const Matrix& a);
double logdet_spd(const Matrix& a);
// Inverse of an SPD matrix through its Cholesky factor.
Matrix spd_inverse(const Matrix& a);
Matrix cholesky_inverse(const Matrix& chol);

// Modified Gram-Schmidt; returns Q with orthonormal columns and the sign
// convention diag(R) >= 0.
Matrix qr_orthonormalize(const Matrix& a);

// Largest singular value by power iteration on a^T a.
double spectral_norm(const Matrix& a);

inline constexpr int kPowerIterMax = 200;
inline constexpr double kPowerIterRelTol = 1e-9;

// Seeded mt19937_64 engine with a Gaussian transform. Identical seeds give
// identical draw sequences within one build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  double normal();
  double uniform();  // [0, 1)
  std::uint64_t next_u64();
  std::mt19937_64& engine() noexcept { return engine_; }

  // Text serialization of engine and distribution state.
  std::string state() const;
  void restore(const std::string& state);

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

Matrix sample_std_normal(Rng& rng, std::size_t rows, std::size_t cols);

}  // namespace pvb
