#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace fqt {

/// Dense row-major matrix of doubles. Carries activations, parameters and
/// gradients through every stage of the pipeline.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Takes ownership of `values`; throws if the length does not match or any
  /// value is not finite.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  bool all_finite() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double factor);

  friend bool operator==(const Matrix& a, const Matrix& b) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double factor);

std::string shape_string(const Matrix& m);

/// Standard product a·b. Throws std::invalid_argument on dimension mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ·b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a·bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix hadamard(const Matrix& a, const Matrix& b);

/// R(X) = max X - min X over every entry.
double dynamic_range(const Matrix& m);
/// R of each row.
std::vector<double> dynamic_range_rows(const Matrix& m);
double dynamic_range(std::span<const double> v);
double sup_norm(std::span<const double> v);

double frobenius_norm_sq(const Matrix& m);

/// Squared spectral norm (largest singular value squared).
///
/// Works on the Gram matrix of the shorter side. When that side has at most
/// eight entries the Gram matrix is diagonalized exhaustively with cyclic
/// Jacobi rotations; otherwise power iteration from a fixed-seed start vector
/// runs until the Rayleigh quotient changes by less than 1e-12 (relative) or
/// 1000 iterations have passed.
double operator_norm_sq(const Matrix& m);

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, unsorted.
std::vector<double> symmetric_eigenvalues(Matrix a);

}  // namespace fqt
