#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ebsa {

/// Dense row-major matrix of doubles. Rows are samples, columns features.
///
/// Every kernel here processes each output row with a fixed operation order
/// that depends only on the column counts, so a row's result is bit-identical
/// whether it is computed alone or inside a larger batch.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix row_vector(std::span<const double> values);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }
  std::string shape_string() const;

  void fill(double v);
  bool all_finite() const;

  Matrix transposed() const;
  /// Rows [begin, end) as a new matrix.
  Matrix slice_rows(std::size_t begin, std::size_t end) const;
  Matrix select_rows(std::span<const std::size_t> indices) const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// a (n×k) · b (k×m).
Matrix matmul(const Matrix& a, const Matrix& b);
/// a (n×k) · bᵀ where b is (m×k).
Matrix matmul_bt(const Matrix& a, const Matrix& b);
/// aᵀ · b where a is (n×k), b is (n×m).
Matrix matmul_at(const Matrix& a, const Matrix& b);

/// Stack rows of several matrices with equal column counts.
Matrix vstack(std::span<const Matrix> parts);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

}  // namespace ebsa
