#include "ebsa/matrix.hpp"

#include <cmath>
#include <sstream>

#include "ebsa/error.hpp"

namespace ebsa {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix: buffer of " + std::to_string(data_.size()) +
                     " values cannot form " + shape_string());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::row_vector(std::span<const double> values) {
  return Matrix(1, values.size(), std::vector<double>(values.begin(), values.end()));
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << "[" << rows_ << "x" << cols_ << "]";
  return os.str();
}

void Matrix::fill(double v) {
  for (double& x : data_) x = v;
}

bool Matrix::all_finite() const {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
  if (begin > end || end > rows_) throw ShapeError("slice_rows: range out of bounds");
  Matrix out(end - begin, cols_);
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
            data_.begin() + static_cast<std::ptrdiff_t>(end * cols_), out.data_.begin());
  return out;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw ShapeError("select_rows: index out of bounds");
    auto src = row(indices[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (!same_shape(other)) throw ShapeError("Matrix +=: " + shape_string() + " vs " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  if (!same_shape(other)) throw ShapeError("Matrix -=: " + shape_string() + " vs " + other.shape_string());
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

namespace {

// out[i, :] += a[i, p] * b[p, :], accumulated in p order for every row.
void gemm_rows(const double* __restrict a, const double* __restrict b, double* __restrict out, std::size_t n,
               std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* __restrict o = out + i * m;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* __restrict bk = b + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * bk[j];
    }
  }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.shape_string() + " x " + b.shape_string());
  }
  Matrix out(a.rows(), b.cols());
  gemm_rows(a.data().data(), b.data().data(), out.data().data(), a.rows(), a.cols(), b.cols());
  return out;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_bt: " + a.shape_string() + " x " + b.shape_string() + "^T");
  }
  const Matrix bt = b.transposed();
  Matrix out(a.rows(), b.rows());
  gemm_rows(a.data().data(), bt.data().data(), out.data().data(), a.rows(), a.cols(), b.rows());
  return out;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("matmul_at: " + a.shape_string() + "^T x " + b.shape_string());
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix out(k, m);
  const double* bp = b.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* ai = a.row(i).data();
    const double* __restrict bi = bp + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      double* __restrict o = op + p * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * bi[j];
    }
  }
  return out;
}

Matrix vstack(std::span<const Matrix> parts) {
  std::size_t rows = 0;
  std::size_t cols = parts.empty() ? 0 : parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols && p.rows() > 0) throw ShapeError("vstack: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t r = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i, ++r) {
      auto src = p.row(i);
      std::copy(src.begin(), src.end(), out.row(r).begin());
    }
  }
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace ebsa
