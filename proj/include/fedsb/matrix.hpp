#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace fedsb {

// Dense row-major matrix of doubles: the single numeric carrier for weights,
// adapter factors, gradients and noise. Values are immutable-by-convention
// once handed to another module; all free functions below are pure.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);  // zero-filled
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Exact value equality (shape and every entry, bit-for-bit on doubles).
bool operator==(const Matrix& a, const Matrix& b);

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
Matrix scale(const Matrix& m, double factor);
void add_scaled_in_place(Matrix& dst, const Matrix& src, double factor);

// Concatenation along columns ([a b]) and rows ([a; b]).
Matrix hcat(std::span<const Matrix> blocks);
Matrix vcat(std::span<const Matrix> blocks);

// Leading-block slices.
Matrix take_cols(const Matrix& m, std::size_t count);
Matrix take_rows(const Matrix& m, std::size_t count);

double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
double max_abs_diff(const Matrix& a, const Matrix& b);
bool all_finite(const Matrix& m);

// i.i.d. N(0, stddev^2) entries, deterministic per seed.
Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev,
                       std::uint64_t seed);

// rows x cols (rows >= cols) with exactly orthonormal columns, deterministic.
Matrix orthonormal_columns(std::size_t rows, std::size_t cols, std::uint64_t seed);

struct SvdResult {
  Matrix u;                // m x k, orthonormal columns
  std::vector<double> s;   // k non-negative values, non-increasing
  Matrix v;                // n x k, orthonormal columns
};

// Top-`rank` singular triplets via one-sided Jacobi. Column signs are fixed so
// the largest-magnitude entry of each U column is non-negative.
SvdResult truncated_svd(const Matrix& m, std::size_t rank);
SvdResult full_svd(const Matrix& m);

Matrix svd_reconstruct(const SvdResult& svd);
std::vector<double> singular_values(const Matrix& m);

}  // namespace fedsb
