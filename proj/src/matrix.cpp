#include "fedsb/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace fedsb {

namespace {

[[noreturn]] void fail(const std::string& what) { throw std::invalid_argument(what); }

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries)
    : rows_(rows), cols_(cols), data_(std::move(entries)) {
  if (data_.size() != rows_ * cols_) {
    fail("matrix: entry count " + std::to_string(data_.size()) + " does not match " +
         shape_str(*this));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  Matrix m(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) fail("matrix: ragged initializer rows");
    std::size_t j = 0;
    for (double v : row) m(i, j++) = v;
    ++i;
  }
  return m;
}

bool operator==(const Matrix& a, const Matrix& b) {
  return a.same_shape(b) &&
         std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    fail("matmul: inner dimensions differ, " + shape_str(a) + " * " + shape_str(b));
  }
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < b.cols(); ++j) {
        out(i, j) += aik * b(k, j);
      }
    }
  }
  return out;
}

Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) fail("add: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) fail("sub: shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix scale(const Matrix& m, double factor) {
  Matrix out = m;
  for (double& v : out.data()) v *= factor;
  return out;
}

void add_scaled_in_place(Matrix& dst, const Matrix& src, double factor) {
  if (!dst.same_shape(src)) {
    fail("add_scaled_in_place: shape mismatch " + shape_str(dst) + " vs " + shape_str(src));
  }
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data()[i] += factor * src.data()[i];
}

Matrix hcat(std::span<const Matrix> blocks) {
  if (blocks.empty()) fail("hcat: no blocks");
  const std::size_t rows = blocks.front().rows();
  std::size_t cols = 0;
  for (const Matrix& b : blocks) {
    if (b.rows() != rows) fail("hcat: row count mismatch");
    cols += b.cols();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const Matrix& b : blocks) {
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) out(i, offset + j) = b(i, j);
    offset += b.cols();
  }
  return out;
}

Matrix vcat(std::span<const Matrix> blocks) {
  if (blocks.empty()) fail("vcat: no blocks");
  const std::size_t cols = blocks.front().cols();
  std::size_t rows = 0;
  for (const Matrix& b : blocks) {
    if (b.cols() != cols) fail("vcat: column count mismatch");
    rows += b.rows();
  }
  Matrix out(rows, cols);
  std::size_t offset = 0;
  for (const Matrix& b : blocks) {
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < cols; ++j) out(offset + i, j) = b(i, j);
    offset += b.rows();
  }
  return out;
}

Matrix take_cols(const Matrix& m, std::size_t count) {
  if (count > m.cols()) fail("take_cols: count exceeds columns");
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, j);
  return out;
}

Matrix take_rows(const Matrix& m, std::size_t count) {
  if (count > m.rows()) fail("take_rows: count exceeds rows");
  Matrix out(count, m.cols());
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

double frobenius_norm(const Matrix& m) {
  double sum = 0.0;
  for (double v : m.data()) sum += v * v;
  return std::sqrt(sum);
}

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.data()) best = std::max(best, std::fabs(v));
  return best;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) fail("max_abs_diff: shape mismatch");
  double best = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    best = std::max(best, std::fabs(a.data()[i] - b.data()[i]));
  return best;
}

bool all_finite(const Matrix& m) {
  for (double v : m.data())
    if (!std::isfinite(v)) return false;
  return true;
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, double stddev,
                       std::uint64_t seed) {
  if (stddev < 0.0) fail("gaussian_matrix: negative stddev");
  Matrix out(rows, cols);
  if (stddev == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : out.data()) v = dist(rng);
  return out;
}

namespace {

double column_dot(const Matrix& m, std::size_t p, std::size_t q) {
  double sum = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) sum += m(i, p) * m(i, q);
  return sum;
}

// Hestenes one-sided Jacobi on the columns of `work` (rows >= cols). `v`
// accumulates the right rotations. Converged when every column pair is
// orthogonal relative to the column norms.
void jacobi_sweeps(Matrix& work, Matrix& v) {
  const std::size_t n = work.cols();
  constexpr double kTol = 1e-14;
  constexpr int kMaxSweeps = 64;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double app = column_dot(work, p, p);
        const double aqq = column_dot(work, q, q);
        const double apq = column_dot(work, p, q);
        if (app * aqq == 0.0 || std::fabs(apq) <= kTol * std::sqrt(app * aqq)) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) /
                         (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < work.rows(); ++i) {
          const double wp = work(i, p);
          const double wq = work(i, q);
          work(i, p) = c * wp - s * wq;
          work(i, q) = s * wp + c * wq;
        }
        for (std::size_t i = 0; i < v.rows(); ++i) {
          const double vp = v(i, p);
          const double vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
}

// Fills column j of u with a unit vector orthogonal to columns [0, j). Used
// for zero singular values, where the Jacobi columns carry no direction.
void complete_basis_column(Matrix& u, std::size_t j) {
  const std::size_t m = u.rows();
  for (std::size_t k = 0; k < m; ++k) {
    std::vector<double> cand(m, 0.0);
    cand[k] = 1.0;
    for (std::size_t prev = 0; prev < j; ++prev) {
      double proj = 0.0;
      for (std::size_t i = 0; i < m; ++i) proj += cand[i] * u(i, prev);
      for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * u(i, prev);
    }
    double norm = 0.0;
    for (double x : cand) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0.5) {
      for (std::size_t i = 0; i < m; ++i) u(i, j) = cand[i] / norm;
      return;
    }
  }
  fail("svd: failed to complete orthonormal basis");
}

void fix_column_signs(Matrix& u, Matrix& v) {
  for (std::size_t j = 0; j < u.cols(); ++j) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < u.rows(); ++i) {
      const double a = std::fabs(u(i, j));
      if (a > best) {
        best = a;
        arg = i;
      }
    }
    if (u(arg, j) < 0.0) {
      for (std::size_t i = 0; i < u.rows(); ++i) u(i, j) = -u(i, j);
      for (std::size_t i = 0; i < v.rows(); ++i) v(i, j) = -v(i, j);
    }
  }
}

}  // namespace

SvdResult full_svd(const Matrix& m) {
  if (m.rows() == 0 || m.cols() == 0) fail("svd: empty matrix");
  if (!all_finite(m)) fail("svd: non-finite input");
  const bool transposed = m.rows() < m.cols();
  Matrix work = transposed ? transpose(m) : m;
  Matrix v = Matrix::identity(work.cols());
  jacobi_sweeps(work, v);

  const std::size_t n = work.cols();
  std::vector<double> sigma(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(column_dot(work, j, j));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  Matrix u_sorted(work.rows(), n);
  Matrix v_sorted(v.rows(), n);
  std::vector<double> s_sorted(n);
  const double tiny = std::max(1e-300, 1e-15 * (sigma.empty() ? 0.0 : sigma[order[0]]));
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    s_sorted[j] = sigma[src];
    for (std::size_t i = 0; i < v.rows(); ++i) v_sorted(i, j) = v(i, src);
    if (sigma[src] > tiny) {
      for (std::size_t i = 0; i < work.rows(); ++i)
        u_sorted(i, j) = work(i, src) / sigma[src];
    } else {
      s_sorted[j] = sigma[src];
      complete_basis_column(u_sorted, j);
    }
  }

  SvdResult out;
  if (transposed) {
    out.u = std::move(v_sorted);
    out.v = std::move(u_sorted);
  } else {
    out.u = std::move(u_sorted);
    out.v = std::move(v_sorted);
  }
  out.s = std::move(s_sorted);
  fix_column_signs(out.u, out.v);
  return out;
}

SvdResult truncated_svd(const Matrix& m, std::size_t rank) {
  const std::size_t max_rank = std::min(m.rows(), m.cols());
  if (rank < 1 || rank > max_rank) {
    fail("truncated_svd: rank " + std::to_string(rank) + " out of range [1, " +
         std::to_string(max_rank) + "]");
  }
  SvdResult full = full_svd(m);
  SvdResult out;
  out.u = take_cols(full.u, rank);
  out.v = take_cols(full.v, rank);
  out.s.assign(full.s.begin(), full.s.begin() + static_cast<std::ptrdiff_t>(rank));
  return out;
}

Matrix svd_reconstruct(const SvdResult& svd) {
  Matrix us = svd.u;
  for (std::size_t j = 0; j < us.cols(); ++j)
    for (std::size_t i = 0; i < us.rows(); ++i) us(i, j) *= svd.s[j];
  return matmul(us, transpose(svd.v));
}

std::vector<double> singular_values(const Matrix& m) { return full_svd(m).s; }

Matrix orthonormal_columns(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (cols > rows) fail("orthonormal_columns: cols exceed rows");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Matrix q(rows, cols);
  for (std::size_t j = 0; j < cols; ++j) {
    double norm = 0.0;
    // Redraw on (vanishingly unlikely) rank deficiency instead of failing.
    do {
      for (std::size_t i = 0; i < rows; ++i) q(i, j) = dist(rng);
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t prev = 0; prev < j; ++prev) {
          double proj = 0.0;
          for (std::size_t i = 0; i < rows; ++i) proj += q(i, j) * q(i, prev);
          for (std::size_t i = 0; i < rows; ++i) q(i, j) -= proj * q(i, prev);
        }
      }
      norm = 0.0;
      for (std::size_t i = 0; i < rows; ++i) norm += q(i, j) * q(i, j);
      norm = std::sqrt(norm);
    } while (norm < 1e-8);
    for (std::size_t i = 0; i < rows; ++i) q(i, j) /= norm;
  }
  return q;
}

}  // namespace fedsb
