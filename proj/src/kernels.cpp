#include "mixformer/kernels.hpp"

#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace mixformer::kernels {
namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelThreshold = 1 << 16;

void check_nn(const Matrix& a, const Matrix& b, const Matrix& out) {
  require_shape(a.cols() == b.rows(), "matmul: inner dims " + a.shape_str() + " * " + b.shape_str());
  require_shape(out.rows() == a.rows() && out.cols() == b.cols(),
                "matmul: output " + out.shape_str());
}

void check_bt(const Matrix& a, const Matrix& b, const Matrix& out) {
  require_shape(a.cols() == b.cols(), "matmul_bt: inner dims " + a.shape_str() + " * " + b.shape_str() + "^T");
  require_shape(out.rows() == a.rows() && out.cols() == b.rows(),
                "matmul_bt: output " + out.shape_str());
}

void check_at(const Matrix& a, const Matrix& b, const Matrix& out) {
  require_shape(a.rows() == b.rows(), "matmul_at: row counts " + a.shape_str() + " vs " + b.shape_str());
  require_shape(out.rows() == a.cols() && out.cols() == b.cols(),
                "matmul_at: output " + out.shape_str());
}

std::size_t row_count(std::size_t m, RowSet rows) {
  if (rows.first >= m) return 0;
  return (m - rows.first + rows.stride - 1) / rows.stride;
}

}  // namespace

namespace ref {

void matmul(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows) {
  check_nn(a, b, out);
  for (std::size_t r = rows.first; r < a.rows(); r += rows.stride) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(r, k) * b(k, j);
      out(r, j) = s;
    }
  }
}

void matmul_bt_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows) {
  check_bt(a, b, out);
  for (std::size_t r = rows.first; r < a.rows(); r += rows.stride) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(r, k) * b(j, k);
      out(r, j) += s;
    }
  }
}

void matmul_at_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows) {
  check_at(a, b, out);
  for (std::size_t i = 0; i < a.cols(); ++i) {
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t r = rows.first; r < a.rows(); r += rows.stride) s += a(r, i) * b(r, j);
      out(i, j) += s;
    }
  }
}

}  // namespace ref

namespace par {

void matmul(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows) {
  check_nn(a, b, out);
  const std::size_t m = row_count(a.rows(), rows);
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  const double* bp = b.data();
  [[maybe_unused]] const bool big = m * k_dim * n >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t r = rows.first + i * rows.stride;
    const double* ar = a.data() + r * k_dim;
    double* o = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) o[j] = 0.0;
    for (std::size_t k = 0; k < k_dim; ++k) {
      const double av = ar[k];
      const double* br = bp + k * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

void matmul_bt_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows) {
  check_bt(a, b, out);
  const std::size_t m = row_count(a.rows(), rows);
  const std::size_t n = a.cols();
  const std::size_t k_out = b.rows();
  if (m == 0) return;
  // With several rows, transposing b once turns the dot products into
  // unit-stride axpy updates.
  if (m >= 4) {
    const Matrix bt = b.transposed();
    const double* btp = bt.data();
    [[maybe_unused]] const bool big = m * n * k_out >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (big)
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t r = rows.first + i * rows.stride;
      const double* ar = a.data() + r * n;
      double* o = out.data() + r * k_out;
      for (std::size_t k = 0; k < n; ++k) {
        const double av = ar[k];
        const double* br = btp + k * k_out;
        for (std::size_t j = 0; j < k_out; ++j) o[j] += av * br[j];
      }
    }
    return;
  }
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t r = rows.first + i * rows.stride;
    const double* ar = a.data() + r * n;
    double* o = out.data() + r * k_out;
    for (std::size_t j = 0; j < k_out; ++j) {
      const double* br = b.data() + j * n;
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += ar[k] * br[k];
      o[j] += s;
    }
  }
}

void matmul_at_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows) {
  check_at(a, b, out);
  const std::size_t m = a.rows();
  const std::size_t k_dim = a.cols();
  const std::size_t n = b.cols();
  [[maybe_unused]] const bool big = row_count(m, rows) * k_dim * n >= kParallelThreshold;
  // Each thread owns a band of output rows, so no reduction is needed.
#pragma omp parallel for schedule(static) if (big)
  for (std::size_t i = 0; i < k_dim; ++i) {
    double* o = out.data() + i * n;
    for (std::size_t r = rows.first; r < m; r += rows.stride) {
      const double av = a(r, i);
      const double* br = b.data() + r * n;
      for (std::size_t j = 0; j < n; ++j) o[j] += av * br[j];
    }
  }
}

}  // namespace par

int max_threads() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace mixformer::kernels
