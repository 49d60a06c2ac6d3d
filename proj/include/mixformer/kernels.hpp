#pragma once

#include <cstddef>

#include "mixformer/matrix.hpp"

// Dense matrix-product kernels used by every layer.
//
// Each kernel comes in two flavours with identical contracts:
//   ref::  plain serial triple loops; the reference the tests compare against.
//   par::  OpenMP row-parallel, cache-friendly loop order; used by the model.
//
// All kernels operate on a strided subset of rows of the row-indexed
// operands: rows r = first, first + stride, ... < rows. With first = 0 and
// stride = 1 they are ordinary full products. The strided form lets one
// weight matrix serve every row that belongs to a given head.

namespace mixformer::kernels {

struct RowSet {
  std::size_t first = 0;
  std::size_t stride = 1;
};

namespace ref {

/// out[r] = a[r] * b           (a: m x k, b: k x n, out: m x n); rows outside the set untouched.
void matmul(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows = {});
/// out[r] += a[r] * b^T        (a: m x n, b: k x n, out: m x k).
void matmul_bt_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows = {});
/// out += sum_r a[r]^T * b[r]  (a: m x k, b: m x n, out: k x n).
void matmul_at_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows = {});

}  // namespace ref

namespace par {

void matmul(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows = {});
void matmul_bt_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows = {});
void matmul_at_accum(const Matrix& a, const Matrix& b, Matrix& out, RowSet rows = {});

}  // namespace par

/// Number of OpenMP threads the par:: kernels will use (1 when built without OpenMP).
int max_threads();

}  // namespace mixformer::kernels
