#pragma once

#include "masker/tensor.hpp"

namespace masker::kernels {

// Runtime switch between the serial reference path and the OpenMP path.
// Both paths compute every output element with the identical per-element
// instruction sequence (parallelism is over independent rows only), so
// results are bitwise equal regardless of thread count.
void set_threads(int n);  // 0 = library default, 1 = serial
int threads();
bool parallel_enabled();

// C = A * B            (m x k) * (k x n)
void matmul(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_serial(const Matrix& a, const Matrix& b, Matrix& c);

// C = A * B^T          (m x k) * (n x k) -> m x n
void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_nt_serial(const Matrix& a, const Matrix& b, Matrix& c);

// C += A^T * B         (r x m) * (r x n) -> m x n, accumulating
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);
void matmul_tn_acc_serial(const Matrix& a, const Matrix& b, Matrix& c);

// Row-wise softmax in place, max-shifted.
void softmax_rows(Matrix& m);
void softmax_rows_serial(Matrix& m);

}  // namespace masker::kernels
