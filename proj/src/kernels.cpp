#include "masker/kernels.hpp"

#include <atomic>
#include <cassert>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace masker::kernels {

namespace {

std::atomic<int> g_threads{0};

// Work on fewer rows than this is not worth a fork/join.
constexpr std::size_t kRowGrain = 16;

int effective_threads() {
    const int t = g_threads.load(std::memory_order_relaxed);
#ifdef _OPENMP
    return t == 0 ? omp_get_max_threads() : t;
#else
    return t == 0 ? 1 : t;
#endif
}

// One output row of C = A * B, k ascending so the accumulation order is
// the same on every path.
inline void matmul_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t k = a.cols(), n = b.cols();
    double* crow = c.row(i);
    for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = a.row(i);
    for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = b.row(kk);
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

inline void matmul_nt_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t k = a.cols(), n = b.rows();
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t j = 0; j < n; ++j) {
        const double* brow = b.row(j);
        double acc = 0.0;
        for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
        crow[j] = acc;
    }
}

// Row i of C += A^T * B: C(i, :) += sum_r A(r, i) * B(r, :), r ascending.
inline void matmul_tn_acc_row(const Matrix& a, const Matrix& b, Matrix& c, std::size_t i) {
    const std::size_t r = a.rows(), n = b.cols();
    double* crow = c.row(i);
    for (std::size_t rr = 0; rr < r; ++rr) {
        const double av = a.at(rr, i);
        const double* brow = b.row(rr);
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

inline void softmax_row(Matrix& m, std::size_t i) {
    const std::size_t n = m.cols();
    double* row = m.row(i);
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

template <typename RowFn>
void for_rows(std::size_t rows, bool parallel, RowFn&& fn) {
    if (parallel && rows >= kRowGrain && effective_threads() > 1) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(effective_threads())
#endif
        for (long long i = 0; i < static_cast<long long>(rows); ++i) {
            fn(static_cast<std::size_t>(i));
        }
    } else {
        for (std::size_t i = 0; i < rows; ++i) fn(i);
    }
}

}  // namespace

void set_threads(int n) { g_threads.store(n < 0 ? 0 : n, std::memory_order_relaxed); }

int threads() { return effective_threads(); }

bool parallel_enabled() { return effective_threads() > 1; }

void matmul(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.cols() == b.rows());
    if (c.rows() != a.rows() || c.cols() != b.cols()) c = Matrix(a.rows(), b.cols());
    for_rows(a.rows(), true, [&](std::size_t i) { matmul_row(a, b, c, i); });
}

void matmul_serial(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.cols() == b.rows());
    if (c.rows() != a.rows() || c.cols() != b.cols()) c = Matrix(a.rows(), b.cols());
    for_rows(a.rows(), false, [&](std::size_t i) { matmul_row(a, b, c, i); });
}

void matmul_nt(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.cols() == b.cols());
    if (c.rows() != a.rows() || c.cols() != b.rows()) c = Matrix(a.rows(), b.rows());
    for_rows(a.rows(), true, [&](std::size_t i) { matmul_nt_row(a, b, c, i); });
}

void matmul_nt_serial(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.cols() == b.cols());
    if (c.rows() != a.rows() || c.cols() != b.rows()) c = Matrix(a.rows(), b.rows());
    for_rows(a.rows(), false, [&](std::size_t i) { matmul_nt_row(a, b, c, i); });
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.rows() == b.rows());
    assert(c.rows() == a.cols() && c.cols() == b.cols());
    for_rows(c.rows(), true, [&](std::size_t i) { matmul_tn_acc_row(a, b, c, i); });
}

void matmul_tn_acc_serial(const Matrix& a, const Matrix& b, Matrix& c) {
    assert(a.rows() == b.rows());
    assert(c.rows() == a.cols() && c.cols() == b.cols());
    for_rows(c.rows(), false, [&](std::size_t i) { matmul_tn_acc_row(a, b, c, i); });
}

void softmax_rows(Matrix& m) {
    for_rows(m.rows(), true, [&](std::size_t i) { softmax_row(m, i); });
}

void softmax_rows_serial(Matrix& m) {
    for_rows(m.rows(), false, [&](std::size_t i) { softmax_row(m, i); });
}

}  // namespace masker::kernels
