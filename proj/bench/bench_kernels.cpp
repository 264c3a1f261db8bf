// Times the OpenMP kernel path against the serial reference and verifies the
// two produce bitwise-identical results. Optional argument: repetitions per
// measurement (default 5, best-of).
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

#include "masker/kernels.hpp"
#include "masker/rng.hpp"
#include "masker/tensor.hpp"

namespace {

using namespace masker;

void fill(Matrix& m, std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform() - 0.5;
}

bool same_bits(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) return false;
    }
    return true;
}

double best_ms(int reps, const std::function<void()>& fn) {
    double best = 0.0;
    for (int r = 0; r < reps; ++r) {
        const auto start = std::chrono::steady_clock::now();
        fn();
        const double ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                .count();
        if (r == 0 || ms < best) best = ms;
    }
    return best;
}

int failures = 0;

void report(const std::string& name, const std::string& shape, double serial_ms,
            double parallel_ms, bool equal) {
    std::printf("%-14s %-14s %10.3f %10.3f %8.2fx   %s\n", name.c_str(), shape.c_str(), serial_ms,
                parallel_ms, serial_ms / parallel_ms, equal ? "bitwise equal" : "MISMATCH");
    if (!equal) ++failures;
}

void bench_matmul(int n, int reps) {
    Matrix a(n, n), b(n, n), c_serial(n, n), c_parallel(n, n);
    fill(a, 1);
    fill(b, 2);
    kernels::matmul_serial(a, b, c_serial);
    kernels::matmul(a, b, c_parallel);
    const double s = best_ms(reps, [&] { kernels::matmul_serial(a, b, c_serial); });
    const double p = best_ms(reps, [&] { kernels::matmul(a, b, c_parallel); });
    report("matmul", std::to_string(n) + "^3", s, p, same_bits(c_serial, c_parallel));
}

void bench_matmul_nt(int n, int reps) {
    Matrix a(n, n), b(n, n), c_serial(n, n), c_parallel(n, n);
    fill(a, 3);
    fill(b, 4);
    kernels::matmul_nt_serial(a, b, c_serial);
    kernels::matmul_nt(a, b, c_parallel);
    const double s = best_ms(reps, [&] { kernels::matmul_nt_serial(a, b, c_serial); });
    const double p = best_ms(reps, [&] { kernels::matmul_nt(a, b, c_parallel); });
    report("matmul_nt", std::to_string(n) + "^3", s, p, same_bits(c_serial, c_parallel));
}

void bench_matmul_tn_acc(int n, int reps) {
    Matrix a(n, n), b(n, n), c_serial(n, n), c_parallel(n, n);
    fill(a, 5);
    fill(b, 6);
    fill(c_serial, 7);
    fill(c_parallel, 7);
    kernels::matmul_tn_acc_serial(a, b, c_serial);
    kernels::matmul_tn_acc(a, b, c_parallel);
    const bool equal = same_bits(c_serial, c_parallel);
    const double s = best_ms(reps, [&] { kernels::matmul_tn_acc_serial(a, b, c_serial); });
    const double p = best_ms(reps, [&] { kernels::matmul_tn_acc(a, b, c_parallel); });
    report("matmul_tn_acc", std::to_string(n) + "^3", s, p, equal);
}

void bench_softmax(int rows, int cols, int reps) {
    Matrix base(rows, cols);
    fill(base, 8);
    Matrix m_serial = base, m_parallel = base;
    kernels::softmax_rows_serial(m_serial);
    kernels::softmax_rows(m_parallel);
    const bool equal = same_bits(m_serial, m_parallel);
    const double s = best_ms(reps, [&] {
        m_serial = base;
        kernels::softmax_rows_serial(m_serial);
    });
    const double p = best_ms(reps, [&] {
        m_parallel = base;
        kernels::softmax_rows(m_parallel);
    });
    report("softmax_rows", std::to_string(rows) + "x" + std::to_string(cols), s, p, equal);
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 5;
    kernels::set_threads(0);  // library default for the parallel path
    if (kernels::threads() < 2) kernels::set_threads(2);  // force a real fork on 1-core hosts
#ifdef _OPENMP
    const char* omp = "enabled";
#else
    const char* omp = "compiled out (parallel path runs serial)";
#endif
    std::printf("openmp: %s, threads: %d, repetitions: %d (best-of)\n", omp, kernels::threads(),
                reps);
    std::printf("%-14s %-14s %10s %10s %9s\n", "kernel", "shape", "serial ms", "parallel ms",
                "speedup");
    for (int n : {64, 128, 256}) {
        bench_matmul(n, reps);
        bench_matmul_nt(n, reps);
        bench_matmul_tn_acc(n, reps);
    }
    bench_softmax(256, 256, reps);
    bench_softmax(2048, 512, reps);
    if (failures != 0) {
        std::printf("%d kernel(s) diverged between paths\n", failures);
        return 1;
    }
    return 0;
}
