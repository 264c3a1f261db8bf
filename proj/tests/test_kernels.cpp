#include <cmath>
#include <cstdint>
#include <set>
#include <vector>

#include <doctest.h>

#include "masker/kernels.hpp"
#include "masker/rng.hpp"
#include "masker/tensor.hpp"

namespace {

using masker::Matrix;
using masker::Rng;

Matrix random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = rng.uniform_in(-2.0, 2.0);
    return m;
}

// Independent triple loop with the same per-element accumulation order
// (k ascending) as the kernel, so results must be bitwise equal.
Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
            c.at(i, j) = acc;
        }
    }
    return c;
}

struct ThreadGuard {
    ~ThreadGuard() { masker::kernels::set_threads(0); }
};

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("matmul matches a naive triple loop bitwise") {
    Rng rng(42);
    for (int round = 0; round < 10; ++round) {
        const std::size_t m = 1 + rng.below(40);
        const std::size_t k = 1 + rng.below(40);
        const std::size_t n = 1 + rng.below(40);
        const Matrix a = random_matrix(m, k, rng);
        const Matrix b = random_matrix(k, n, rng);
        Matrix c;
        masker::kernels::matmul(a, b, c);
        CHECK(c == naive_matmul(a, b));
    }
}

TEST_CASE("matmul_nt equals matmul against the explicit transpose") {
    Rng rng(43);
    const Matrix a = random_matrix(17, 9, rng);
    const Matrix b = random_matrix(23, 9, rng);  // used as b^T
    Matrix bt(9, 23);
    for (std::size_t i = 0; i < b.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) bt.at(j, i) = b.at(i, j);
    }
    Matrix via_nt, via_plain;
    masker::kernels::matmul_nt(a, b, via_nt);
    masker::kernels::matmul(a, bt, via_plain);
    REQUIRE(via_nt.rows() == via_plain.rows());
    REQUIRE(via_nt.cols() == via_plain.cols());
    for (std::size_t i = 0; i < via_nt.size(); ++i) {
        CHECK(via_nt[i] == doctest::Approx(via_plain[i]).epsilon(1e-12));
    }
}

TEST_CASE("matmul_tn_acc accumulates A^T * B on top of the output") {
    Rng rng(44);
    const Matrix a = random_matrix(11, 6, rng);
    const Matrix b = random_matrix(11, 8, rng);
    Matrix c = random_matrix(6, 8, rng);
    const Matrix c0 = c;
    masker::kernels::matmul_tn_acc(a, b, c);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            double acc = c0.at(i, j);
            for (std::size_t r = 0; r < 11; ++r) acc += a.at(r, i) * b.at(r, j);
            CHECK(c.at(i, j) == acc);
        }
    }
}

TEST_CASE("parallel and serial kernels agree bitwise") {
    ThreadGuard guard;
    Rng rng(45);
    const Matrix a = random_matrix(64, 33, rng);
    const Matrix b = random_matrix(33, 29, rng);
    const Matrix bt = random_matrix(29, 33, rng);
    Matrix logits = random_matrix(64, 12, rng);

    masker::kernels::set_threads(4);
    Matrix c_par, nt_par;
    masker::kernels::matmul(a, b, c_par);
    masker::kernels::matmul_nt(a, bt, nt_par);
    Matrix acc_par(33, 29);
    acc_par.zero();
    masker::kernels::matmul_tn_acc(a, b, acc_par);
    Matrix soft_par = logits;
    masker::kernels::softmax_rows(soft_par);

    masker::kernels::set_threads(1);
    Matrix c_ser, nt_ser;
    masker::kernels::matmul_serial(a, b, c_ser);
    masker::kernels::matmul_nt_serial(a, bt, nt_ser);
    Matrix acc_ser(33, 29);
    acc_ser.zero();
    masker::kernels::matmul_tn_acc_serial(a, b, acc_ser);
    Matrix soft_ser = logits;
    masker::kernels::softmax_rows_serial(soft_ser);

    CHECK(c_par == c_ser);
    CHECK(nt_par == nt_ser);
    CHECK(acc_par == acc_ser);
    CHECK(soft_par == soft_ser);
}

TEST_CASE("softmax rows are normalized and stable under large offsets") {
    Matrix m(2, 4);
    m.at(0, 0) = 1.0; m.at(0, 1) = 2.0; m.at(0, 2) = 3.0; m.at(0, 3) = 4.0;
    m.at(1, 0) = 1001.0; m.at(1, 1) = 1002.0; m.at(1, 2) = 1003.0; m.at(1, 3) = 1004.0;
    masker::kernels::softmax_rows(m);
    for (std::size_t i = 0; i < 2; ++i) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            CHECK(std::isfinite(m.at(i, j)));
            CHECK(m.at(i, j) > 0.0);
            sum += m.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
    // the shifted row is the same distribution
    for (std::size_t j = 0; j < 4; ++j) {
        CHECK(m.at(0, j) == doctest::Approx(m.at(1, j)).epsilon(1e-12));
    }
}

TEST_CASE("thread count control") {
    ThreadGuard guard;
    masker::kernels::set_threads(3);
    CHECK(masker::kernels::threads() == 3);
    CHECK(masker::kernels::parallel_enabled());
    masker::kernels::set_threads(1);
    CHECK(masker::kernels::threads() == 1);
    CHECK_FALSE(masker::kernels::parallel_enabled());
    masker::kernels::set_threads(0);
    CHECK(masker::kernels::threads() >= 1);
}

TEST_CASE("rng streams are deterministic and well ranged") {
    Rng a(7), b(7), c(8);
    bool diverged = false;
    for (int i = 0; i < 100; ++i) {
        const std::uint64_t va = a.next_u64();
        CHECK(va == b.next_u64());
        if (va != c.next_u64()) diverged = true;
    }
    CHECK(diverged);

    Rng r(99);
    for (int i = 0; i < 1000; ++i) {
        const double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        CHECK(r.below(17) < 17);
        const int v = r.range(-3, 5);
        CHECK(v >= -3);
        CHECK(v <= 5);
    }
    for (int i = 0; i < 100; ++i) {
        CHECK_FALSE(r.bernoulli(0.0));
        CHECK(r.bernoulli(1.0));
    }
}

TEST_CASE("rng distinct and shuffle produce valid combinatorial objects") {
    Rng r(123);
    const std::vector<std::size_t> picks = r.distinct(25, 10);
    CHECK(picks.size() == 10);
    std::set<std::size_t> unique(picks.begin(), picks.end());
    CHECK(unique.size() == 10);
    for (std::size_t p : picks) CHECK(p < 25);

    std::vector<int> perm(30);
    for (int i = 0; i < 30; ++i) perm[i] = i;
    r.shuffle(perm);
    std::set<int> elements(perm.begin(), perm.end());
    CHECK(elements.size() == 30);
    CHECK(*elements.begin() == 0);
    CHECK(*elements.rbegin() == 29);
}

TEST_CASE("mix_seed separates streams") {
    const std::uint64_t a = masker::mix_seed({1, 2});
    const std::uint64_t b = masker::mix_seed({2, 1});
    const std::uint64_t c = masker::mix_seed({1, 2, 0});
    CHECK(a != b);
    CHECK(a != c);
    CHECK(masker::mix_seed({1, 2}) == a);
}

}  // TEST_SUITE
