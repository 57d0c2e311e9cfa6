#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include "fedlora/matrix.hpp"
#include "fedlora/svd.hpp"

using namespace fedlora;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    return random_init(rows, cols, 1.0, seed);
}

// Independent brute-force product: plain i-j-k triple loop.
Matrix matmul_oracle(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

Eigen::MatrixXd to_eigen(const Matrix& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
    return e;
}

// Full-SVD-then-truncate oracle (Eigen's two-sided Jacobi).
double best_rank_k_error(const Matrix& m, std::size_t k) {
    Eigen::MatrixXd e = to_eigen(m);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(e, Eigen::ComputeThinU | Eigen::ComputeThinV);
    Eigen::MatrixXd approx = Eigen::MatrixXd::Zero(e.rows(), e.cols());
    for (std::size_t i = 0; i < k; ++i)
        approx += svd.singularValues()(i) * svd.matrixU().col(i) *
                  svd.matrixV().col(i).transpose();
    return (e - approx).norm();
}

} // namespace

TEST_CASE("matmul identity") {
    Matrix m = random_matrix(2, 2, 7);
    Matrix i2 = Matrix::identity(2);
    REQUIRE(matmul(i2, m) == m);
    REQUIRE(matmul(m, i2) == m);
}

TEST_CASE("matmul hand arithmetic") {
    Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    Matrix b = Matrix::from_rows({{1}, {1}});
    Matrix c = matmul(a, b);
    REQUIRE(c(0, 0) == 3.0);
    REQUIRE(c(1, 0) == 7.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
    Matrix a = random_matrix(7, 5, 11);
    Matrix b = random_matrix(5, 3, 13);
    REQUIRE(max_abs_diff(matmul(a, b), matmul_oracle(a, b)) < 1e-12);
}

TEST_CASE("matmul shape mismatch throws") {
    Matrix a(2, 3), b(2, 3);
    REQUIRE_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul associativity property") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Matrix a = random_matrix(4, 6, seed * 3 + 1);
        Matrix b = random_matrix(6, 5, seed * 3 + 2);
        Matrix c = random_matrix(5, 3, seed * 3 + 3);
        Matrix left = matmul(matmul(a, b), c);
        Matrix right = matmul(a, matmul(b, c));
        REQUIRE(frobenius_norm(left - right) / frobenius_norm(left) < 1e-9);
    }
}

TEST_CASE("svd of diagonal matrix") {
    Matrix d(3, 3);
    d(0, 0) = 3.0;
    d(1, 1) = 2.0;
    d(2, 2) = 1.0;
    SvdResult r = truncated_svd(d, 2);
    REQUIRE(r.singular_values[0] == Catch::Approx(3.0).margin(1e-12));
    REQUIRE(r.singular_values[1] == Catch::Approx(2.0).margin(1e-12));
    Matrix rec = svd_reconstruct(r);
    Matrix expect(3, 3);
    expect(0, 0) = 3.0;
    expect(1, 1) = 2.0;
    REQUIRE(max_abs_diff(rec, expect) < 1e-12);
    REQUIRE(frobenius_norm(d - rec) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("svd exact on rank-1 outer product") {
    Matrix u = random_matrix(6, 1, 21);
    Matrix v = random_matrix(1, 4, 22);
    Matrix m = matmul(u, v);
    SvdResult r = truncated_svd(m, 1);
    REQUIRE(max_abs_diff(svd_reconstruct(r), m) < 1e-10);
}

TEST_CASE("truncated svd matches full-SVD-then-truncate oracle") {
    Matrix m = random_matrix(8, 6, 31);
    SvdResult r = truncated_svd(m, 3);
    const double err = frobenius_norm(m - svd_reconstruct(r));
    REQUIRE(err == Catch::Approx(best_rank_k_error(m, 3)).margin(1e-8));
}

TEST_CASE("svd orthonormality and ordering invariants") {
    for (std::uint64_t seed = 1; seed <= 6; ++seed) {
        Matrix m = random_matrix(seed % 2 ? 9 : 5, seed % 2 ? 4 : 8, seed * 17);
        const std::size_t k = std::min(m.rows(), m.cols());
        SvdResult r = truncated_svd(m, k);
        for (std::size_t i = 0; i + 1 < k; ++i)
            REQUIRE(r.singular_values[i] >= r.singular_values[i + 1]);
        Matrix utu = matmul(transpose(r.u), r.u);
        Matrix vvt = matmul(r.vt, transpose(r.vt));
        REQUIRE(max_abs_diff(utu, Matrix::identity(k)) < 1e-8);
        REQUIRE(max_abs_diff(vvt, Matrix::identity(k)) < 1e-8);
        // full-rank reconstruction
        REQUIRE(frobenius_norm(m - svd_reconstruct(r)) / frobenius_norm(m) < 1e-8);
    }
}

TEST_CASE("svd handles the zero matrix") {
    Matrix z(5, 3);
    SvdResult r = truncated_svd(z, 3);
    for (double s : r.singular_values) REQUIRE(s == 0.0);
    REQUIRE(max_abs_diff(matmul(transpose(r.u), r.u), Matrix::identity(3)) < 1e-12);
    REQUIRE(max_abs_diff(svd_reconstruct(r), z) < 1e-12);
}

TEST_CASE("svd rank out of range throws") {
    Matrix m(4, 3);
    REQUIRE_THROWS_AS(truncated_svd(m, 0), RankError);
    REQUIRE_THROWS_AS(truncated_svd(m, 4), RankError);
}

TEST_CASE("singular values invariant to row and column permutation") {
    Matrix m = random_matrix(6, 6, 77);
    Matrix perm_rows(6, 6), perm_cols(6, 6);
    const std::size_t pr[6] = {3, 1, 5, 0, 4, 2};
    const std::size_t pc[6] = {2, 0, 1, 5, 3, 4};
    for (std::size_t i = 0; i < 6; ++i) {
        perm_rows(i, pr[i]) = 1.0;
        perm_cols(pc[i], i) = 1.0;
    }
    Matrix shuffled = matmul(matmul(perm_rows, m), perm_cols);
    SvdResult a = full_svd(m);
    SvdResult b = full_svd(shuffled);
    for (std::size_t i = 0; i < 6; ++i)
        REQUIRE(a.singular_values[i] == Catch::Approx(b.singular_values[i]).margin(1e-9));
}

TEST_CASE("random_init determinism and degenerate cases") {
    Matrix zero = random_init(4, 5, 0.0, 9);
    for (std::size_t i = 0; i < zero.size(); ++i) REQUIRE(zero.data()[i] == 0.0);

    Matrix a = random_init(4, 5, 0.7, 9);
    Matrix b = random_init(4, 5, 0.7, 9);
    REQUIRE(a == b);

    Matrix c = random_init(4, 5, 0.7, 10);
    REQUIRE_FALSE(a == c);
    REQUIRE(a.all_finite());
}

TEST_CASE("random_init draws have roughly the requested moments") {
    Matrix m = random_init(100, 100, 2.0, 4242);
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) mean += m.data()[i];
    mean /= static_cast<double>(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double d = m.data()[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(m.size());
    REQUIRE(std::abs(mean) < 0.1);
    REQUIRE(std::abs(var - 4.0) < 0.3);
}
