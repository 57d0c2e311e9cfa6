#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "fedlora/errors.hpp"
#include "fedlora/matrix.hpp"

namespace fedlora {

struct SvdResult {
    Matrix u;                            // m x k, orthonormal columns
    std::vector<double> singular_values; // length k, non-increasing, >= 0
    Matrix vt;                           // k x n, orthonormal rows
};

namespace detail {

// One-sided Jacobi on the columns of g (rows >= cols assumed by caller).
// v accumulates the right rotations. Sweeps run in a fixed pair order so the
// result is deterministic; throws after max_sweeps without convergence.
inline void jacobi_orthogonalize(Matrix& g, Matrix& v) {
    const std::size_t n = g.cols();
    const std::size_t rows = g.rows();
    constexpr double kTol = 1e-14;
    constexpr std::size_t kMaxSweeps = 60;

    for (std::size_t sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double gp = g(i, p), gq = g(i, q);
                    app += gp * gp;
                    aqq += gq * gq;
                    apq += gp * gq;
                }
                const double denom = std::sqrt(app * aqq);
                if (denom == 0.0 || std::abs(apq) <= kTol * denom) continue;

                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;

                for (std::size_t i = 0; i < rows; ++i) {
                    const double gp = g(i, p), gq = g(i, q);
                    g(i, p) = cs * gp - sn * gq;
                    g(i, q) = sn * gp + cs * gq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = cs * vp - sn * vq;
                    v(i, q) = sn * vp + cs * vq;
                }
                rotated = true;
            }
        }
        if (!rotated) return;
    }
    throw NumericError("svd: Jacobi sweeps did not converge", kMaxSweeps);
}

// Fills column j of u with a unit vector orthogonal to columns [0, j).
// Candidates are the standard basis vectors, tried in index order.
inline void orthonormal_fill(Matrix& u, std::size_t j) {
    const std::size_t rows = u.rows();
    for (std::size_t cand = 0; cand < rows; ++cand) {
        std::vector<double> w(rows, 0.0);
        w[cand] = 1.0;
        for (std::size_t l = 0; l < j; ++l) {
            double dot = 0.0;
            for (std::size_t i = 0; i < rows; ++i) dot += u(i, l) * w[i];
            for (std::size_t i = 0; i < rows; ++i) w[i] -= dot * u(i, l);
        }
        double norm = 0.0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm > 0.5) {
            for (std::size_t i = 0; i < rows; ++i) u(i, j) = w[i] / norm;
            return;
        }
    }
    throw NumericError("svd: orthonormal completion failed", 0);
}

} // namespace detail

// Top-k singular triplets of m via one-sided Jacobi. Reconstruction
// u * diag(s) * vt is the best rank-k Frobenius approximation. Sign
// convention: the largest-magnitude entry of each left singular vector is
// made non-negative so factor bytes are reproducible.
inline SvdResult truncated_svd(const Matrix& m, std::size_t k) {
    const std::size_t min_dim = std::min(m.rows(), m.cols());
    if (k < 1 || k > min_dim)
        throw RankError("truncated_svd: k=" + std::to_string(k) + " out of range for " +
                        shape_str(m));

    const bool flipped = m.rows() < m.cols();
    Matrix g = flipped ? transpose(m) : m;
    Matrix v = Matrix::identity(g.cols());
    detail::jacobi_orthogonalize(g, v);

    const std::size_t n = g.cols();
    std::vector<double> sigma(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < g.rows(); ++i) s += g(i, j) * g(i, j);
        sigma[j] = std::sqrt(s);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

    // Left vectors are the normalized columns of g; zero columns get an
    // orthonormal completion so u stays a frame even for rank-deficient input.
    Matrix left(g.rows(), k);
    Matrix right(g.cols(), k);
    std::vector<double> values(k);
    const double tiny = 1e-300;
    for (std::size_t jj = 0; jj < k; ++jj) {
        const std::size_t src = order[jj];
        values[jj] = sigma[src];
        for (std::size_t i = 0; i < g.cols(); ++i) right(i, jj) = v(i, src);
        if (sigma[src] > tiny) {
            for (std::size_t i = 0; i < g.rows(); ++i) left(i, jj) = g(i, src) / sigma[src];
        } else {
            values[jj] = 0.0;
            detail::orthonormal_fill(left, jj);
        }
    }

    SvdResult out;
    out.singular_values = std::move(values);
    if (!flipped) {
        out.u = std::move(left);
        out.vt = transpose(right);
    } else {
        out.u = std::move(right);
        out.vt = transpose(left);
    }

    // Deterministic signs: largest-|entry| of each u column made non-negative.
    for (std::size_t j = 0; j < k; ++j) {
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < out.u.rows(); ++i) {
            if (std::abs(out.u(i, j)) > best) {
                best = std::abs(out.u(i, j));
                arg = i;
            }
        }
        if (out.u(arg, j) < 0.0) {
            for (std::size_t i = 0; i < out.u.rows(); ++i) out.u(i, j) = -out.u(i, j);
            for (std::size_t i = 0; i < out.vt.cols(); ++i) out.vt(j, i) = -out.vt(j, i);
        }
    }
    return out;
}

inline SvdResult full_svd(const Matrix& m) {
    return truncated_svd(m, std::min(m.rows(), m.cols()));
}

inline Matrix svd_reconstruct(const SvdResult& r) {
    Matrix scaled = r.u; // scale columns by singular values, then multiply
    for (std::size_t j = 0; j < scaled.cols(); ++j)
        for (std::size_t i = 0; i < scaled.rows(); ++i)
            scaled(i, j) *= r.singular_values[j];
    return matmul(scaled, r.vt);
}

} // namespace fedlora
