#include "fedcbdr/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "fedcbdr/rng.hpp"

namespace fedcbdr::linalg {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double x) { return std::isfinite(x); });
}

double Matrix::max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::abs(x));
    return m;
}

double Matrix::frobenius_norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return std::sqrt(s);
}

Matrix operator*(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matrix product: inner dimensions " + std::to_string(a.cols()) +
                                    " and " + std::to_string(b.rows()) + " do not match");
    }
    Matrix c(a.rows(), b.cols(), 0.0);
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

double OrthogonalMatrix::orthogonality_error() const {
    const std::size_t n = inner.rows();
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < n; ++k) dot += inner(k, i) * inner(k, j);
            const double target = (i == j) ? 1.0 : 0.0;
            worst = std::max(worst, std::abs(dot - target));
        }
    }
    return worst;
}

Matrix FactoredMatrix::reconstruct() const {
    const std::size_t n = u.rows();
    const std::size_t d = v.rows();
    const std::size_t r = rank_bound;
    Matrix x(n, d, 0.0);
    for (std::size_t k = 0; k < r; ++k) {
        const double sk = s[k];
        if (sk == 0.0) continue;
        for (std::size_t i = 0; i < n; ++i) {
            const double us = u(i, k) * sk;
            for (std::size_t j = 0; j < d; ++j) x(i, j) += us * v(j, k);
        }
    }
    return x;
}

namespace {

/// Columns of g orthonormalized in place by modified Gram-Schmidt with one
/// re-orthogonalization pass.
void orthonormalize_columns(Matrix& g) {
    const std::size_t n = g.rows();
    const std::size_t m = g.cols();
    for (std::size_t j = 0; j < m; ++j) {
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t i = 0; i < j; ++i) {
                double dot = 0.0;
                for (std::size_t k = 0; k < n; ++k) dot += g(k, i) * g(k, j);
                for (std::size_t k = 0; k < n; ++k) g(k, j) -= dot * g(k, i);
            }
        }
        double norm = 0.0;
        for (std::size_t k = 0; k < n; ++k) norm += g(k, j) * g(k, j);
        norm = std::sqrt(norm);
        if (norm == 0.0) {
            throw std::runtime_error("orthonormalize_columns: rank-deficient input");
        }
        for (std::size_t k = 0; k < n; ++k) g(k, j) /= norm;
    }
}

struct JacobiResult {
    Matrix u;               // n x d
    std::vector<double> s;  // length d
    Matrix v;               // d x d
};

/// One-sided Jacobi SVD of a tall-or-square matrix (n >= d). Rotates column
/// pairs until all are mutually orthogonal, then reads off singular values
/// as column norms. Columns with zero norm are completed from standard
/// basis vectors so U always has d orthonormal columns.
JacobiResult one_sided_jacobi(const Matrix& a) {
    const std::size_t n = a.rows();
    const std::size_t d = a.cols();
    Matrix b = a;
    Matrix v = Matrix::identity(d);

    constexpr double kPairTol = 1e-14;
    constexpr int kMaxSweeps = 64;
    bool converged = (d <= 1);
    for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
        converged = true;
        for (std::size_t i = 0; i + 1 < d; ++i) {
            for (std::size_t j = i + 1; j < d; ++j) {
                double alpha = 0.0, beta = 0.0, gam = 0.0;
                for (std::size_t k = 0; k < n; ++k) {
                    const double bi = b(k, i), bj = b(k, j);
                    alpha += bi * bi;
                    beta += bj * bj;
                    gam += bi * bj;
                }
                if (gam == 0.0 || alpha == 0.0 || beta == 0.0) continue;
                if (std::abs(gam) <= kPairTol * std::sqrt(alpha * beta)) continue;
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gam);
                const double t = std::copysign(1.0, zeta) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < n; ++k) {
                    const double bi = b(k, i), bj = b(k, j);
                    b(k, i) = c * bi - s * bj;
                    b(k, j) = s * bi + c * bj;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double vi = v(k, i), vj = v(k, j);
                    v(k, i) = c * vi - s * vj;
                    v(k, j) = s * vi + c * vj;
                }
            }
        }
    }
    if (!converged) {
        throw std::runtime_error("thin_svd: Jacobi sweep limit exceeded");
    }

    std::vector<double> sigma(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double norm = 0.0;
        for (std::size_t k = 0; k < n; ++k) norm += b(k, j) * b(k, j);
        sigma[j] = std::sqrt(norm);
    }

    // Sort descending; stable so exact ties keep their relative order.
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    JacobiResult out;
    out.u = Matrix(n, d);
    out.v = Matrix(d, d);
    out.s.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        const std::size_t src = order[j];
        out.s[j] = sigma[src];
        for (std::size_t k = 0; k < d; ++k) out.v(k, j) = v(k, src);
        if (sigma[src] > 0.0) {
            for (std::size_t k = 0; k < n; ++k) out.u(k, j) = b(k, src) / sigma[src];
        }
    }

    // Complete U for exactly-zero singular values with basis vectors made
    // orthonormal against the columns already in place. Zero columns sort
    // to the end, so column j only needs orthogonalizing against 0..j-1.
    for (std::size_t j = 0; j < d; ++j) {
        if (out.s[j] > 0.0) continue;
        bool placed = false;
        for (std::size_t cand = 0; cand < n && !placed; ++cand) {
            std::vector<double> w(n, 0.0);
            w[cand] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (std::size_t c = 0; c < j; ++c) {
                    double dot = 0.0;
                    for (std::size_t k = 0; k < n; ++k) dot += out.u(k, c) * w[k];
                    for (std::size_t k = 0; k < n; ++k) w[k] -= dot * out.u(k, c);
                }
            }
            double norm = 0.0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm > 0.5) {
                for (std::size_t k = 0; k < n; ++k) out.u(k, j) = w[k] / norm;
                placed = true;
            }
        }
        if (!placed) {
            throw std::runtime_error("thin_svd: failed to complete orthonormal basis");
        }
    }
    return out;
}

}  // namespace

OrthogonalMatrix random_orthogonal(std::size_t n, std::uint64_t seed, OrthoKind kind) {
    if (n == 0) {
        throw std::invalid_argument("random_orthogonal: dimension must be at least 1");
    }
    OrthogonalMatrix out;
    out.kind = kind;
    Rng rng(seed);
    if (kind == OrthoKind::Permutation) {
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        rng.shuffle(perm);
        out.inner = Matrix(n, n, 0.0);
        for (std::size_t i = 0; i < n; ++i) out.inner(i, perm[i]) = 1.0;
        out.perm = std::move(perm);
    } else {
        Matrix g(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) g(i, j) = rng.normal();
        orthonormalize_columns(g);
        out.inner = std::move(g);
    }
    return out;
}

FactoredMatrix thin_svd(const Matrix& x) {
    if (x.rows() == 0 || x.cols() == 0) {
        throw std::invalid_argument("thin_svd: matrix must be non-empty");
    }
    if (!x.all_finite()) {
        throw std::invalid_argument("thin_svd: input contains non-finite entries");
    }
    FactoredMatrix f;
    if (x.rows() >= x.cols()) {
        JacobiResult r = one_sided_jacobi(x);
        f.u = std::move(r.u);
        f.s = std::move(r.s);
        f.v = std::move(r.v);
    } else {
        // Wide case: factor the transpose and swap the roles of U and V.
        JacobiResult r = one_sided_jacobi(x.transpose());
        f.u = std::move(r.v);
        f.s = std::move(r.s);
        f.v = std::move(r.u);
    }
    f.rank_bound = std::min(x.rows(), x.cols());
    return f;
}

namespace {

Matrix permute_rows(const std::vector<std::size_t>& perm, const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) y(i, j) = x(perm[i], j);
    return y;
}

Matrix permute_cols(const Matrix& x, const std::vector<std::size_t>& perm) {
    // X * Q with Q(k, perm[k]) = 1: column k of X lands at column perm[k].
    Matrix y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t k = 0; k < x.cols(); ++k) y(i, perm[k]) = x(i, k);
    return y;
}

}  // namespace

Matrix apply_mask(const OrthogonalMatrix& p, const Matrix& x, const OrthogonalMatrix& q) {
    if (p.size() != x.rows() || q.size() != x.cols()) {
        throw std::invalid_argument("apply_mask: P is " + std::to_string(p.size()) + "x" +
                                    std::to_string(p.size()) + ", Q is " + std::to_string(q.size()) +
                                    "x" + std::to_string(q.size()) + ", X is " +
                                    std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
    }
    Matrix left = (p.kind == OrthoKind::Permutation) ? permute_rows(p.perm, x) : p.inner * x;
    return (q.kind == OrthoKind::Permutation) ? permute_cols(left, q.perm) : left * q.inner;
}

}  // namespace fedcbdr::linalg
