#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace fedcbdr::linalg {

/// Dense real matrix, row-major, double precision.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    Matrix transpose() const;
    bool all_finite() const;
    double max_abs() const;
    double frobenius_norm() const;

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Dimension-checked product.
Matrix operator*(const Matrix& a, const Matrix& b);

enum class OrthoKind { GeneralOrthogonal, Permutation };

struct OrthogonalMatrix {
    Matrix inner;
    OrthoKind kind = OrthoKind::GeneralOrthogonal;
    /// Row i of the matrix has its 1 at column perm[i]; only set for
    /// kind == Permutation. Left-multiplying maps output row i to input
    /// row perm[i].
    std::vector<std::size_t> perm;

    std::size_t size() const { return inner.rows(); }

    /// Max-abs deviation of inner^T * inner from the identity.
    double orthogonality_error() const;
};

/// Thin SVD factors: X = U * diag(S) * V^T with U (n x r), V (d x r),
/// r = min(n, d), S non-increasing and nonnegative. Columns of U paired
/// with zero singular values are an orthonormal completion.
struct FactoredMatrix {
    Matrix u;
    std::vector<double> s;
    Matrix v;
    std::size_t rank_bound = 0;  // r = min(n, d)

    Matrix reconstruct() const;
};

/// Seeded random orthogonal matrix. GeneralOrthogonal orthonormalizes a
/// standard-Gaussian matrix (Gram-Schmidt QR); Permutation is a uniform
/// random permutation. Same (n, seed, kind) gives bit-identical output.
OrthogonalMatrix random_orthogonal(std::size_t n, std::uint64_t seed, OrthoKind kind);

/// Thin SVD by one-sided Jacobi rotations.
FactoredMatrix thin_svd(const Matrix& x);

/// P * X * Q with dimension checks. Permutation operands are applied as
/// exact row/column gathers, so a mask/unmask round trip is bitwise.
Matrix apply_mask(const OrthogonalMatrix& p, const Matrix& x, const OrthogonalMatrix& q);

}  // namespace fedcbdr::linalg
