#pragma once

#include "pertrace/tensor.hpp"

#include <cstddef>
#include <vector>

namespace pertrace {

/// Thin SVD: for an m x n input with k = min(m, n), u is m x k, s has k
/// entries sorted descending, v is n x k. Columns of u and v are orthonormal
/// even when the input is rank deficient.
struct SvdResult {
    Matrix u;
    Vector s;
    Matrix v;
};

/// One-sided Jacobi SVD in double precision with a fixed cyclic sweep order.
/// The first nonzero entry of each right singular vector is made positive and
/// the matching left vector is flipped with it.
SvdResult svd(const Matrix& a);

/// Eigen-decomposition of a symmetric matrix (cyclic Jacobi, double).
/// Eigenvalues sorted descending; eigenvectors are the columns of `vectors`.
struct SymmetricEigen {
    std::vector<double> values;
    std::vector<double> vectors;  // n x n row-major
    std::size_t n = 0;
    double vector_entry(std::size_t row, std::size_t col) const { return vectors[row * n + col]; }
};
SymmetricEigen symmetric_eigen(std::vector<double> a, std::size_t n);

struct PcaBasis {
    Vector mean;
    Matrix components;                // d x k, orthonormal columns
    Vector explained_variance_ratio;  // k entries
    Vector spectrum;                  // ratio for every nonzero-rank direction, min(n, d) entries
    Vector variances;                 // sample variance (n - 1 denominator) per retained component
    bool rank_deficient = false;      // fewer than k directions carry variance
};

/// PCA of the rows of `samples` (n x d). Requires n >= k + 1 unless
/// `allow_degenerate` is set, in which case any n >= 1 is accepted and the
/// result is flagged as rank deficient where the data do not support k
/// directions.
PcaBasis pca_fit(const Matrix& samples, std::size_t n_components, bool allow_degenerate = false);

/// Coordinates of `x` in the basis: components^T (x - mean).
Vector pca_project(const PcaBasis& basis, std::span<const float> x);

/// Extends the orthonormal columns of `q` (d x m) to d x k orthonormal columns
/// by Gram-Schmidt against the standard basis.
Matrix complete_orthonormal(const Matrix& q, std::size_t k);

} // namespace pertrace
