#pragma once

#include <cstddef>
#include <vector>

#include "raypose/geometry.hpp"

namespace raypose {

// Thin SVD a = u * diag(sigma) * v^T (first min(m,n) columns of v).
//   u:     m x min(m,n), orthonormal columns
//   sigma: length n, descending, non-negative (entries past min(m,n) are 0)
//   v:     n x n, orthogonal
struct SvdResult {
    std::size_t m = 0, n = 0;
    std::vector<double> u;
    std::vector<double> sigma;
    std::vector<double> v;

    double u_at(std::size_t r, std::size_t c) const { return u[r * u_cols() + c]; }
    double v_at(std::size_t r, std::size_t c) const { return v[r * n + c]; }
    std::size_t u_cols() const { return m < n ? m : n; }

    // Residual max|a - u sigma v^T| against the original matrix.
    double reconstruction_error(const std::vector<double>& a) const;
};

// One-sided Jacobi SVD for small dense matrices (row-major input).
// Deterministic; throws ConvergenceFailure after 50 sweeps.
SvdResult svd_small(const std::vector<double>& a, std::size_t m, std::size_t n);

struct Svd3Result {
    Mat3 u;
    Vec3 sigma;
    Mat3 v;
};

Svd3Result svd3(const Mat3& a);

}  // namespace raypose
