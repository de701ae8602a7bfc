#include "raypose/svd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "raypose/error.hpp"

namespace raypose {

namespace {

constexpr int kMaxSweeps = 50;
constexpr double kOrthoTol = 1e-15;

// One-sided Jacobi on the columns of a (m x n, m >= n, column-major work
// buffer). On return cols(a) = u * sigma and v accumulates the rotations.
void jacobi_core(std::vector<double>& col, std::size_t m, std::size_t n, std::vector<double>& v) {
    auto col_p = [&](std::size_t j) { return col.data() + j * m; };

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double* cp = col_p(p);
                double* cq = col_p(q);
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += cp[i] * cp[i];
                    beta += cq[i] * cq[i];
                    gamma += cp[i] * cq[i];
                }
                if (alpha == 0.0 || beta == 0.0) continue;
                if (std::abs(gamma) <= kOrthoTol * std::sqrt(alpha * beta)) continue;
                rotated = true;

                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double sign = zeta >= 0.0 ? 1.0 : -1.0;
                const double t = sign / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;

                for (std::size_t i = 0; i < m; ++i) {
                    const double a_i = cp[i], b_i = cq[i];
                    cp[i] = c * a_i - s * b_i;
                    cq[i] = s * a_i + c * b_i;
                }
                // v is n x n, row-major: rotate columns p, q.
                for (std::size_t i = 0; i < n; ++i) {
                    const double a_i = v[i * n + p], b_i = v[i * n + q];
                    v[i * n + p] = c * a_i - s * b_i;
                    v[i * n + q] = s * a_i + c * b_i;
                }
            }
        }
        if (!rotated) return;
    }
    throw ConvergenceFailure("jacobi svd did not converge within sweep budget");
}

// Fill column `target` of u (m x k, row-major) with a unit vector orthogonal
// to columns [0, target). Deterministic basis completion.
void complete_column(std::vector<double>& u, std::size_t m, std::size_t k, std::size_t target) {
    std::vector<double> cand(m);
    for (std::size_t basis = 0; basis < m; ++basis) {
        std::fill(cand.begin(), cand.end(), 0.0);
        cand[basis] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < target; ++j) {
                double d = 0.0;
                for (std::size_t i = 0; i < m; ++i) d += cand[i] * u[i * k + j];
                for (std::size_t i = 0; i < m; ++i) cand[i] -= d * u[i * k + j];
            }
        }
        double nrm = 0.0;
        for (double x : cand) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm > 0.5) {
            for (std::size_t i = 0; i < m; ++i) u[i * k + target] = cand[i] / nrm;
            return;
        }
    }
    throw ConvergenceFailure("failed to complete orthonormal basis");
}

// m >= n case.
SvdResult svd_tall(const std::vector<double>& a, std::size_t m, std::size_t n) {
    std::vector<double> col(m * n);  // column-major copy
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) col[c * m + r] = a[r * n + c];

    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;

    jacobi_core(col, m, n, v);

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += col[j * m + i] * col[j * m + i];
        sigma[j] = std::sqrt(s);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t i, std::size_t j) { return sigma[i] > sigma[j]; });

    SvdResult out;
    out.m = m;
    out.n = n;
    out.sigma.resize(n);
    out.u.assign(m * n, 0.0);
    out.v.assign(n * n, 0.0);

    const double sig_max = sigma[order[0]];
    const double null_tol = sig_max * 4.0e-16 * static_cast<double>(m);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.sigma[k] = sigma[j];
        for (std::size_t i = 0; i < n; ++i) out.v[i * n + k] = v[i * n + j];
        if (sigma[j] > null_tol && sigma[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) out.u[i * n + k] = col[j * m + i] / sigma[j];
        } else {
            complete_column(out.u, m, n, k);
        }
    }
    return out;
}

}  // namespace

double SvdResult::reconstruction_error(const std::vector<double>& a) const {
    const std::size_t k = u_cols();
    double err = 0.0;
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j < k; ++j) s += u_at(r, j) * sigma[j] * v_at(c, j);
            err = std::max(err, std::abs(s - a[r * n + c]));
        }
    }
    return err;
}

SvdResult svd_small(const std::vector<double>& a, std::size_t m, std::size_t n) {
    if (a.size() != m * n || m == 0 || n == 0)
        throw ShapeMismatch("svd_small: bad dimensions");
    for (double x : a)
        if (!std::isfinite(x)) throw IllConditioned("svd_small: non-finite entry");

    if (m >= n) return svd_tall(a, m, n);

    // m < n: factor a^T = u' s v'^T, so a = v' s u'^T. The right basis is
    // completed to a full n x n orthogonal matrix with zero singular values.
    std::vector<double> at(n * m);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < n; ++c) at[c * m + r] = a[r * n + c];
    SvdResult t = svd_tall(at, n, m);

    SvdResult out;
    out.m = m;
    out.n = n;
    out.sigma.assign(n, 0.0);
    for (std::size_t j = 0; j < m; ++j) out.sigma[j] = t.sigma[j];
    out.u.assign(m * m, 0.0);
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < m; ++c) out.u[r * m + c] = t.v_at(r, c);
    out.v.assign(n * n, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < m; ++c) out.v[r * n + c] = t.u_at(r, c);
    for (std::size_t c = m; c < n; ++c) complete_column(out.v, n, n, c);
    return out;
}

Svd3Result svd3(const Mat3& a) {
    const SvdResult r = svd_small(std::vector<double>(a.m.begin(), a.m.end()), 3, 3);
    Svd3Result out;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            out.u(i, j) = r.u_at(i, j);
            out.v(i, j) = r.v_at(i, j);
        }
    out.sigma = {r.sigma[0], r.sigma[1], r.sigma[2]};
    return out;
}

}  // namespace raypose
