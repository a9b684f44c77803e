#pragma once

// Test-side helpers: a strongly convex quadratic objective satisfying the
// same interface as the library objectives, plus independent oracles
// (finite differences, adjugate inverses) that never touch the solver paths
// they are used to check.

#include <cmath>
#include <cstdint>
#include <vector>

#include "fedsim/fedsim.hpp"

namespace testsupport {

using fedsim::Matrix;
using fedsim::Vec;

/// 0.5 (theta - c)^T A (theta - c) with symmetric positive-definite A.
class QuadraticObjective {
public:
    QuadraticObjective(Matrix a, Vec center, double mu_bound)
        : a_(std::move(a)), center_(std::move(center)), mu_(mu_bound) {}

    std::size_t dim() const { return center_.size(); }
    double lambda() const { return mu_; }
    const Vec& center() const { return center_; }

    double value(const Vec& theta) const {
        Vec d = fedsim::sub(theta, center_);
        return 0.5 * fedsim::dot(d, fedsim::matvec(a_, d));
    }

    Vec gradient(const Vec& theta) const { return fedsim::matvec(a_, fedsim::sub(theta, center_)); }

    Matrix hessian(const Vec&) const { return a_; }

private:
    Matrix a_;
    Vec center_;
    double mu_;
};

/// Symmetric positive definite d x d matrix with eigenvalues >= floor,
/// built as B^T B / d + floor * I.
inline Matrix random_spd(std::size_t d, fedsim::Rng& rng, double floor = 0.5) {
    Matrix b(d, d);
    for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) b(i, j) = rng.normal();
    Matrix a = fedsim::matmul(fedsim::transpose(b), b);
    for (double& x : a.entries()) x /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) a(i, i) += floor;
    return fedsim::symmetrize(a);
}

inline Vec random_vec(std::size_t d, fedsim::Rng& rng, double scale = 1.0) {
    Vec v(d);
    for (double& x : v) x = scale * rng.normal();
    return v;
}

/// Inverse of a 2x2 matrix by the adjugate formula.
inline Matrix inverse2x2(const Matrix& a) {
    double det = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0);
    Matrix inv(2, 2);
    inv(0, 0) = a(1, 1) / det;
    inv(0, 1) = -a(0, 1) / det;
    inv(1, 0) = -a(1, 0) / det;
    inv(1, 1) = a(0, 0) / det;
    return inv;
}

/// Central finite difference of a scalar function.
template <typename F>
Vec fd_gradient(const F& f, const Vec& theta, double h = 1e-6) {
    Vec g(theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        Vec up = theta, dn = theta;
        up[i] += h;
        dn[i] -= h;
        g[i] = (f(up) - f(dn)) / (2.0 * h);
    }
    return g;
}

/// Central finite difference of a vector function, column i = d f / d theta_i.
template <typename F>
Matrix fd_jacobian(const F& f, const Vec& theta, double h = 1e-6) {
    Vec base = f(theta);
    Matrix j(base.size(), theta.size());
    for (std::size_t i = 0; i < theta.size(); ++i) {
        Vec up = theta, dn = theta;
        up[i] += h;
        dn[i] -= h;
        Vec fu = f(up), fd = f(dn);
        for (std::size_t r = 0; r < base.size(); ++r) j(r, i) = (fu[r] - fd[r]) / (2.0 * h);
    }
    return j;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double rel_diff(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

}  // namespace testsupport
