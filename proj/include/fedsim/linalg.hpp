#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace fedsim {

/// Flat 64-bit parameter / gradient vector.
using Vec = std::vector<double>;

/// Dense row-major matrix of 64-bit floats.
///
/// All reductions over entries run sequentially in index order, which keeps
/// every operation bit-reproducible from run to run.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

    std::span<double> entries() { return data_; }
    std::span<const double> entries() const { return data_; }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Vector operations (sequential index-order sums throughout).

inline double dot(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw DimensionMismatch("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(const Vec& a) { return std::sqrt(dot(a, a)); }

inline Vec add(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw DimensionMismatch("add: length mismatch");
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] + b[i];
    return r;
}

inline Vec sub(const Vec& a, const Vec& b) {
    if (a.size() != b.size()) throw DimensionMismatch("sub: length mismatch");
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - b[i];
    return r;
}

inline Vec scale(const Vec& a, double c) {
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = c * a[i];
    return r;
}

/// r = a - c * b, the update-step shape used by every method.
inline Vec step(const Vec& a, double c, const Vec& b) {
    if (a.size() != b.size()) throw DimensionMismatch("step: length mismatch");
    Vec r(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) r[i] = a[i] - c * b[i];
    return r;
}

inline Vec vec_mean(std::span<const Vec> vs) {
    if (vs.empty()) throw EmptyList("vec_mean: empty list");
    const std::size_t n = vs.front().size();
    Vec r(n, 0.0);
    for (const Vec& v : vs) {
        if (v.size() != n) throw ShapeMismatch("vec_mean: length mismatch");
        for (std::size_t i = 0; i < n; ++i) r[i] += v[i];
    }
    const double count = static_cast<double>(vs.size());
    for (std::size_t i = 0; i < n; ++i) r[i] /= count;
    return r;
}

inline bool all_finite(const Vec& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

inline void ensure_finite(const Vec& v, const char* what) {
    if (!all_finite(v)) throw NumericalError(std::string(what) + ": non-finite entries");
}

// ---------------------------------------------------------------------------
// Matrix operations.

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw DimensionMismatch("matmul: inner dimension mismatch");
    Matrix r(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            r(i, j) = s;
        }
    return r;
}

inline Vec matvec(const Matrix& a, const Vec& x) {
    if (a.cols() != x.size()) throw DimensionMismatch("matvec: dimension mismatch");
    Vec r(a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * x[k];
        r[i] = s;
    }
    return r;
}

inline Matrix transpose(const Matrix& a) {
    Matrix r(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) r(j, i) = a(i, j);
    return r;
}

/// (A + A^T) / 2, applied once after building any curvature matrix so that
/// floating-point asymmetry cannot reach the factorization.
inline Matrix symmetrize(const Matrix& a) {
    if (a.rows() != a.cols()) throw DimensionMismatch("symmetrize: matrix not square");
    Matrix r(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) r(i, j) = (a(i, j) + a(j, i)) / 2.0;
    return r;
}

inline bool is_symmetric(const Matrix& a, double tol = 1e-12) {
    if (a.rows() != a.cols()) return false;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) {
            double lhs = std::abs(a(i, j) - a(j, i));
            if (lhs > tol * std::max(1.0, std::abs(a(i, j)))) return false;
        }
    return true;
}

/// A + rho * I. Keeps symmetry; for PSD A and rho > 0 the result is PD.
inline Matrix damp(const Matrix& a, double rho) {
    if (a.rows() != a.cols()) throw DimensionMismatch("damp: matrix not square");
    Matrix r = a;
    for (std::size_t i = 0; i < a.rows(); ++i) r(i, i) += rho;
    return r;
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double x : a.entries()) s += x * x;
    return std::sqrt(s);
}

inline Matrix matrix_sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("matrix_sub: shape mismatch");
    Matrix r(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.entries().size(); ++i)
        r.entries()[i] = a.entries()[i] - b.entries()[i];
    return r;
}

/// Entrywise arithmetic mean, summed in list order.
inline Matrix matrix_mean(std::span<const Matrix> as) {
    if (as.empty()) throw EmptyList("matrix_mean: empty list");
    const Matrix& first = as.front();
    Matrix r(first.rows(), first.cols());
    for (const Matrix& a : as) {
        if (!a.same_shape(first)) throw ShapeMismatch("matrix_mean: shape mismatch");
        for (std::size_t i = 0; i < r.entries().size(); ++i) r.entries()[i] += a.entries()[i];
    }
    const double count = static_cast<double>(as.size());
    for (double& x : r.entries()) x /= count;
    return r;
}

// ---------------------------------------------------------------------------
// Positive-definite solves.

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Factor once, then solve any number of right-hand sides by forward and
/// backward substitution. Only the lower triangle of the input is read.
class Cholesky {
public:
    explicit Cholesky(const Matrix& a) : l_(a.rows(), a.cols()) {
        if (a.rows() != a.cols()) throw DimensionMismatch("cholesky: matrix not square");
        const std::size_t n = a.rows();
        for (std::size_t j = 0; j < n; ++j) {
            double d = a(j, j);
            for (std::size_t k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
            if (!(d > 1e-14))
                throw NotPositiveDefinite("cholesky: pivot " + std::to_string(d) + " at column " +
                                          std::to_string(j) + "; increase damping");
            l_(j, j) = std::sqrt(d);
            for (std::size_t i = j + 1; i < n; ++i) {
                double s = a(i, j);
                for (std::size_t k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
                l_(i, j) = s / l_(j, j);
            }
        }
    }

    std::size_t dim() const { return l_.rows(); }
    const Matrix& lower() const { return l_; }

    Vec solve(const Vec& b) const {
        const std::size_t n = dim();
        if (b.size() != n) throw DimensionMismatch("cholesky solve: rhs length mismatch");
        Vec y(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = b[i];
            for (std::size_t k = 0; k < i; ++k) s -= l_(i, k) * y[k];
            y[i] = s / l_(i, i);
        }
        Vec x(n);
        for (std::size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (std::size_t k = ii + 1; k < n; ++k) s -= l_(k, ii) * x[k];
            x[ii] = s / l_(ii, ii);
        }
        return x;
    }

    Matrix solve(const Matrix& b) const {
        if (b.rows() != dim()) throw DimensionMismatch("cholesky solve: rhs rows mismatch");
        Matrix x(b.rows(), b.cols());
        Vec col(b.rows());
        for (std::size_t j = 0; j < b.cols(); ++j) {
            for (std::size_t i = 0; i < b.rows(); ++i) col[i] = b(i, j);
            Vec sol = solve(col);
            for (std::size_t i = 0; i < b.rows(); ++i) x(i, j) = sol[i];
        }
        return x;
    }

private:
    Matrix l_;
};

/// X with A X = B for symmetric positive-definite A.
inline Matrix cholesky_solve(const Matrix& a, const Matrix& b) { return Cholesky(a).solve(b); }

inline Vec cholesky_solve(const Matrix& a, const Vec& b) { return Cholesky(a).solve(b); }

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
inline double spectral_norm_sym(const Matrix& a, double rel_tol = 1e-6,
                                std::uint64_t seed = 0x5eed) {
    if (a.rows() != a.cols()) throw DimensionMismatch("spectral_norm_sym: matrix not square");
    const std::size_t n = a.rows();
    if (n == 0) return 0.0;
    Rng rng(seed);
    Vec v(n);
    for (double& x : v) x = rng.normal();
    double nv = norm2(v);
    if (nv == 0.0) return 0.0;
    for (double& x : v) x /= nv;
    double est = 0.0;
    for (int it = 0; it < 1000; ++it) {
        Vec w = matvec(a, v);
        double next = norm2(w);
        if (next == 0.0) return 0.0;
        for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / next;
        if (it > 0 && std::abs(next - est) <= rel_tol * next) return next;
        est = next;
    }
    return est;
}

}  // namespace fedsim
