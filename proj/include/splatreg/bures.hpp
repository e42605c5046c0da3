#pragma once

// Closed-form 2-Wasserstein cost between Gaussians and the batched M x N
// cost matrix used by the transport solver.

#include <cmath>
#include <cstddef>
#include <vector>

#include "splatreg/core.hpp"
#include "splatreg/eigen3x3.hpp"

namespace splatreg {

/// Dense row-major M x N matrix of pairwise transport costs.
class CostMatrix {
public:
    CostMatrix() = default;
    CostMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    CostMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw Error(ErrorCode::DimensionMismatch, "cost matrix data does not match its shape");
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t i, std::size_t k) { return data_[i * cols_ + k]; }
    double operator()(std::size_t i, std::size_t k) const { return data_[i * cols_ + k]; }

    const std::vector<double>& data() const { return data_; }

    double mean() const {
        if (data_.empty()) return 0.0;
        double s = 0.0;
        for (double v : data_) s += v;
        return s / static_cast<double>(data_.size());
    }

    CostMatrix transposed() const {
        CostMatrix t(cols_, rows_);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t k = 0; k < cols_; ++k) t(k, i) = (*this)(i, k);
        return t;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

inline double max_asymmetry(const Mat3& s) { return (s - s.transpose()).cwiseAbs().maxCoeff(); }

inline void require_symmetric(const Mat3& s) {
    const double scale = std::max(1.0, s.cwiseAbs().maxCoeff());
    if (!(max_asymmetry(s) <= 1e-9 * scale)) {
        throw Error(ErrorCode::NotSymmetric, "matrix is not symmetric within 1e-9");
    }
}

/// Invariants of S = M^{1/2} for symmetric PSD M: trace a, second
/// elementary symmetric function b, determinant c.
struct SqrtInvariants {
    double a = 0.0;
    double b = 0.0;
    double c = 0.0;
};

/// From tr(S^2) = I1 and sigma2(S^2) = I2: with b = (a^2 - I1) / 2, the
/// trace a is the largest root of F(a) = b^2 - 2 c a - I2. F is convex and
/// increasing right of that root and a <= sqrt(3 I1), so Newton from the
/// upper bound descends monotonically onto it.
inline SqrtInvariants sqrt_invariants(const Mat3& m) {
    const double i1 = m(0, 0) + m(1, 1) + m(2, 2);
    if (!(i1 > 0.0)) return {};
    const double i2 = m(0, 0) * m(1, 1) + m(0, 0) * m(2, 2) + m(1, 1) * m(2, 2) - m(0, 1) * m(0, 1) -
                      m(0, 2) * m(0, 2) - m(1, 2) * m(1, 2);
    const double c = std::sqrt(std::max(0.0, m.determinant()));
    double a = std::sqrt(3.0 * i1);
    for (int it = 0; it < 100; ++it) {
        const double h = 0.5 * (a * a - i1);
        const double f = h * h - 2.0 * c * a - std::max(0.0, i2);
        const double fp = 2.0 * (h * a - c);
        if (!(f > 0.0) || !(fp > 0.0)) break;
        const double next = a - f / fp;
        if (!(next < a)) break;
        a = next;
    }
    return {a, 0.5 * (a * a - i1), c};
}

/// Tr(M^{1/2}) for symmetric PSD M.
inline double trace_sqrt_psd(const Mat3& m) { return sqrt_invariants(m).a; }

/// P S P for symmetric P and S, exactly symmetric.
inline Mat3 congruence(const Mat3& p, const Mat3& s) {
    const Mat3 m = p * s * p;
    return 0.5 * (m + m.transpose());
}

/// Bures cross term Tr((A^{1/2} B A^{1/2})^{1/2}) given A^{1/2}.
inline double bures_cross_term(const Mat3& sqrt_a, const Mat3& b) {
    return trace_sqrt_psd(congruence(sqrt_a, b));
}

}  // namespace detail

/// Symmetric PSD square root through a symmetric eigendecomposition.
inline Mat3 spd_sqrt(const Mat3& s) {
    detail::require_symmetric(s);
    const Mat3 sym = 0.5 * (s + s.transpose());
    const SymmetricEigen3 eig = symmetric_eigen3(sym);
    Vec3 root;
    for (int j = 0; j < 3; ++j) root[j] = std::sqrt(std::max(eig.values[j], 0.0));
    Mat3 x = eig.vectors * root.asDiagonal() * eig.vectors.transpose();
    return 0.5 * (x + x.transpose());
}

/// Squared 2-Wasserstein distance between two Gaussians:
/// |mu_a - mu_b|^2 + Tr(Sa) + Tr(Sb) - 2 Tr((Sa^{1/2} Sb Sa^{1/2})^{1/2}).
/// Covariances are used as given; clamped at zero.
inline double gaussian_w2_sq(const GaussianComponent& a, const GaussianComponent& b) {
    detail::require_symmetric(a.covariance);
    detail::require_symmetric(b.covariance);
    const Mat3 sqrt_a = spd_sqrt(a.covariance);
    const double mean_term = (a.mean - b.mean).squaredNorm();
    const double bures = a.covariance.trace() + b.covariance.trace() -
                         2.0 * detail::bures_cross_term(sqrt_a, b.covariance);
    return std::max(0.0, mean_term + bures);
}

inline GaussianComponent regularized(GaussianComponent g, double eps = kCovarianceRegularization) {
    g.covariance.diagonal().array() += eps;
    return g;
}

/// C[i][k] = W2^2(A_i, B_k) with Sigma + 1e-6 I on both sides. Rows are
/// independent, so the loop is split across threads.
inline CostMatrix build_cost_matrix(const GaussianMixture& a, const GaussianMixture& b) {
    if (a.empty() || b.empty()) {
        throw Error(ErrorCode::EmptyMixture, "cost matrix needs non-empty mixtures");
    }
    const std::size_t m = a.size();
    const std::size_t n = b.size();

    std::vector<Mat3> sqrt_a(m);
    std::vector<double> trace_a(m);
    for (std::size_t i = 0; i < m; ++i) {
        const Mat3 cov = regularized(a.components[i]).covariance;
        sqrt_a[i] = spd_sqrt(cov);
        trace_a[i] = cov.trace();
    }
    std::vector<Mat3> cov_b(n);
    std::vector<double> trace_b(n);
    for (std::size_t k = 0; k < n; ++k) {
        cov_b[k] = regularized(b.components[k]).covariance;
        detail::require_symmetric(cov_b[k]);
        trace_b[k] = cov_b[k].trace();
    }

    CostMatrix c(m, n);
    const auto rows = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        const Vec3& mu_a = a.components[i].mean;
        for (std::size_t k = 0; k < n; ++k) {
            const double mean_term = (mu_a - b.components[k].mean).squaredNorm();
            const double bures =
                trace_a[i] + trace_b[k] - 2.0 * detail::bures_cross_term(sqrt_a[i], cov_b[k]);
            c(i, k) = std::max(0.0, mean_term + bures);
        }
    }
    return c;
}

}  // namespace splatreg
