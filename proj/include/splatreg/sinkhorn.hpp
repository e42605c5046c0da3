#pragma once

// Entropy-regularized optimal transport between weighted point sets, solved
// with log-domain Sinkhorn iterations, and the mixture distance built on it.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "splatreg/bures.hpp"
#include "splatreg/core.hpp"

namespace splatreg {

enum class EpsilonScale { absolute, relative_to_mean_cost };

struct SinkhornConfig {
    double epsilon = 0.05;
    int max_iterations = 500;
    /// Stop once the max-abs change of log u and log v in one sweep is below this.
    /// Non-positive values run exactly max_iterations sweeps.
    double convergence_delta = 1e-9;
    EpsilonScale epsilon_scale = EpsilonScale::relative_to_mean_cost;
    /// Over-relaxation weight w in [1, 2): f <- (1 - w) f + w f_update.
    /// 1 is the plain alternating update.
    double relaxation = 1.0;

    void validate() const {
        if (!(epsilon > 0.0)) throw Error(ErrorCode::InvalidArgument, "epsilon must be positive");
        if (max_iterations < 1) throw Error(ErrorCode::InvalidArgument, "max_iterations must be >= 1");
        if (!(relaxation >= 1.0 && relaxation < 2.0)) {
            throw Error(ErrorCode::InvalidArgument, "relaxation must lie in [1, 2)");
        }
    }
};

/// Dual potentials f, g (cost units); log u = f / eps, log v = g / eps.
struct SinkhornPotentials {
    std::vector<double> f;
    std::vector<double> g;
};

inline constexpr double kMarginalTolerance = 1e-6;

struct TransportPlan {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> coupling;  // row-major
    /// sum_ik pi_ik C_ik, the reported transport cost.
    double cost = 0.0;
    /// cost + eps * sum_ik pi_ik log pi_ik, the value the iterations minimize.
    double regularized_objective = 0.0;
    double epsilon = 0.0;  // absolute value actually used
    int iterations_used = 0;
    double marginal_error = 0.0;
    bool converged = false;
    SinkhornPotentials potentials;

    double operator()(std::size_t i, std::size_t k) const { return coupling[i * cols + k]; }
};

inline double resolve_epsilon(const SinkhornConfig& cfg, const CostMatrix& c) {
    if (cfg.epsilon_scale == EpsilonScale::absolute) return cfg.epsilon;
    const double mean = c.mean();
    return mean > 0.0 ? cfg.epsilon * mean : cfg.epsilon;
}

namespace detail {

inline void require_marginal(std::span<const double> w, std::size_t n, const char* name) {
    if (w.size() != n) {
        throw Error(ErrorCode::DimensionMismatch,
                    std::string(name) + " length does not match the cost matrix");
    }
    double s = 0.0;
    for (double x : w) {
        if (!(x > 0.0) || !std::isfinite(x)) {
            throw Error(ErrorCode::InvalidArgument, std::string(name) + " must be strictly positive");
        }
        s += x;
    }
    if (std::abs(s - 1.0) > 1e-9) {
        throw Error(ErrorCode::InvalidArgument, std::string(name) + " must sum to 1");
    }
}

/// out[i] = eps * log w[i] - eps * LSE_k((other[k] - C[i][k]) / eps) for each row of C.
inline double soft_min_update(const std::vector<double>& c, std::size_t rows, std::size_t cols,
                              const std::vector<double>& other, const std::vector<double>& log_w,
                              double eps, std::vector<double>& out, double relaxation = 1.0) {
    const double inv_eps = 1.0 / eps;
    double max_change = 0.0;
    const auto n_rows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel
    {
        Eigen::ArrayXd buf(static_cast<Eigen::Index>(cols));
        const Eigen::Map<const Eigen::ArrayXd> other_row(other.data(), static_cast<Eigen::Index>(cols));
        double local_change = 0.0;
#pragma omp for schedule(static)
        for (std::ptrdiff_t ii = 0; ii < n_rows; ++ii) {
            const auto i = static_cast<std::size_t>(ii);
            const Eigen::Map<const Eigen::ArrayXd> row(c.data() + i * cols, static_cast<Eigen::Index>(cols));
            buf = (other_row - row) * inv_eps;
            const double mx = buf.maxCoeff();
            const double sum = (buf - mx).exp().sum();
            const double target = eps * (log_w[i] - mx - std::log(sum));
            const double updated = relaxation == 1.0 ? target : (1.0 - relaxation) * out[i] + relaxation * target;
            local_change = std::max(local_change, std::abs(updated - out[i]));
            out[i] = updated;
        }
#pragma omp critical
        max_change = std::max(max_change, local_change);
    }
    return max_change * inv_eps;
}

}  // namespace detail

/// Log-domain Sinkhorn. Alternates the row and column soft-min updates of
/// the dual potentials, then forms pi = exp((f_i + g_k - C_ik) / eps).
/// `warm_start` seeds the potentials when its sizes match.
inline TransportPlan sinkhorn_log(const CostMatrix& c, std::span<const double> w_a,
                                  std::span<const double> w_b, const SinkhornConfig& cfg,
                                  const SinkhornPotentials* warm_start = nullptr) {
    cfg.validate();
    const std::size_t m = c.rows();
    const std::size_t n = c.cols();
    if (m == 0 || n == 0) throw Error(ErrorCode::DimensionMismatch, "empty cost matrix");
    detail::require_marginal(w_a, m, "source weights");
    detail::require_marginal(w_b, n, "target weights");

    const double eps = resolve_epsilon(cfg, c);
    const CostMatrix ct = c.transposed();

    std::vector<double> log_wa(m), log_wb(n);
    for (std::size_t i = 0; i < m; ++i) log_wa[i] = std::log(w_a[i]);
    for (std::size_t k = 0; k < n; ++k) log_wb[k] = std::log(w_b[k]);

    std::vector<double> f(m, 0.0), g(n, 0.0);
    if (warm_start && warm_start->f.size() == m && warm_start->g.size() == n) {
        f = warm_start->f;
        g = warm_start->g;
    }

    TransportPlan plan;
    plan.rows = m;
    plan.cols = n;
    plan.epsilon = eps;

    int it = 0;
    while (it < cfg.max_iterations) {
        ++it;
        const double df = detail::soft_min_update(c.data(), m, n, g, log_wa, eps, f, cfg.relaxation);
        const double dg = detail::soft_min_update(ct.data(), n, m, f, log_wb, eps, g, cfg.relaxation);
        if (cfg.convergence_delta > 0.0 && std::max(df, dg) <= cfg.convergence_delta) break;
    }
    plan.iterations_used = it;

    plan.coupling.resize(m * n);
    std::vector<double> col_sum(n, 0.0);
    double cost = 0.0, objective = 0.0, row_err = 0.0;
    const double inv_eps = 1.0 / eps;
    for (std::size_t i = 0; i < m; ++i) {
        double row_sum = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            const double cik = c(i, k);
            const double p = std::exp((f[i] + g[k] - cik) * inv_eps);
            plan.coupling[i * n + k] = p;
            row_sum += p;
            col_sum[k] += p;
            cost += p * cik;
            objective += p * (f[i] + g[k]);
        }
        row_err = std::max(row_err, std::abs(row_sum - w_a[i]));
    }
    double col_err = 0.0;
    for (std::size_t k = 0; k < n; ++k) col_err = std::max(col_err, std::abs(col_sum[k] - w_b[k]));

    plan.cost = cost;
    plan.regularized_objective = objective;
    plan.marginal_error = std::max(row_err, col_err);
    plan.converged = plan.marginal_error <= kMarginalTolerance;
    plan.potentials = {std::move(f), std::move(g)};
    return plan;
}

struct Mw2Result {
    double mw2 = 0.0;     // sqrt of the transport cost
    double mw2_sq = 0.0;  // the transport cost itself
    TransportPlan plan;
};

/// Mixture 2-Wasserstein distance between normalized mixtures.
inline Mw2Result mw2_distance(const GaussianMixture& a, const GaussianMixture& b,
                              const SinkhornConfig& cfg) {
    if (!weights_normalized(a) || !weights_normalized(b)) {
        throw Error(ErrorCode::InvalidArgument, "mixtures must have normalized weights");
    }
    const CostMatrix c = build_cost_matrix(a, b);
    const auto wa = a.weights();
    const auto wb = b.weights();
    Mw2Result r;
    r.plan = sinkhorn_log(c, wa, wb, cfg);
    r.mw2_sq = std::max(0.0, r.plan.cost);
    r.mw2 = std::sqrt(r.mw2_sq);
    return r;
}

/// Text dump of a coupling: a header line `splatreg-plan 1 <rows> <cols>`
/// followed by one whitespace-separated row per line.
inline void write_plan_text(std::ostream& out, const TransportPlan& plan) {
    out << "splatreg-plan 1 " << plan.rows << ' ' << plan.cols << '\n';
    out << std::setprecision(17);
    for (std::size_t i = 0; i < plan.rows; ++i) {
        for (std::size_t k = 0; k < plan.cols; ++k) {
            if (k) out << ' ';
            out << plan(i, k);
        }
        out << '\n';
    }
}

}  // namespace splatreg
