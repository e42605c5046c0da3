#pragma once

// Sim(3) estimation by minimizing the entropic mixture-Wasserstein cost,
// optionally joined with photometric and depth rendering losses.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splatreg/bures.hpp"
#include "splatreg/core.hpp"
#include "splatreg/eigen3x3.hpp"
#include "splatreg/render.hpp"
#include "splatreg/sinkhorn.hpp"

namespace splatreg {

using ParamVector = std::array<double, 8>;

struct JointLossWeights {
    double mw2 = 1.0;
    double photo = 1.0;
    double depth = 0.5;

    bool uses_rendering() const { return photo > 0.0 || depth > 0.0; }

    void validate() const {
        if (mw2 < 0.0 || photo < 0.0 || depth < 0.0) {
            throw Error(ErrorCode::InvalidArgument, "loss weights must be non-negative");
        }
        if (!(mw2 > 0.0 || photo > 0.0 || depth > 0.0)) {
            throw Error(ErrorCode::InvalidArgument, "at least one loss weight must be positive");
        }
    }
};

enum class GradientMode { analytic, finite_difference };

/// heavy_ball: v = momentum v - lr g. adam: first moment with decay
/// `momentum`, second moment with decay `second_moment_decay`, bias corrected.
enum class UpdateRule { heavy_ball, adam };

struct OptimizerConfig {
    double lr_q = 0.01;
    double lr_t = 0.01;
    double lr_log_s = 0.005;
    double momentum = 0.9;
    UpdateRule update = UpdateRule::heavy_ball;
    double second_moment_decay = 0.999;
    int max_steps = 150;  // per epsilon stage
    /// Relative to the mean cost at the start of each stage; strictly decreasing.
    std::vector<double> epsilon_ladder{0.5, 0.05, 0.005};
    GradientMode mw2_gradient = GradientMode::analytic;
    /// Central-difference step for the rendering terms (normalized scene units).
    double render_fd_step = 1e-3;
    double plateau_tolerance = 1e-6;
    int plateau_window = 20;
    /// Steps without improving the best loss before restarting from the best
    /// point at half the learning rates; 0 disables. A stage ends once the
    /// rates were halved `max_step_halvings` times.
    int patience = 6;
    int max_step_halvings = 5;
    double divergence_factor = 1e3;
    /// Closed-form plan-Procrustes updates run at the start of every stage
    /// with an MW2 term, before the gradient steps; 0 disables.
    int procrustes_iterations = 30;
    /// Warm-started Sinkhorn sweeps per Procrustes update.
    int procrustes_sinkhorn_iterations = 50;
    /// Stops the updates once rotation (rad) + translation + |d log s| move less than this.
    double procrustes_tolerance = 1e-7;
    /// Procrustes updates re-estimate the scale only in stages with a relative
    /// epsilon below this; blurrier plans contract the fitted scale.
    double procrustes_scale_below = 0.01;
    std::uint64_t seed = 0;
    /// Solver for the optimizer's warm-started MW2 evaluations; epsilon is set per stage.
    SinkhornConfig sinkhorn{0.05, 200, 1e-6, EpsilonScale::absolute, 1.5};

    void validate() const {
        if (epsilon_ladder.empty()) throw Error(ErrorCode::InvalidArgument, "epsilon ladder is empty");
        for (std::size_t i = 0; i < epsilon_ladder.size(); ++i) {
            if (!(epsilon_ladder[i] > 0.0)) {
                throw Error(ErrorCode::InvalidArgument, "epsilon ladder entries must be positive");
            }
            if (i > 0 && !(epsilon_ladder[i] < epsilon_ladder[i - 1])) {
                throw Error(ErrorCode::InvalidArgument, "epsilon ladder must be strictly decreasing");
            }
        }
        if (max_steps < 0 || plateau_window < 1 || procrustes_iterations < 0 || procrustes_sinkhorn_iterations < 1) {
            throw Error(ErrorCode::InvalidArgument, "invalid step limits");
        }
        if (lr_q < 0.0 || lr_t < 0.0 || lr_log_s < 0.0 || momentum < 0.0 || momentum >= 1.0 ||
            second_moment_decay < 0.0 || second_moment_decay >= 1.0) {
            throw Error(ErrorCode::InvalidArgument, "invalid learning rates or momentum");
        }
    }
};

struct LossBreakdown {
    double mw2 = 0.0;
    double photo = 0.0;
    double depth = 0.0;
    double total = 0.0;
    bool depth_empty = false;
};

struct LossRecord {
    int step = 0;
    double mw2 = 0.0;
    double photo = 0.0;
    double depth = 0.0;
    double total = 0.0;
};

struct StageSummary {
    double epsilon_relative = 0.0;
    double epsilon_absolute = 0.0;  // in the optimizer's normalized frame
    double best_loss_start = 0.0;
    double best_loss_end = 0.0;
    int procrustes_updates = 0;
    int steps = 0;
    bool plateaued = false;
};

struct RegistrationResult {
    Sim3Params theta;
    LossBreakdown final_losses;
    std::vector<double> mw2_history;
    std::vector<LossRecord> history;
    std::vector<StageSummary> stages;
    bool converged = false;
    int steps_used = 0;
};

// ---------------------------------------------------------------------------
// MW2 term and its envelope gradient

struct Mw2Gradient {
    double loss = 0.0;                 // transport cost sum pi C
    double regularized_objective = 0.0;
    ParamVector gradient{};            // quaternion block tangent to the unit sphere
    TransportPlan plan;
};

namespace detail {

inline void project_quaternion_gradient(ParamVector& g, const Quaternion& q) {
    const double d = g[0] * q.w + g[1] * q.x + g[2] * q.y + g[3] * q.z;
    g[0] -= d * q.w;
    g[1] -= d * q.x;
    g[2] -= d * q.y;
    g[3] -= d * q.z;
}

/// dC/dSigma_b = I - Sa^{1/2} (Sa^{1/2} Sb Sa^{1/2})^{-1/2} Sa^{1/2} (regularized inputs).
inline Mat3 bures_gradient_wrt_b(const Mat3& sqrt_a, const Mat3& cov_b) {
    const Mat3 m = congruence(sqrt_a, cov_b);
    // S = M^{1/2} satisfies S (M + b I) = a M + c I (Cayley-Hamilton), so
    // M^{-1/2} = (M + b I)(a M + c I)^{-1}; the factors commute.
    const SqrtInvariants inv = sqrt_invariants(m);
    const Mat3 denom = inv.a * m + std::max(inv.c, 1e-300) * Mat3::Identity();
    const Mat3 m_inv_sqrt = (m + inv.b * Mat3::Identity()) * denom.inverse();
    return Mat3::Identity() - congruence(sqrt_a, 0.5 * (m_inv_sqrt + m_inv_sqrt.transpose()));
}

}  // namespace detail

/// Envelope gradient of the entropic transport between `a` and theta(b):
/// the plan is held fixed, and dC/dmu', dC/dSigma' are chained through the
/// similarity transform analytically.
inline Mw2Gradient mw2_loss_and_gradient(const GaussianMixture& a, const GaussianMixture& b,
                                         const Sim3Params& theta, const SinkhornConfig& cfg,
                                         const SinkhornPotentials* warm_start = nullptr) {
    if (!weights_normalized(a) || !weights_normalized(b)) {
        throw Error(ErrorCode::InvalidArgument, "mixtures must have normalized weights");
    }
    const GaussianMixture moved = sim3_apply(theta, b);
    const CostMatrix c = build_cost_matrix(a, moved);
    const auto wa = a.weights();
    const auto wb = b.weights();

    Mw2Gradient out;
    out.plan = sinkhorn_log(c, wa, wb, cfg, warm_start);
    out.loss = out.plan.cost;
    out.regularized_objective = out.plan.regularized_objective;

    const std::size_t m = a.size();
    const std::size_t n = b.size();
    std::vector<Mat3> sqrt_a(m);
    for (std::size_t i = 0; i < m; ++i) sqrt_a[i] = spd_sqrt(regularized(a.components[i]).covariance);

    const Mat3 r = theta.rotation();
    const double s = theta.scale();

    Vec3 grad_t = Vec3::Zero();
    double grad_log_s = 0.0;
    Mat3 mean_moment = Mat3::Zero();  // sum_k g_mu_k mu_k^T (source-frame means)
    Mat3 cov_moment = Mat3::Zero();   // sum_k G_k R Sigma_k

    std::vector<Vec3> g_mu(n);
    std::vector<Mat3> g_cov(n);
    const auto cols = static_cast<std::ptrdiff_t>(n);
#pragma omp parallel for schedule(dynamic, 8)
    for (std::ptrdiff_t kk = 0; kk < cols; ++kk) {
        const auto k = static_cast<std::size_t>(kk);
        const Mat3 cov_moved_reg = regularized(moved.components[k]).covariance;
        double mass = 0.0;
        Vec3 target = Vec3::Zero();
        Mat3 transport = Mat3::Zero();
        const double cutoff = 1e-14 * wb[k];
        for (std::size_t i = 0; i < m; ++i) {
            const double p = out.plan(i, k);
            if (p <= cutoff) continue;
            mass += p;
            target += p * a.components[i].mean;
            transport += p * detail::bures_gradient_wrt_b(sqrt_a[i], cov_moved_reg);
        }
        g_mu[k] = 2.0 * (mass * moved.components[k].mean - target);
        g_cov[k] = transport;
    }
    for (std::size_t k = 0; k < n; ++k) {
        grad_t += g_mu[k];
        grad_log_s += g_mu[k].dot(moved.components[k].mean - theta.t) +
                      2.0 * (g_cov[k] * moved.components[k].covariance).trace();
        mean_moment += g_mu[k] * b.components[k].mean.transpose();
        cov_moment += g_cov[k] * r * b.components[k].covariance;
    }

    const auto dr = quat_rotation_jacobian(theta.q);
    const Mat3 combined = s * mean_moment + 2.0 * s * s * cov_moment;
    for (int j = 0; j < 4; ++j) out.gradient[j] = (dr[j].array() * combined.array()).sum();
    out.gradient[4] = grad_t.x();
    out.gradient[5] = grad_t.y();
    out.gradient[6] = grad_t.z();
    out.gradient[7] = grad_log_s;
    detail::project_quaternion_gradient(out.gradient, theta.q);
    return out;
}

/// Parameter vector with unit quaternion after a raw (possibly off-sphere) step.
inline Sim3Params params_from_vector(const ParamVector& v) {
    Sim3Params p = Sim3Params::from_array(v);
    p.q = p.q.normalized();
    return p;
}

// ---------------------------------------------------------------------------
// Joint loss

namespace detail {

struct RenderTerms {
    double photo = 0.0;
    double depth = 0.0;
    bool depth_empty = false;
};

inline RenderTerms render_terms(const std::vector<RenderOutput>& reference, const GaussianMixture& moved,
                                std::span<const Camera> cameras, const RenderOptions& ro) {
    RenderTerms out;
    std::size_t depth_views = 0;
    for (std::size_t v = 0; v < cameras.size(); ++v) {
        const RenderOutput r = render(moved, cameras[v], ro);
        out.photo += photometric_loss(reference[v], r);
        const DepthLoss d = depth_loss(reference[v], r);
        if (!d.empty_intersection) {
            out.depth += d.value;
            ++depth_views;
        }
    }
    out.photo /= static_cast<double>(cameras.size());
    if (depth_views > 0) {
        out.depth /= static_cast<double>(depth_views);
    } else {
        out.depth_empty = true;
    }
    return out;
}

}  // namespace detail

/// lambda_mw2 * MW2^2 + lambda_photo * L1(rgb) + lambda_depth * masked L1(depth),
/// rendering terms averaged over `cameras` (expressed in a's frame).
inline LossBreakdown joint_loss(const GaussianMixture& a, const GaussianMixture& b, const Sim3Params& theta,
                                std::span<const Camera> cameras, const JointLossWeights& weights,
                                const SinkhornConfig& cfg, const RenderOptions& ro = {}) {
    weights.validate();
    if (weights.uses_rendering() && cameras.empty()) {
        throw Error(ErrorCode::MissingCameras, "rendering losses requested without cameras");
    }
    LossBreakdown out;
    const GaussianMixture moved = sim3_apply(theta, b);
    out.mw2 = mw2_distance(a, moved, cfg).mw2_sq;
    if (weights.uses_rendering()) {
        std::vector<RenderOutput> reference;
        for (const auto& cam : cameras) reference.push_back(render(a, cam, ro));
        const auto terms = detail::render_terms(reference, moved, cameras, ro);
        out.photo = terms.photo;
        out.depth = terms.depth;
        out.depth_empty = terms.depth_empty;
    }
    out.total = weights.mw2 * out.mw2 + weights.photo * out.photo + weights.depth * out.depth;
    return out;
}

/// s_init = mean valid depth of `a` over mean valid depth of `b`, both
/// rendered from `camera`.
inline double estimate_initial_scale(const GaussianMixture& a, const GaussianMixture& b, const Camera& camera,
                                     const RenderOptions& ro = {}) {
    const auto da = mean_valid_depth(render(a, camera, ro));
    const auto db = mean_valid_depth(render(b, camera, ro));
    if (!da || !db) {
        throw Error(ErrorCode::EmptyMask, "valid depth mask covers less than 1% of the image");
    }
    const double s = *da / *db;
    if (!(s > 0.0) || !std::isfinite(s)) {
        throw Error(ErrorCode::EmptyMask, "degenerate depth ratio");
    }
    return s;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Similarity that centers a mixture's weighted means and scales their RMS
/// radius to one.
inline Sim3Params moment_normalization(const GaussianMixture& m) {
    Vec3 c = Vec3::Zero();
    double wsum = 0.0;
    for (const auto& g : m.components) {
        c += g.weight * g.mean;
        wsum += g.weight;
    }
    c /= wsum;
    double var = 0.0;
    for (const auto& g : m.components) var += g.weight * (g.mean - c).squaredNorm();
    var /= wsum;
    const double radius = var > 0.0 ? std::sqrt(var) : 1.0;
    Sim3Params n;
    n.log_s = -std::log(radius);
    n.t = -c / radius;
    return n;
}

/// Similarity minimizing sum_ik pi_ik |mu_a_i - (s R mu_b_k + t)|^2 for a
/// fixed plan (weighted Umeyama). The covariance part of the cost is held
/// out. With `estimate_scale` false the scale of `current` is kept.
inline Sim3Params plan_procrustes(const GaussianMixture& a, const GaussianMixture& b, const TransportPlan& plan,
                                  const Sim3Params& current, bool estimate_scale) {
    const auto m = static_cast<Eigen::Index>(a.size());
    const auto n = static_cast<Eigen::Index>(b.size());
    if (plan.rows != a.size() || plan.cols != b.size()) {
        throw Error(ErrorCode::DimensionMismatch, "plan does not match the mixtures");
    }
    Eigen::MatrixX3d ya(m, 3), xb(n, 3);
    for (Eigen::Index i = 0; i < m; ++i) ya.row(i) = a.components[static_cast<std::size_t>(i)].mean.transpose();
    for (Eigen::Index k = 0; k < n; ++k) xb.row(k) = b.components[static_cast<std::size_t>(k)].mean.transpose();
    // Owned copy: vectorized reductions over a Map peel by the buffer's address
    // alignment, which made results differ in the last bits between calls.
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pi =
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            plan.coupling.data(), m, n);
    const Eigen::VectorXd row = pi.rowwise().sum();
    const Eigen::VectorXd col = pi.colwise().sum().transpose();
    const double mass = row.sum();
    if (!(mass > 0.0)) throw Error(ErrorCode::InvalidArgument, "plan has no mass");
    const Vec3 my = ya.transpose() * row / mass;
    const Vec3 mx = xb.transpose() * col / mass;
    const Mat3 cross = ya.transpose() * (pi * xb) / mass - my * mx.transpose();
    const double var_x = (xb.rowwise() - mx.transpose()).rowwise().squaredNorm().dot(col) / mass;

    const Eigen::JacobiSVD<Mat3> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Vec3 d = Vec3::Ones();
    if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) d.z() = -1.0;
    const Mat3 r = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
    double s = current.scale();
    if (estimate_scale && var_x > 0.0) {
        const double fit = svd.singularValues().dot(d) / var_x;
        if (fit > 0.0) s = fit;
    }
    Sim3Params out;
    out.q = rotation_to_quat(r);
    out.log_s = std::log(s);
    out.t = my - s * (r * mx);
    return out;
}

namespace detail {

/// Evaluates the optimizer objective in the normalized frame and reports
/// every term in the caller's units.
class JointObjective {
public:
    JointObjective(const GaussianMixture& a_normalized, const GaussianMixture& b, std::span<const Camera> cameras,
                   const JointLossWeights& weights, const OptimizerConfig& opt, double frame_scale,
                   const RenderOptions& ro)
        : a_(a_normalized), b_(b), cameras_(cameras.begin(), cameras.end()), weights_(weights), opt_(opt),
          frame_scale_(frame_scale), ro_(ro) {
        if (weights_.uses_rendering()) {
            for (const auto& cam : cameras_) reference_.push_back(render(a_, cam, ro_));
        }
    }

    struct Evaluation {
        double objective = 0.0;  // normalized-frame objective being minimized
        LossBreakdown losses;    // caller units
        ParamVector gradient{};
    };

    void set_sinkhorn(const SinkhornConfig& cfg) {
        sinkhorn_ = cfg;  // potentials carry over as the warm start for the new epsilon
    }

    double mean_cost(const Sim3Params& theta) const {
        return build_cost_matrix(a_, sim3_apply(theta, b_)).mean();
    }

    Evaluation evaluate(const Sim3Params& theta, bool with_gradient) {
        Evaluation e;
        if (weights_.mw2 > 0.0) {
            if (with_gradient && opt_.mw2_gradient == GradientMode::analytic) {
                const auto g = mw2_loss_and_gradient(a_, b_, theta, sinkhorn_, warm());
                keep(g.plan);
                e.losses.mw2 = g.loss;
                for (int j = 0; j < 8; ++j) e.gradient[j] += weights_.mw2 * g.gradient[j];
            } else {
                e.losses.mw2 = mw2_value(theta);
                if (with_gradient) {
                    const auto fd = central_difference(theta, 1e-6, [&](const Sim3Params& p) { return mw2_value(p); });
                    for (int j = 0; j < 8; ++j) e.gradient[j] += weights_.mw2 * fd[j];
                }
            }
        }
        if (weights_.uses_rendering()) {
            const auto terms = render_value(theta);
            e.losses.photo = terms.photo;
            e.losses.depth = terms.depth;
            e.losses.depth_empty = terms.depth_empty;
            if (with_gradient) {
                const auto fd = central_difference(theta, opt_.render_fd_step, [&](const Sim3Params& p) {
                    const auto t = render_value(p);
                    return weights_.photo * t.photo + weights_.depth * t.depth;
                });
                for (int j = 0; j < 8; ++j) e.gradient[j] += fd[j];
            }
        }
        e.objective = weights_.mw2 * e.losses.mw2 + weights_.photo * e.losses.photo + weights_.depth * e.losses.depth;
        // Back to caller units: costs scale with length^2, depths with length.
        e.losses.mw2 *= frame_scale_ * frame_scale_;
        e.losses.depth *= frame_scale_;
        e.losses.total = weights_.mw2 * e.losses.mw2 + weights_.photo * e.losses.photo +
                         weights_.depth * e.losses.depth;
        return e;
    }

    /// One plan-Procrustes update from a warm-started, capped Sinkhorn solve.
    Sim3Params procrustes_step(const Sim3Params& theta, bool estimate_scale, int sweeps) {
        const CostMatrix c = build_cost_matrix(a_, sim3_apply(theta, b_));
        SinkhornConfig sc = sinkhorn_;
        sc.max_iterations = sweeps;
        const auto plan = sinkhorn_log(c, a_.weights(), b_.weights(), sc, warm());
        keep(plan);
        return plan_procrustes(a_, b_, plan, theta, estimate_scale);
    }

private:
    const SinkhornPotentials* warm() const { return potentials_ ? &*potentials_ : nullptr; }
    void keep(const TransportPlan& plan) { potentials_ = plan.potentials; }

    double mw2_value(const Sim3Params& theta) {
        const CostMatrix c = build_cost_matrix(a_, sim3_apply(theta, b_));
        const auto plan = sinkhorn_log(c, a_.weights(), b_.weights(), sinkhorn_, warm());
        return plan.cost;
    }

    RenderTerms render_value(const Sim3Params& theta) const {
        return render_terms(reference_, sim3_apply(theta, b_), cameras_, ro_);
    }

    template <class F>
    ParamVector central_difference(const Sim3Params& theta, double h, F&& f) const {
        ParamVector g{};
        const ParamVector base = theta.to_array();
        for (int j = 0; j < 8; ++j) {
            ParamVector plus = base, minus = base;
            plus[j] += h;
            minus[j] -= h;
            g[j] = (f(params_from_vector(plus)) - f(params_from_vector(minus))) / (2.0 * h);
        }
        project_quaternion_gradient(g, theta.q);
        return g;
    }

    const GaussianMixture& a_;
    const GaussianMixture& b_;
    std::vector<Camera> cameras_;
    JointLossWeights weights_;
    OptimizerConfig opt_;
    double frame_scale_;
    RenderOptions ro_;
    std::vector<RenderOutput> reference_;
    SinkhornConfig sinkhorn_;
    std::optional<SinkhornPotentials> potentials_;
};

inline bool all_finite(const ParamVector& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace detail

/// First-order descent over [q; t; log s] with per-block learning rates, run
/// once per entry of the epsilon ladder. Each stage with an MW2 term opens
/// with plan-Procrustes updates (see plan_procrustes), then takes gradient
/// steps on the full objective. The quaternion is
/// re-normalized after every step. Both mixtures are moved to frames with
/// zero mean and unit RMS radius before optimizing; the returned theta maps
/// `b` into `a`'s original frame. Cameras are given in `a`'s frame.
inline RegistrationResult optimize_sim3(const GaussianMixture& a, const GaussianMixture& b, const Sim3Params& init,
                                        std::span<const Camera> cameras, const JointLossWeights& weights,
                                        const OptimizerConfig& opt, const RenderOptions& ro = {}) {
    opt.validate();
    weights.validate();
    if (a.empty() || b.empty()) throw Error(ErrorCode::EmptyMixture, "registration needs non-empty mixtures");
    if (!a.is_finite() || !b.is_finite()) {
        throw Error(ErrorCode::InvalidArgument, "mixture contains non-finite values");
    }
    if (weights.uses_rendering() && cameras.empty()) {
        throw Error(ErrorCode::MissingCameras, "rendering losses requested without cameras");
    }
    if (std::abs(init.q.norm() - 1.0) > 1e-9) {
        throw Error(ErrorCode::InvalidArgument, "initial quaternion must be normalized");
    }

    const Sim3Params frame = moment_normalization(a);
    const Sim3Params frame_b = moment_normalization(b);
    const double frame_scale = std::exp(-frame.log_s);
    const GaussianMixture a_norm = sim3_apply(frame, a);
    const GaussianMixture b_norm = sim3_apply(frame_b, b);
    std::vector<Camera> cams_norm;
    for (const auto& cam : cameras) cams_norm.push_back(transform_camera(frame, cam));

    detail::JointObjective objective(a_norm, b_norm, cams_norm, weights, opt, frame_scale, ro);

    RegistrationResult result;
    Sim3Params current = sim3_compose(sim3_compose(frame, init), sim3_invert(frame_b));
    current.q = current.q.normalized();
    const std::array<double, 8> lr{opt.lr_q, opt.lr_q, opt.lr_q, opt.lr_q,
                                   opt.lr_t, opt.lr_t, opt.lr_t, opt.lr_log_s};

    double initial_objective = std::numeric_limits<double>::quiet_NaN();
    Sim3Params best = current;
    LossBreakdown best_losses;
    int step_counter = 0;
    bool last_plateau = false;

    auto record = [&](const detail::JointObjective::Evaluation& e) {
        result.mw2_history.push_back(e.losses.mw2);
        result.history.push_back({step_counter, e.losses.mw2, e.losses.photo, e.losses.depth, e.losses.total});
    };

    for (double eps_rel : opt.epsilon_ladder) {
        SinkhornConfig sc = opt.sinkhorn;
        sc.epsilon_scale = EpsilonScale::absolute;
        const double mean_cost = objective.mean_cost(current);
        sc.epsilon = eps_rel * (mean_cost > 0.0 ? mean_cost : 1.0);
        objective.set_sinkhorn(sc);

        StageSummary stage;
        stage.epsilon_relative = eps_rel;
        stage.epsilon_absolute = sc.epsilon;

        if (weights.mw2 > 0.0) {
            const bool fit_scale = eps_rel < opt.procrustes_scale_below;
            for (int it = 0; it < opt.procrustes_iterations; ++it) {
                const Sim3Params next = objective.procrustes_step(current, fit_scale, opt.procrustes_sinkhorn_iterations);
                const double moved = rotation_angle_between(next.rotation(), current.rotation()) +
                                     (next.t - current.t).norm() + std::abs(next.log_s - current.log_s);
                current = next;
                ++stage.procrustes_updates;
                if (moved <= opt.procrustes_tolerance) break;
            }
        }

        auto eval = objective.evaluate(current, true);
        if (std::isnan(initial_objective)) initial_objective = eval.objective;
        record(eval);
        double best_obj = eval.objective;
        best = current;
        best_losses = eval.losses;
        stage.best_loss_start = best_obj;

        std::vector<double> best_trace{best_obj};
        auto best_eval = eval;
        ParamVector velocity{}, second{};
        int t = 0, stalled = 0, halvings = 0;
        double lr_scale = 1.0;
        last_plateau = false;
        for (int step = 0; step < opt.max_steps; ++step) {
            ParamVector p = current.to_array();
            ++t;
            for (int j = 0; j < 8; ++j) {
                const double g = eval.gradient[j];
                const double rate = lr_scale * lr[j];
                if (opt.update == UpdateRule::heavy_ball) {
                    velocity[j] = opt.momentum * velocity[j] - rate * g;
                    p[j] += velocity[j];
                } else {
                    velocity[j] = opt.momentum * velocity[j] + (1.0 - opt.momentum) * g;
                    second[j] = opt.second_moment_decay * second[j] + (1.0 - opt.second_moment_decay) * g * g;
                    const double m_hat = velocity[j] / (1.0 - std::pow(opt.momentum, t));
                    const double v_hat = second[j] / (1.0 - std::pow(opt.second_moment_decay, t));
                    p[j] -= rate * m_hat / (std::sqrt(v_hat) + 1e-300);
                }
            }
            if (!detail::all_finite(p)) {
                throw Error(ErrorCode::Diverged, "parameters became non-finite");
            }
            current = params_from_vector(p);
            ++step_counter;
            ++stage.steps;
            eval = objective.evaluate(current, true);
            record(eval);
            if (!std::isfinite(eval.objective) ||
                eval.objective > opt.divergence_factor * std::max(initial_objective, 1e-300)) {
                throw Error(ErrorCode::Diverged, "loss exceeded the divergence threshold");
            }
            if (eval.objective < best_obj) {
                stalled = eval.objective < best_obj - opt.plateau_tolerance * std::abs(best_obj) ? 0 : stalled + 1;
                best_obj = eval.objective;
                best = current;
                best_losses = eval.losses;
                best_eval = eval;
            } else {
                ++stalled;
            }
            best_trace.push_back(best_obj);
            const int w = opt.plateau_window;
            if (static_cast<int>(best_trace.size()) > w) {
                const double before = best_trace[best_trace.size() - 1 - static_cast<std::size_t>(w)];
                if (before - best_obj <= opt.plateau_tolerance * std::abs(best_obj)) {
                    last_plateau = true;
                    break;
                }
            }
            if (opt.patience > 0 && stalled >= opt.patience) {
                // Restart from the best point with smaller steps.
                if (++halvings > opt.max_step_halvings) {
                    last_plateau = true;
                    break;
                }
                lr_scale *= 0.5;
                current = best;
                eval = best_eval;
                velocity = {};
                second = {};
                t = 0;
                stalled = 0;
            }
        }
        stage.best_loss_end = best_obj;
        stage.plateaued = last_plateau;
        result.stages.push_back(stage);
        current = best;
    }

    result.theta = sim3_compose(sim3_compose(sim3_invert(frame), best), frame_b);
    result.theta.q = result.theta.q.normalized();
    result.final_losses = best_losses;
    result.converged = last_plateau;
    result.steps_used = step_counter;
    return result;
}

}  // namespace splatreg
