#pragma once

// Incremental multi-submap registration, map merging, pruning, trajectory
// metrics, and the synthetic scene generator used for evaluation.

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "splatreg/registration.hpp"

namespace splatreg {

struct SubmapEntry {
    std::string ply;  // source path, empty for in-memory submaps
    GaussianMixture mixture;
    std::vector<Camera> cameras;              // in the submap's local frame
    std::optional<Sim3Params> ground_truth;   // local -> world
};

struct SceneManifest {
    double scene_extent = 1.0;
    std::vector<SubmapEntry> submaps;

    bool has_ground_truth() const {
        return !submaps.empty() &&
               std::all_of(submaps.begin(), submaps.end(), [](const SubmapEntry& s) { return s.ground_truth.has_value(); });
    }
};

// ---------------------------------------------------------------------------
// Trajectory metrics

struct TrajectoryPose {
    Vec3 position = Vec3::Zero();
    Quaternion orientation;  // camera-to-world
};

struct AteResult {
    double rmse = 0.0;
    Sim3Params alignment;  // maps estimated positions onto ground truth
};

/// RMSE of position residuals after the closed-form similarity alignment of
/// `estimated` onto `ground_truth`.
inline AteResult ate_rmse_aligned(std::span<const Vec3> estimated, std::span<const Vec3> ground_truth) {
    if (estimated.size() != ground_truth.size()) {
        throw Error(ErrorCode::LengthMismatch, "trajectories have different lengths");
    }
    if (estimated.size() < 2) throw Error(ErrorCode::InvalidArgument, "ATE needs at least two poses");
    const auto n = static_cast<Eigen::Index>(estimated.size());
    Eigen::Matrix3Xd src(3, n), dst(3, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        src.col(i) = estimated[static_cast<std::size_t>(i)];
        dst.col(i) = ground_truth[static_cast<std::size_t>(i)];
    }
    AteResult out;
    // Coincident estimates carry no scale information; fall back to translation only.
    const double spread = (src.colwise() - src.rowwise().mean()).squaredNorm();
    Eigen::Matrix4d t = Eigen::Matrix4d::Identity();
    if (spread > 1e-300) {
        t = Eigen::umeyama(src, dst, true);
    } else {
        t.block<3, 1>(0, 3) = dst.rowwise().mean() - src.rowwise().mean();
    }
    const Mat3 sr = t.block<3, 3>(0, 0);
    const double s = std::cbrt(sr.determinant());
    out.alignment.log_s = std::log(s);
    out.alignment.q = rotation_to_quat(sr / s);
    out.alignment.t = t.block<3, 1>(0, 3);
    double sum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const Vec3 p = sr * src.col(i) + t.block<3, 1>(0, 3);
        sum += (p - dst.col(i)).squaredNorm();
    }
    out.rmse = std::sqrt(sum / static_cast<double>(n));
    return out;
}

inline double ate_rmse(std::span<const Vec3> estimated, std::span<const Vec3> ground_truth) {
    return ate_rmse_aligned(estimated, ground_truth).rmse;
}

// ---------------------------------------------------------------------------
// Merge and prune

/// main followed by theta(sub); weights renormalized over the union.
inline GaussianMixture merge_maps(const GaussianMixture& main, const GaussianMixture& sub, const Sim3Params& theta) {
    GaussianMixture out = main;
    const GaussianMixture moved = sim3_apply(theta, sub);
    out.components.insert(out.components.end(), moved.components.begin(), moved.components.end());
    return normalize_weights(std::move(out));
}

inline double median_nearest_neighbor_distance(const GaussianMixture& m) {
    const std::size_t n = m.size();
    if (n < 2) return 0.0;
    std::vector<double> nn(n, std::numeric_limits<double>::infinity());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            if (j == static_cast<std::size_t>(i)) continue;
            best = std::min(best, (m.components[static_cast<std::size_t>(i)].mean - m.components[j].mean).squaredNorm());
        }
        nn[static_cast<std::size_t>(i)] = std::sqrt(best);
    }
    std::nth_element(nn.begin(), nn.begin() + static_cast<std::ptrdiff_t>(n / 2), nn.end());
    return nn[n / 2];
}

struct PruneOptions {
    double opacity_floor = 0.005;
    /// Negative: 0.5 x median nearest-neighbor distance of the input.
    double dedup_radius = -1.0;
    double covariance_tolerance = 0.1;  // relative Frobenius distance
};

/// Drops components below the opacity floor, then collapses near-duplicate
/// pairs (close means and covariances) onto the higher-opacity member.
/// Never returns an empty mixture for a non-empty input.
inline GaussianMixture prune(const GaussianMixture& mixture, const PruneOptions& opts = {}) {
    if (mixture.empty()) return mixture;
    const double radius = opts.dedup_radius >= 0.0 ? opts.dedup_radius : 0.5 * median_nearest_neighbor_distance(mixture);

    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < mixture.size(); ++i)
        if (mixture.components[i].opacity >= opts.opacity_floor) order.push_back(i);
    if (order.empty()) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < mixture.size(); ++i)
            if (mixture.components[i].opacity > mixture.components[best].opacity) best = i;
        order.push_back(best);
    }
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return mixture.components[a].opacity > mixture.components[b].opacity;
    });

    std::vector<std::size_t> kept;
    const double r2 = radius * radius;
    for (std::size_t idx : order) {
        const auto& g = mixture.components[idx];
        bool duplicate = false;
        if (radius > 0.0) {
            for (std::size_t k : kept) {
                const auto& h = mixture.components[k];
                if ((g.mean - h.mean).squaredNorm() > r2) continue;
                const double scale = std::max(g.covariance.norm(), h.covariance.norm());
                if ((g.covariance - h.covariance).norm() <= opts.covariance_tolerance * scale) {
                    duplicate = true;
                    break;
                }
            }
        } else {
            for (std::size_t k : kept) {
                const auto& h = mixture.components[k];
                if (g.mean == h.mean && g.covariance == h.covariance) {
                    duplicate = true;
                    break;
                }
            }
        }
        if (!duplicate) kept.push_back(idx);
    }
    std::sort(kept.begin(), kept.end());
    GaussianMixture out;
    out.components.reserve(kept.size());
    for (std::size_t k : kept) out.components.push_back(mixture.components[k]);
    return normalize_weights(std::move(out));
}

// ---------------------------------------------------------------------------
// Pair registration

struct PairRegistrationConfig {
    JointLossWeights weights{};
    OptimizerConfig optimizer{};
    RenderOptions render{};
    bool scale_prenormalization = true;
    /// Coarse passes, each preceded by mutual bounding-box cropping; 0 disables cropping.
    int overlap_rounds = 3;
    /// Crops that keep fewer components than this are ignored.
    std::size_t min_overlap_components = 10;
    /// Crop boxes grow by this fraction of their largest side on every face.
    double overlap_margin = 0.05;
    /// Take the initial rotation and translation from the main reference
    /// camera and the first sub camera, which must show the same view.
    bool shared_view_init = true;
};

namespace detail {

struct Aabb {
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    Vec3 hi = Vec3::Constant(-std::numeric_limits<double>::infinity());
    void extend(const Vec3& p) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    bool contains(const Vec3& p) const { return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all(); }
    Aabb grown(double fraction) const {
        const Vec3 pad = Vec3::Constant(fraction * (hi - lo).maxCoeff());
        return {lo - pad, hi + pad};
    }
};

inline Aabb bounds(const GaussianMixture& m) {
    Aabb b;
    for (const auto& g : m.components) b.extend(g.mean);
    return b;
}

inline GaussianMixture crop(const GaussianMixture& m, const Aabb& box) {
    GaussianMixture out;
    for (const auto& g : m.components)
        if (box.contains(g.mean)) out.components.push_back(g);
    return out;
}

/// Mean in front of the camera and projecting inside its image.
inline bool in_view(const Camera& cam, const Vec3& p) {
    const Vec3 x = cam.rotation * p + cam.translation;
    if (!(x.z() > kNearPlane)) return false;
    const auto& k = cam.intrinsics;
    const double u = k.fx * x.x() / x.z() + k.cx;
    const double v = k.fy * x.y() / x.z() + k.cy;
    return u >= 0.0 && u < k.width && v >= 0.0 && v < k.height;
}

inline GaussianMixture crop_to_view(const GaussianMixture& m, const Camera& cam) {
    GaussianMixture out;
    for (const auto& g : m.components)
        if (in_view(cam, g.mean)) out.components.push_back(g);
    return out;
}

inline Vec3 weighted_centroid(const GaussianMixture& m) {
    Vec3 c = Vec3::Zero();
    double w = 0.0;
    for (const auto& g : m.components) {
        c += g.weight * g.mean;
        w += g.weight;
    }
    return c / w;
}

inline double rms_radius(const GaussianMixture& m) {
    const Vec3 c = weighted_centroid(m);
    double v = 0.0, w = 0.0;
    for (const auto& g : m.components) {
        v += g.weight * (g.mean - c).squaredNorm();
        w += g.weight;
    }
    return std::sqrt(v / w);
}

inline void append(RegistrationResult& into, const RegistrationResult& part) {
    const int offset = into.steps_used;
    for (auto rec : part.history) {
        rec.step += offset;
        into.history.push_back(rec);
    }
    into.mw2_history.insert(into.mw2_history.end(), part.mw2_history.begin(), part.mw2_history.end());
    into.stages.insert(into.stages.end(), part.stages.begin(), part.stages.end());
    into.steps_used += part.steps_used;
    into.final_losses = part.final_losses;
    into.converged = part.converged;
}

}  // namespace detail

/// Coarse-to-fine registration of `sub` into `main`'s frame.
///
/// Stage 0 rescales `sub` to unit mean rendered depth from its first camera
/// and estimates the initial relative scale from the mean depth `main`
/// renders from `main_reference`, a main-frame camera showing the same view
/// as `sub_cameras.front()`. With `shared_view_init` the initial rotation and
/// translation also come from that camera pair. Without a reference, the
/// scale is the ratio of RMS radii and the weighted centroids are aligned.
/// Both maps are then cropped to the content of the shared view or, without
/// one, to their mutual (padded) bounding boxes. Stage 1 runs the MW2 term
/// alone at the first ladder entry; bounding-box crops are refreshed after
/// each pass. Stage 2 runs the joint loss over the remaining ladder,
/// rendering from the sub cameras carried into main's frame.
inline RegistrationResult register_pair(const GaussianMixture& main, const GaussianMixture& sub,
                                        std::span<const Camera> sub_cameras, const PairRegistrationConfig& cfg,
                                        const Camera* main_reference = nullptr,
                                        std::optional<Sim3Params> init = std::nullopt) {
    if (main.empty() || sub.empty()) throw Error(ErrorCode::EmptyMixture, "register_pair needs non-empty maps");
    if (!main.is_finite() || !sub.is_finite()) throw Error(ErrorCode::InvalidArgument, "map contains non-finite values");
    cfg.optimizer.validate();
    cfg.weights.validate();
    if (cfg.weights.uses_rendering() && cfg.optimizer.epsilon_ladder.size() > 1 && sub_cameras.empty()) {
        throw Error(ErrorCode::MissingCameras, "rendering losses requested without sub cameras");
    }
    const GaussianMixture main_n = normalize_weights(main);

    // Stage 0: scale pre-normalization and initial pose.
    Sim3Params pre;
    if (cfg.scale_prenormalization && !sub_cameras.empty()) {
        if (const auto d = mean_valid_depth(render(sub, sub_cameras.front(), cfg.render))) {
            const Vec3 c = sub_cameras.front().center();
            pre.log_s = -std::log(*d);
            pre.t = c * (1.0 - 1.0 / *d);
        }
    }
    const GaussianMixture sub_n = normalize_weights(sim3_apply(pre, sub));
    std::vector<Camera> cams_n;
    for (const auto& cam : sub_cameras) cams_n.push_back(transform_camera(pre, cam));

    Sim3Params theta;
    bool shared_view = false;
    if (init) {
        theta = sim3_compose(*init, sim3_invert(pre));
    } else {
        double s_init = 0.0;
        if (main_reference && !cams_n.empty()) {
            const auto dm = mean_valid_depth(render(main_n, *main_reference, cfg.render));
            const auto ds = mean_valid_depth(render(sub_n, cams_n.front(), cfg.render));
            if (dm && ds) s_init = *dm / *ds;
        }
        if (s_init > 0.0 && std::isfinite(s_init) && cfg.shared_view_init) {
            // transform_camera(theta, cams_n.front()) == *main_reference
            const Camera& c = cams_n.front();
            const Camera& r = *main_reference;
            theta.q = rotation_to_quat(r.rotation.transpose() * c.rotation);
            theta.log_s = std::log(s_init);
            theta.t = r.rotation.transpose() * (s_init * c.translation - r.translation);
            shared_view = true;
        } else {
            if (!(s_init > 0.0) || !std::isfinite(s_init)) {
                s_init = detail::rms_radius(main_n) / detail::rms_radius(sub_n);
            }
            theta.log_s = std::log(s_init);
            theta.t = detail::weighted_centroid(main_n) - s_init * detail::weighted_centroid(sub_n);
        }
    }

    GaussianMixture main_c = main_n, sub_c = sub_n;
    bool view_cropped = false;
    if (shared_view && cfg.overlap_rounds > 0) {
        // The shared view sees the same part of the scene in both maps.
        GaussianMixture mc = detail::crop_to_view(main_n, *main_reference);
        GaussianMixture sc = detail::crop_to_view(sub_n, cams_n.front());
        if (mc.size() >= cfg.min_overlap_components && sc.size() >= cfg.min_overlap_components) {
            main_c = normalize_weights(std::move(mc));
            sub_c = normalize_weights(std::move(sc));
            view_cropped = true;
        }
    }
    // Returns true when the working pair changed.
    auto crop_to_overlap = [&](const Sim3Params& th) {
        const auto box_main = detail::bounds(main_n).grown(cfg.overlap_margin);
        const auto box_sub = detail::bounds(sim3_apply(th, sub_n)).grown(cfg.overlap_margin);
        GaussianMixture mc = detail::crop(main_n, box_sub);
        GaussianMixture sc;
        for (const auto& g : sub_n.components)
            if (box_main.contains(th.apply(g.mean))) sc.components.push_back(g);
        if (mc.size() < cfg.min_overlap_components || sc.size() < cfg.min_overlap_components) return false;
        if (mc.size() == main_c.size() && sc.size() == sub_c.size()) return false;
        main_c = normalize_weights(std::move(mc));
        sub_c = normalize_weights(std::move(sc));
        return true;
    };

    RegistrationResult total;
    OptimizerConfig coarse = cfg.optimizer;
    coarse.epsilon_ladder = {cfg.optimizer.epsilon_ladder.front()};
    const JointLossWeights mw2_only{1.0, 0.0, 0.0};
    const int passes = view_cropped ? 1 : std::max(1, cfg.overlap_rounds);
    if (cfg.overlap_rounds > 0 && !view_cropped) crop_to_overlap(theta);
    for (int round = 0; round < passes; ++round) {
        if (round > 0 && !crop_to_overlap(theta)) break;
        const auto part = optimize_sim3(main_c, sub_c, theta, {}, mw2_only, coarse, cfg.render);
        detail::append(total, part);
        theta = part.theta;
    }

    if (cfg.optimizer.epsilon_ladder.size() > 1) {
        OptimizerConfig fine = cfg.optimizer;
        fine.epsilon_ladder.erase(fine.epsilon_ladder.begin());
        std::vector<Camera> cams_main;
        if (cfg.weights.uses_rendering()) {
            // Other sub views may look at parts the main map never saw; their
            // renders would pull the pose toward empty space.
            const std::size_t used = shared_view ? 1 : cams_n.size();
            for (std::size_t k = 0; k < used; ++k) cams_main.push_back(transform_camera(theta, cams_n[k]));
        }
        const auto part = optimize_sim3(main_c, sub_c, theta, cams_main, cfg.weights, fine, cfg.render);
        detail::append(total, part);
        theta = part.theta;
    }

    total.theta = sim3_compose(theta, pre);
    total.theta.q = total.theta.q.normalized();
    return total;
}

// ---------------------------------------------------------------------------
// Incremental pipeline

struct PipelineConfig {
    PairRegistrationConfig registration{};
    bool prune_each_merge = true;
    PruneOptions prune{};
    /// Solver used for the reported MW2 metric.
    SinkhornConfig metric{};
};

struct SubmapOutcome {
    std::size_t index = 0;
    bool accepted = false;
    std::string error;  // empty when accepted
    std::optional<ErrorCode> error_code;
    RegistrationResult result;
    double mw2_initial = 0.0;  // MW2(sub, main) before registration
    double mw2_final = 0.0;    // MW2(theta(sub), main)
};

struct PipelineReport {
    std::vector<SubmapOutcome> submaps;  // index 0 is the main initializer
    std::vector<TrajectoryPose> trajectory_estimated;
    std::vector<TrajectoryPose> trajectory_ground_truth;  // empty without ground truth
    std::vector<bool> trajectory_valid;
    std::optional<double> ate_rmse;
    double scene_extent = 1.0;
    std::size_t map_size_before_prune = 0;
    std::size_t map_size_after_prune = 0;
    GaussianMixture merged;
};

namespace detail {

inline TrajectoryPose camera_pose_in(const Sim3Params& local_to_world, const Camera& cam) {
    const Camera w = transform_camera(local_to_world, cam);
    TrajectoryPose p;
    p.position = w.center();
    p.orientation = rotation_to_quat(w.rotation.transpose());
    return p;
}

}  // namespace detail

/// Main map starts as submap 0; each later submap is registered against the
/// previous accepted submap as placed in the main frame, then merged (and
/// pruned). The last camera of the previous submap and the first camera of
/// the new one are taken to show the same view. A failing submap is
/// recorded and skipped.
inline PipelineReport run_incremental(const SceneManifest& manifest, const PipelineConfig& cfg = {}) {
    if (manifest.submaps.size() < 2) throw Error(ErrorCode::InvalidArgument, "pipeline needs at least two submaps");
    const auto& first = manifest.submaps.front();
    if (first.mixture.empty() || !first.mixture.is_finite()) {
        throw Error(ErrorCode::InvalidArgument, "submap 0 must be a valid non-empty mixture");
    }

    PipelineReport report;
    report.scene_extent = manifest.scene_extent;
    GaussianMixture main = normalize_weights(first.mixture);
    GaussianMixture anchor = main;  // previous accepted submap, main frame
    std::optional<Camera> anchor_camera;
    if (!first.cameras.empty()) anchor_camera = first.cameras.back();

    std::vector<std::optional<Sim3Params>> poses(manifest.submaps.size());
    poses[0] = Sim3Params{};
    SubmapOutcome o0;
    o0.index = 0;
    o0.accepted = true;
    report.submaps.push_back(o0);

    for (std::size_t k = 1; k < manifest.submaps.size(); ++k) {
        const auto& entry = manifest.submaps[k];
        SubmapOutcome out;
        out.index = k;
        try {
            if (entry.mixture.empty()) throw Error(ErrorCode::EmptyMixture, "submap is empty");
            if (!entry.mixture.is_finite()) throw Error(ErrorCode::InvalidArgument, "submap contains non-finite values");
            const GaussianMixture sub = normalize_weights(entry.mixture);
            out.mw2_initial = mw2_distance(anchor, sub, cfg.metric).mw2_sq;
            out.result = register_pair(anchor, sub, entry.cameras, cfg.registration,
                                       anchor_camera ? &*anchor_camera : nullptr);
            const Sim3Params& theta = out.result.theta;
            const GaussianMixture placed = normalize_weights(sim3_apply(theta, sub));
            out.mw2_final = mw2_distance(anchor, placed, cfg.metric).mw2_sq;

            PruneOptions po = cfg.prune;
            if (po.dedup_radius < 0.0) po.dedup_radius = 0.5 * median_nearest_neighbor_distance(main);
            GaussianMixture merged = merge_maps(main, sub, theta);
            report.map_size_before_prune = merged.size();
            main = cfg.prune_each_merge ? prune(merged, po) : std::move(merged);
            anchor = placed;
            anchor_camera.reset();
            if (!entry.cameras.empty()) anchor_camera = transform_camera(theta, entry.cameras.back());
            poses[k] = theta;
            out.accepted = true;
        } catch (const Error& e) {
            out.error = e.what();
            out.error_code = e.code();
        }
        report.submaps.push_back(std::move(out));
    }
    if (!cfg.prune_each_merge) {
        report.map_size_before_prune = main.size();
        PruneOptions po = cfg.prune;
        main = prune(main, po);
    }
    report.map_size_after_prune = main.size();
    report.merged = std::move(main);

    std::vector<Vec3> est, gt;
    const bool with_gt = manifest.has_ground_truth();
    for (std::size_t k = 0; k < manifest.submaps.size(); ++k) {
        const auto& entry = manifest.submaps[k];
        Camera cam;
        if (!entry.cameras.empty()) cam = entry.cameras.front();
        const bool valid = poses[k].has_value();
        report.trajectory_valid.push_back(valid);
        report.trajectory_estimated.push_back(valid ? detail::camera_pose_in(*poses[k], cam) : TrajectoryPose{});
        if (with_gt) {
            report.trajectory_ground_truth.push_back(detail::camera_pose_in(*entry.ground_truth, cam));
            if (valid) {
                est.push_back(report.trajectory_estimated.back().position);
                gt.push_back(report.trajectory_ground_truth.back().position);
            }
        }
    }
    if (with_gt && est.size() >= 2) report.ate_rmse = ate_rmse(est, gt);
    return report;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SyntheticSceneConfig {
    std::uint64_t seed = 0;
    std::size_t n_components = 500;
    std::size_t n_submaps = 2;
    double overlap_fraction = 0.5;
    /// Relative perturbation of covariance axes and of means (in component sigmas).
    double noise = 0.0;
    double max_rotation_deg = 30.0;
    double max_translation_fraction = 0.5;  // of the scene extent
    double min_scale = 0.5;
    double max_scale = 2.0;
    int image_width = 64;
    int image_height = 48;

    void validate() const {
        if (n_components < 10) throw Error(ErrorCode::InvalidArgument, "need at least 10 components");
        if (n_submaps < 1) throw Error(ErrorCode::InvalidArgument, "need at least one submap");
        if (!(overlap_fraction > 0.0 && overlap_fraction <= 1.0)) {
            throw Error(ErrorCode::InvalidArgument, "overlap_fraction must lie in (0, 1]");
        }
        if (noise < 0.0 || noise >= 1.0) throw Error(ErrorCode::InvalidArgument, "noise must lie in [0, 1)");
        if (max_rotation_deg < 0.0 || max_translation_fraction < 0.0) {
            throw Error(ErrorCode::InvalidArgument, "pose ranges must be non-negative");
        }
        if (!(min_scale > 0.0) || max_scale < min_scale) throw Error(ErrorCode::InvalidArgument, "invalid scale range");
        if (image_width < 8 || image_height < 8) throw Error(ErrorCode::InvalidArgument, "image too small");
    }
};

/// Contiguous windows over the components sorted along x: window size W
/// and shift (1 - overlap) W chosen so the windows exactly tile the scene.
inline std::vector<std::pair<std::size_t, std::size_t>> submap_windows(std::size_t n, std::size_t k, double overlap) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    if (k == 1) {
        out.emplace_back(0, n);
        return out;
    }
    const double w = static_cast<double>(n) / (1.0 + static_cast<double>(k - 1) * (1.0 - overlap));
    const auto width = std::min(n, static_cast<std::size_t>(std::llround(w)));
    for (std::size_t i = 0; i < k; ++i) {
        const auto start = static_cast<std::size_t>(std::llround(static_cast<double>(i) * (n - width) / (k - 1)));
        out.emplace_back(start, start + width);
    }
    return out;
}

namespace detail {

inline Mat3 random_rotation(std::mt19937_64& rng, double max_angle) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Vec3 axis(n(rng), n(rng), n(rng));
    return quat_to_rotation(Quaternion::from_axis_angle(axis, max_angle * u(rng)));
}

}  // namespace detail

/// Clustered anisotropic scene elongated along x, sliced into overlapping
/// windows. Submap k is stored in its local frame, related to the world by
/// the recorded ground truth (local -> world, identity for submap 0), and
/// carries two cameras looking along +z: the first shows the overlap with
/// the previous submap, the second the overlap with the next one.
inline SceneManifest generate_synthetic_scene(const SyntheticSceneConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n01(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * u(rng); };

    const std::size_t n = cfg.n_components;
    const std::size_t clusters = std::max<std::size_t>(2, n / 20);
    const double half_length = 1.0 + 0.5 * static_cast<double>(cfg.n_submaps);
    std::vector<Vec3> centers, colors;
    for (std::size_t c = 0; c < clusters; ++c) {
        centers.emplace_back(uni(-half_length, half_length), uni(-0.6, 0.6), uni(-0.3, 0.3));
        colors.emplace_back(u(rng), u(rng), u(rng));
    }
    GaussianMixture world;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = static_cast<std::size_t>(u(rng) * static_cast<double>(clusters)) % clusters;
        GaussianComponent g;
        g.mean = centers[c] + 0.15 * Vec3(n01(rng), n01(rng), n01(rng));
        const Mat3 r = detail::random_rotation(rng, M_PI);
        const double base = std::exp(uni(std::log(0.02), std::log(0.06)));
        const Vec3 sd(base * uni(1.5, 3.0), base, base * uni(0.5, 1.0));
        g.covariance = r * sd.cwiseAbs2().asDiagonal() * r.transpose();
        g.covariance = 0.5 * (g.covariance + g.covariance.transpose()).eval();
        g.opacity = uni(0.4, 0.95);
        g.color = (colors[c] + 0.05 * Vec3(n01(rng), n01(rng), n01(rng))).cwiseMax(0.0).cwiseMin(1.0);
        world.components.push_back(g);
    }
    std::stable_sort(world.components.begin(), world.components.end(),
                     [](const GaussianComponent& a, const GaussianComponent& b) { return a.mean.x() < b.mean.x(); });

    SceneManifest manifest;
    const auto box = detail::bounds(world);
    manifest.scene_extent = (box.hi - box.lo).maxCoeff();

    const auto windows = submap_windows(n, cfg.n_submaps, cfg.overlap_fraction);

    // World camera on -z of a component range whose image spans the range's
    // x and y extent at the far side of the scene, so everything it sees lies
    // inside that range.
    auto frame_range = [&](std::size_t lo, std::size_t hi) {
        detail::Aabb sb;
        for (std::size_t i = lo; i < hi; ++i) sb.extend(world.components[i].mean);
        const Vec3 center = 0.5 * (sb.lo + sb.hi);
        const double half_x = std::max(0.5 * (sb.hi.x() - sb.lo.x()), 1e-3);
        const double half_y = std::max(0.5 * (sb.hi.y() - sb.lo.y()), 1e-3);
        const double cam_z = box.lo.z() - 2.5 * std::max(half_x, half_y);
        const double far = box.hi.z() - cam_z;
        Camera cam;
        cam.intrinsics = {0.5 * cfg.image_width * far / half_x, 0.5 * cfg.image_height * far / half_y,
                          0.5 * cfg.image_width, 0.5 * cfg.image_height, cfg.image_width, cfg.image_height};
        cam.translation = -Vec3(center.x(), center.y(), cam_z);
        return cam;
    };
    // views[k] frames the overlap of windows k - 1 and k; the outer views
    // frame the same width at the two ends of the scene.
    const std::size_t k_count = windows.size();
    std::size_t shared = windows[0].second - windows[0].first;
    if (k_count > 1) shared = windows[0].second - windows[1].first;
    shared = std::max<std::size_t>(shared, 1);
    std::vector<Camera> views;
    views.push_back(frame_range(windows[0].first, windows[0].first + shared));
    for (std::size_t k = 1; k < k_count; ++k) {
        views.push_back(frame_range(windows[k].first, std::max(windows[k - 1].second, windows[k].first + 1)));
    }
    views.push_back(frame_range(windows.back().second - shared, windows.back().second));

    for (std::size_t k = 0; k < windows.size(); ++k) {
        Sim3Params pose;
        if (k > 0) {
            pose.q = rotation_to_quat(detail::random_rotation(rng, cfg.max_rotation_deg * M_PI / 180.0));
            Vec3 dir(n01(rng), n01(rng), n01(rng));
            pose.t = dir.normalized() * uni(0.0, cfg.max_translation_fraction * manifest.scene_extent);
            pose.log_s = uni(std::log(cfg.min_scale), std::log(cfg.max_scale));
        }
        const Sim3Params to_local = sim3_invert(pose);

        // A submap holds its window plus everything its two views see.
        GaussianMixture slice;
        for (std::size_t i = 0; i < n; ++i) {
            const Vec3& p = world.components[i].mean;
            if ((i >= windows[k].first && i < windows[k].second) || detail::in_view(views[k], p) ||
                detail::in_view(views[k + 1], p)) {
                slice.components.push_back(world.components[i]);
            }
        }
        GaussianMixture local = sim3_apply(to_local, slice);
        if (cfg.noise > 0.0) {
            for (auto& g : local.components) {
                const double sigma = std::sqrt(g.covariance.trace() / 3.0);
                g.mean += cfg.noise * 0.5 * sigma * Vec3(n01(rng), n01(rng), n01(rng));
                const Mat3 q = detail::random_rotation(rng, M_PI);
                const Vec3 f(1.0 + cfg.noise * uni(-1.0, 1.0), 1.0 + cfg.noise * uni(-1.0, 1.0),
                             1.0 + cfg.noise * uni(-1.0, 1.0));
                const Mat3 d = q * f.asDiagonal() * q.transpose();
                g.covariance = d * g.covariance * d;
                g.covariance = 0.5 * (g.covariance + g.covariance.transpose()).eval();
            }
        }

        SubmapEntry entry;
        entry.mixture = normalize_weights(std::move(local));
        // Front view shared with the previous submap, back view with the next.
        for (const auto& view : {views[k], views[k + 1]}) entry.cameras.push_back(transform_camera(to_local, view));
        entry.ground_truth = pose;
        manifest.submaps.push_back(std::move(entry));
    }
    return manifest;
}

/// Errors of an estimated local -> world similarity against ground truth.
struct PoseError {
    double rotation_deg = 0.0;
    double translation = 0.0;
    double scale_relative = 0.0;
};

inline PoseError pose_error(const Sim3Params& estimate, const Sim3Params& truth) {
    PoseError e;
    e.rotation_deg = rotation_angle_between(estimate.rotation(), truth.rotation()) * 180.0 / M_PI;
    e.translation = (estimate.t - truth.t).norm();
    e.scale_relative = std::abs(estimate.scale() / truth.scale() - 1.0);
    return e;
}

}  // namespace splatreg
