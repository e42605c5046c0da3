#pragma once

// Domain types for Gaussian mixtures, quaternions, cameras and Sim(3)
// transforms, plus the component-wise similarity transform law.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "splatreg/error.hpp"

namespace splatreg {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Regularization added to covariances before any Bures computation.
inline constexpr double kCovarianceRegularization = 1e-6;

struct Quaternion {
    double w = 1.0;
    double x = 0.0;
    double y = 0.0;
    double z = 0.0;

    static Quaternion identity() { return {}; }

    static Quaternion from_axis_angle(const Vec3& axis, double angle) {
        const Vec3 n = axis.normalized();
        const double h = 0.5 * angle;
        const double s = std::sin(h);
        return {std::cos(h), s * n.x(), s * n.y(), s * n.z()};
    }

    double squared_norm() const { return w * w + x * x + y * y + z * z; }
    double norm() const { return std::sqrt(squared_norm()); }

    Quaternion normalized() const {
        const double n = norm();
        return {w / n, x / n, y / n, z / n};
    }

    Quaternion conjugate() const { return {w, -x, -y, -z}; }

    double dot(const Quaternion& o) const { return w * o.w + x * o.x + y * o.y + z * o.z; }

    std::array<double, 4> coeffs() const { return {w, x, y, z}; }

    friend Quaternion operator*(const Quaternion& a, const Quaternion& b) {
        return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
                a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
                a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
                a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
    }
};

/// Rotation matrix of a unit quaternion (w, x, y, z). The caller owns
/// normalization; a non-unit input yields a non-orthogonal matrix.
inline Mat3 quat_to_rotation(const Quaternion& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    Mat3 r;
    r << 1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y,
         2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x,
         2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y;
    return r;
}

/// Partial derivatives of quat_to_rotation's polynomial w.r.t. (w, x, y, z).
inline std::array<Mat3, 4> quat_rotation_jacobian(const Quaternion& q) {
    const double w = q.w, x = q.x, y = q.y, z = q.z;
    std::array<Mat3, 4> d;
    d[0] << 0, -2 * z, 2 * y,
            2 * z, 0, -2 * x,
            -2 * y, 2 * x, 0;
    d[1] << 0, 2 * y, 2 * z,
            2 * y, -4 * x, -2 * w,
            2 * z, 2 * w, -4 * x;
    d[2] << -4 * y, 2 * x, 2 * w,
            2 * x, 0, 2 * z,
            -2 * w, 2 * z, -4 * y;
    d[3] << -4 * z, -2 * w, 2 * x,
            2 * w, -4 * z, 2 * y,
            2 * x, 2 * y, 0;
    return d;
}

inline Quaternion rotation_to_quat(const Mat3& r) {
    const Eigen::Quaterniond e(r);
    Quaternion q{e.w(), e.x(), e.y(), e.z()};
    if (q.w < 0) q = {-q.w, -q.x, -q.y, -q.z};
    return q.normalized();
}

/// Geodesic angle (radians) between two rotation matrices.
inline double rotation_angle_between(const Mat3& a, const Mat3& b) {
    const double c = std::clamp(((a.transpose() * b).trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c);
}

struct GaussianComponent {
    Vec3 mean = Vec3::Zero();
    Mat3 covariance = Mat3::Identity();
    double weight = 0.0;
    double opacity = 1.0;
    Vec3 color = Vec3::Constant(0.5);

    bool is_finite() const {
        return mean.allFinite() && covariance.allFinite() && std::isfinite(weight) &&
               std::isfinite(opacity) && color.allFinite();
    }
};

struct GaussianMixture {
    std::vector<GaussianComponent> components;

    std::size_t size() const { return components.size(); }
    bool empty() const { return components.empty(); }

    double total_weight() const {
        double s = 0.0;
        for (const auto& c : components) s += c.weight;
        return s;
    }

    bool is_finite() const {
        return std::all_of(components.begin(), components.end(),
                           [](const GaussianComponent& c) { return c.is_finite(); });
    }

    std::vector<double> weights() const {
        std::vector<double> w(components.size());
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = components[i].weight;
        return w;
    }
};

/// weight_i = opacity_i / sum_j opacity_j; nothing else changes.
inline GaussianMixture normalize_weights(GaussianMixture mixture) {
    double total = 0.0;
    for (const auto& c : mixture.components) total += c.opacity;
    if (!(total > 0.0)) {
        throw Error(ErrorCode::AllOpacitiesZero, "mixture has no component with positive opacity");
    }
    for (auto& c : mixture.components) c.weight = c.opacity / total;
    return mixture;
}

inline bool weights_normalized(const GaussianMixture& m, double tol = 1e-9) {
    return !m.empty() && std::abs(m.total_weight() - 1.0) <= tol;
}

/// Similarity transform x -> s R(q) x + t with s = exp(log_s).
struct Sim3Params {
    Quaternion q;
    Vec3 t = Vec3::Zero();
    double log_s = 0.0;

    static Sim3Params identity() { return {}; }

    double scale() const { return std::exp(log_s); }
    Mat3 rotation() const { return quat_to_rotation(q); }

    Vec3 apply(const Vec3& p) const { return scale() * (rotation() * p) + t; }

    /// Packed parameter vector [w, x, y, z, tx, ty, tz, log_s].
    std::array<double, 8> to_array() const {
        return {q.w, q.x, q.y, q.z, t.x(), t.y(), t.z(), log_s};
    }

    static Sim3Params from_array(const std::array<double, 8>& v) {
        Sim3Params p;
        p.q = {v[0], v[1], v[2], v[3]};
        p.t = Vec3(v[4], v[5], v[6]);
        p.log_s = v[7];
        return p;
    }
};

inline GaussianComponent sim3_apply_component(const Sim3Params& theta, const GaussianComponent& g) {
    const Mat3 r = theta.rotation();
    const double s = theta.scale();
    GaussianComponent out = g;
    out.mean = s * (r * g.mean) + theta.t;
    out.covariance = (s * s) * (r * g.covariance * r.transpose());
    out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
    return out;
}

inline GaussianMixture sim3_apply(const Sim3Params& theta, const GaussianMixture& mixture) {
    GaussianMixture out;
    out.components.reserve(mixture.size());
    for (const auto& c : mixture.components) out.components.push_back(sim3_apply_component(theta, c));
    return out;
}

/// Result applies b first, then a.
inline Sim3Params sim3_compose(const Sim3Params& a, const Sim3Params& b) {
    Sim3Params out;
    out.q = (a.q * b.q).normalized();
    out.t = a.scale() * (a.rotation() * b.t) + a.t;
    out.log_s = a.log_s + b.log_s;
    return out;
}

inline Sim3Params sim3_invert(const Sim3Params& theta) {
    Sim3Params out;
    out.q = theta.q.conjugate();
    out.log_s = -theta.log_s;
    out.t = -(std::exp(-theta.log_s)) * (theta.rotation().transpose() * theta.t);
    return out;
}

/// 3DGS storage convention: Sigma = R diag(exp(2 log_scale)) R^T.
inline Mat3 covariance_from_splat_params(const Vec3& log_scale, const Quaternion& rot) {
    const Mat3 r = quat_to_rotation(rot);
    const Vec3 var = (2.0 * log_scale.array()).exp().matrix();
    Mat3 cov = r * var.asDiagonal() * r.transpose();
    return 0.5 * (cov + cov.transpose());
}

struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;
};

/// Pinhole camera; `rotation`/`translation` map world points into the
/// camera frame (x_cam = R x_world + t), camera looks along +z.
struct Camera {
    Intrinsics intrinsics;
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 center() const { return -(rotation.transpose() * translation); }

    void validate() const {
        const auto& k = intrinsics;
        if (!(k.fx > 0.0) || !(k.fy > 0.0)) {
            throw Error(ErrorCode::InvalidArgument, "camera focal lengths must be positive");
        }
        if (k.width <= 0 || k.height <= 0) {
            throw Error(ErrorCode::InvalidArgument, "camera image size must be positive");
        }
        if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-9 ||
            rotation.determinant() < 0.0) {
            throw Error(ErrorCode::InvalidArgument, "camera rotation is not orthonormal");
        }
    }
};

/// Re-expresses a camera given in a Sim(3)-source frame in the target frame
/// of `theta`. The similarity's scale is absorbed so the pose stays rigid;
/// rendered depths in the target frame are `scale` times the source depths.
inline Camera transform_camera(const Sim3Params& theta, const Camera& cam) {
    const Mat3 r = theta.rotation();
    Camera out = cam;
    out.rotation = cam.rotation * r.transpose();
    out.translation = theta.scale() * cam.translation - out.rotation * theta.t;
    return out;
}

}  // namespace splatreg
