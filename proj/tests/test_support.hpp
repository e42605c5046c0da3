#pragma once

// Random instance generators shared by the unit and acceptance suites.

#include <cmath>
#include <random>
#include <vector>

#include "splatreg/core.hpp"

namespace splatreg::testing {

inline Quaternion random_unit_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Quaternion q{n(rng), n(rng), n(rng), n(rng)};
    return q.normalized();
}

inline Mat3 random_rotation(std::mt19937_64& rng) { return quat_to_rotation(random_unit_quaternion(rng)); }

/// R diag(s^2) R^T with axis standard deviations drawn from [lo, hi].
inline Mat3 random_spd(std::mt19937_64& rng, double lo = 0.05, double hi = 0.5) {
    std::uniform_real_distribution<double> u(lo, hi);
    const Mat3 r = random_rotation(rng);
    Vec3 var;
    for (int j = 0; j < 3; ++j) {
        const double s = u(rng);
        var[j] = s * s;
    }
    Mat3 cov = r * var.asDiagonal() * r.transpose();
    return 0.5 * (cov + cov.transpose());
}

inline Vec3 random_point(std::mt19937_64& rng, double half_extent = 1.0) {
    std::uniform_real_distribution<double> u(-half_extent, half_extent);
    return {u(rng), u(rng), u(rng)};
}

inline GaussianComponent random_component(std::mt19937_64& rng, double half_extent = 1.0) {
    std::uniform_real_distribution<double> op(0.2, 1.0);
    std::uniform_real_distribution<double> col(0.0, 1.0);
    GaussianComponent g;
    g.mean = random_point(rng, half_extent);
    g.covariance = random_spd(rng);
    g.opacity = op(rng);
    g.color = {col(rng), col(rng), col(rng)};
    return g;
}

/// Normalized mixture with opacity-derived weights.
inline GaussianMixture random_mixture(std::mt19937_64& rng, std::size_t n, double half_extent = 1.0) {
    GaussianMixture m;
    for (std::size_t i = 0; i < n; ++i) m.components.push_back(random_component(rng, half_extent));
    return normalize_weights(m);
}

inline GaussianMixture uniform_weights(GaussianMixture m) {
    for (auto& c : m.components) c.weight = 1.0 / static_cast<double>(m.size());
    return m;
}

inline Sim3Params random_sim3(std::mt19937_64& rng, double max_angle = 3.14159, double max_t = 1.0,
                              double max_log_s = 0.5) {
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    Sim3Params p;
    p.q = Quaternion::from_axis_angle(Vec3(n(rng), n(rng), n(rng)), max_angle * u01(rng));
    p.t = random_point(rng, max_t);
    p.log_s = max_log_s * (2.0 * u01(rng) - 1.0);
    return p;
}

inline std::vector<double> random_simplex(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.1, 1.0);
    std::vector<double> w(n);
    double s = 0.0;
    for (auto& x : w) s += (x = u(rng));
    for (auto& x : w) x /= s;
    return w;
}

}  // namespace splatreg::testing
