#pragma once

// Symmetric 3x3 eigensolvers: cyclic Jacobi for full decompositions and the
// trigonometric closed form when only eigenvalues are needed.

#include <algorithm>
#include <cmath>
#include <numbers>

#include "splatreg/core.hpp"

namespace splatreg {

struct SymmetricEigen3 {
    Vec3 values;   // ascending
    Mat3 vectors;  // column j pairs with values[j]
};

/// Cyclic Jacobi rotations until the off-diagonal mass underflows relative
/// to the diagonal. Input is assumed symmetric; only the upper triangle is read.
inline SymmetricEigen3 symmetric_eigen3(const Mat3& input) {
    Mat3 a = input.triangularView<Eigen::Upper>();
    a = a.selfadjointView<Eigen::Upper>();
    Mat3 v = Mat3::Identity();

    for (int sweep = 0; sweep < 64; ++sweep) {
        const double off = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
        const double diag = a(0, 0) * a(0, 0) + a(1, 1) * a(1, 1) + a(2, 2) * a(2, 2);
        if (off == 0.0 || off <= 1e-36 * diag) break;

        for (int p = 0; p < 2; ++p) {
            for (int q = p + 1; q < 3; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                Eigen::Matrix3d rot = Mat3::Identity();
                rot(p, p) = c;
                rot(q, q) = c;
                rot(p, q) = s;
                rot(q, p) = -s;
                a = rot.transpose() * a * rot;
                a(p, q) = a(q, p) = 0.0;
                v = v * rot;
            }
        }
    }

    SymmetricEigen3 out;
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int i, int j) { return a(i, i) < a(j, j); });
    for (int j = 0; j < 3; ++j) {
        out.values[j] = a(order[j], order[j]);
        out.vectors.col(j) = v.col(order[j]);
    }
    return out;
}

/// Eigenvalues (ascending) of a symmetric 3x3 via the trigonometric solution
/// of the characteristic cubic.
inline Vec3 symmetric_eigenvalues3(const Mat3& a) {
    const double p1 = a(0, 1) * a(0, 1) + a(0, 2) * a(0, 2) + a(1, 2) * a(1, 2);
    if (p1 == 0.0) {
        Vec3 d(a(0, 0), a(1, 1), a(2, 2));
        std::sort(d.data(), d.data() + 3);
        return d;
    }
    const double q = a.trace() / 3.0;
    const double d0 = a(0, 0) - q, d1 = a(1, 1) - q, d2 = a(2, 2) - q;
    const double p2 = d0 * d0 + d1 * d1 + d2 * d2 + 2.0 * p1;
    const double p = std::sqrt(p2 / 6.0);
    Mat3 b = a;
    b.diagonal().array() -= q;
    b /= p;
    const double r = std::clamp(b.determinant() / 2.0, -1.0, 1.0);
    const double phi = std::acos(r) / 3.0;
    const double hi = q + 2.0 * p * std::cos(phi);
    const double lo = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
    const double mid = 3.0 * q - hi - lo;
    return {lo, mid, hi};
}

}  // namespace splatreg
