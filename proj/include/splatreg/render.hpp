#pragma once

// Minimal CPU splat rasterizer: EWA projection, depth-sorted front-to-back
// alpha compositing over 16x16 tiles, and the image-space losses.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "splatreg/core.hpp"

namespace splatreg {

inline constexpr double kNearPlane = 1e-3;
/// Low-pass added to every screen covariance (px^2) so sub-pixel splats
/// still cover a pixel center.
inline constexpr double kScreenDilation = 0.3;
inline constexpr double kMaxSplatAlpha = 0.999;
/// Footprints are cut at Mahalanobis distance 3.
inline constexpr double kFootprintSigma = 3.0;

struct RenderOptions {
    Vec3 background = Vec3::Zero();
    double mask_threshold = 0.5;
};

struct RenderOutput {
    int width = 0;
    int height = 0;
    std::vector<double> rgb;    // row-major, 3 channels per pixel
    std::vector<double> depth;  // 0 where alpha == 0
    std::vector<double> alpha;
    std::vector<std::uint8_t> valid_mask;

    std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
    std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
    Vec3 color_at(int x, int y) const {
        const std::size_t i = 3 * index(x, y);
        return {rgb[i], rgb[i + 1], rgb[i + 2]};
    }
    std::size_t valid_count() const {
        return static_cast<std::size_t>(std::count(valid_mask.begin(), valid_mask.end(), std::uint8_t{1}));
    }
};

struct ProjectedGaussian {
    Eigen::Vector2d center;
    Eigen::Matrix2d covariance;  // px^2, includes the dilation
    double depth = 0.0;
};

/// Pinhole projection of the mean with the EWA screen covariance
/// J W Sigma W^T J^T, J the projection Jacobian at the camera-space mean.
inline ProjectedGaussian project_gaussian(const GaussianComponent& g, const Camera& cam) {
    const Vec3 pc = cam.rotation * g.mean + cam.translation;
    if (!(pc.z() > kNearPlane)) {
        throw Error(ErrorCode::BehindCamera, "component mean is behind the near plane");
    }
    const auto& k = cam.intrinsics;
    const double iz = 1.0 / pc.z();
    ProjectedGaussian out;
    out.depth = pc.z();
    out.center = {k.fx * pc.x() * iz + k.cx, k.fy * pc.y() * iz + k.cy};

    Eigen::Matrix<double, 2, 3> j;
    j << k.fx * iz, 0.0, -k.fx * pc.x() * iz * iz,
         0.0, k.fy * iz, -k.fy * pc.y() * iz * iz;
    const Mat3 cov_cam = cam.rotation * g.covariance * cam.rotation.transpose();
    Eigen::Matrix2d s = j * cov_cam * j.transpose();
    s = 0.5 * (s + s.transpose()).eval();
    s(0, 0) += kScreenDilation;
    s(1, 1) += kScreenDilation;
    out.covariance = s;
    return out;
}

namespace detail {

struct ScreenSplat {
    Eigen::Vector2d center;
    double conic_a = 0, conic_b = 0, conic_c = 0;  // inverse covariance entries
    double depth = 0;
    double opacity = 0;
    Vec3 color;
    int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel bounds
};

inline constexpr int kTileSize = 16;

}  // namespace detail

/// Renders RGB, expected depth, accumulated alpha and the valid mask.
/// Pixel (x, y) samples the image plane at (x, y). Output is independent of
/// the thread schedule: each tile composites its own splat list in depth order.
inline RenderOutput render(const GaussianMixture& mixture, const Camera& cam,
                           const RenderOptions& opts = {}) {
    cam.validate();
    const int w = cam.intrinsics.width;
    const int h = cam.intrinsics.height;

    std::vector<detail::ScreenSplat> splats;
    splats.reserve(mixture.size());
    for (const auto& g : mixture.components) {
        if (!(g.opacity > 0.0)) continue;
        const Vec3 pc = cam.rotation * g.mean + cam.translation;
        if (!(pc.z() > kNearPlane)) continue;
        const ProjectedGaussian p = project_gaussian(g, cam);
        const double det = p.covariance.determinant();
        if (!(det > 0.0) || !std::isfinite(det)) continue;

        detail::ScreenSplat s;
        s.center = p.center;
        s.conic_a = p.covariance(1, 1) / det;
        s.conic_b = -p.covariance(0, 1) / det;
        s.conic_c = p.covariance(0, 0) / det;
        s.depth = p.depth;
        s.opacity = std::min(g.opacity, 1.0);
        s.color = g.color;
        const double rx = kFootprintSigma * std::sqrt(p.covariance(0, 0));
        const double ry = kFootprintSigma * std::sqrt(p.covariance(1, 1));
        s.x0 = std::max(0, static_cast<int>(std::ceil(p.center.x() - rx)));
        s.x1 = std::min(w - 1, static_cast<int>(std::floor(p.center.x() + rx)));
        s.y0 = std::max(0, static_cast<int>(std::ceil(p.center.y() - ry)));
        s.y1 = std::min(h - 1, static_cast<int>(std::floor(p.center.y() + ry)));
        if (s.x0 > s.x1 || s.y0 > s.y1) continue;
        splats.push_back(s);
    }

    std::vector<std::size_t> order(splats.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return splats[a].depth < splats[b].depth; });

    const int tiles_x = (w + detail::kTileSize - 1) / detail::kTileSize;
    const int tiles_y = (h + detail::kTileSize - 1) / detail::kTileSize;
    std::vector<std::vector<std::size_t>> bins(static_cast<std::size_t>(tiles_x) * tiles_y);
    for (std::size_t idx : order) {
        const auto& s = splats[idx];
        for (int ty = s.y0 / detail::kTileSize; ty <= s.y1 / detail::kTileSize; ++ty)
            for (int tx = s.x0 / detail::kTileSize; tx <= s.x1 / detail::kTileSize; ++tx)
                bins[static_cast<std::size_t>(ty) * tiles_x + tx].push_back(idx);
    }

    RenderOutput out;
    out.width = w;
    out.height = h;
    out.rgb.assign(3 * out.pixel_count(), 0.0);
    out.depth.assign(out.pixel_count(), 0.0);
    out.alpha.assign(out.pixel_count(), 0.0);
    out.valid_mask.assign(out.pixel_count(), 0);

    const auto tile_count = static_cast<std::ptrdiff_t>(bins.size());
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t t = 0; t < tile_count; ++t) {
        const int tx = static_cast<int>(t % tiles_x);
        const int ty = static_cast<int>(t / tiles_x);
        const auto& bin = bins[static_cast<std::size_t>(t)];
        const int px0 = tx * detail::kTileSize, px1 = std::min(w, px0 + detail::kTileSize);
        const int py0 = ty * detail::kTileSize, py1 = std::min(h, py0 + detail::kTileSize);
        for (int y = py0; y < py1; ++y) {
            for (int x = px0; x < px1; ++x) {
                double transmittance = 1.0;
                Vec3 color = Vec3::Zero();
                double depth = 0.0;
                for (std::size_t idx : bin) {
                    const auto& s = splats[idx];
                    if (x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1) continue;
                    const double dx = x - s.center.x();
                    const double dy = y - s.center.y();
                    const double power = s.conic_a * dx * dx + 2.0 * s.conic_b * dx * dy + s.conic_c * dy * dy;
                    if (power > kFootprintSigma * kFootprintSigma) continue;
                    const double a = std::min(kMaxSplatAlpha, s.opacity * std::exp(-0.5 * power));
                    const double contrib = transmittance * a;
                    color += contrib * s.color;
                    depth += contrib * s.depth;
                    transmittance *= (1.0 - a);
                }
                const std::size_t i = out.index(x, y);
                const double alpha = 1.0 - transmittance;
                const Vec3 rgb = color + transmittance * opts.background;
                out.rgb[3 * i] = rgb.x();
                out.rgb[3 * i + 1] = rgb.y();
                out.rgb[3 * i + 2] = rgb.z();
                out.alpha[i] = alpha;
                out.depth[i] = alpha > 0.0 ? depth / alpha : 0.0;
                out.valid_mask[i] = alpha > opts.mask_threshold ? 1 : 0;
            }
        }
    }
    return out;
}

namespace detail {

inline void require_same_size(const RenderOutput& a, const RenderOutput& b) {
    if (a.width != b.width || a.height != b.height) {
        throw Error(ErrorCode::DimensionMismatch, "renders have different dimensions");
    }
}

}  // namespace detail

/// Mean absolute RGB difference over every pixel and channel.
inline double photometric_loss(const RenderOutput& a, const RenderOutput& b) {
    detail::require_same_size(a, b);
    if (a.rgb.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.rgb.size(); ++i) s += std::abs(a.rgb[i] - b.rgb[i]);
    return s / static_cast<double>(a.rgb.size());
}

struct DepthLoss {
    double value = 0.0;
    std::size_t valid_pixels = 0;
    bool empty_intersection = false;
};

/// Mean |D_a - D_b| over pixels valid in both renders; an empty
/// intersection yields 0 with the flag set.
inline DepthLoss depth_loss(const RenderOutput& a, const RenderOutput& b) {
    detail::require_same_size(a, b);
    DepthLoss out;
    double s = 0.0;
    for (std::size_t i = 0; i < a.depth.size(); ++i) {
        if (a.valid_mask[i] && b.valid_mask[i]) {
            s += std::abs(a.depth[i] - b.depth[i]);
            ++out.valid_pixels;
        }
    }
    if (out.valid_pixels == 0) {
        out.empty_intersection = true;
        return out;
    }
    out.value = s / static_cast<double>(out.valid_pixels);
    return out;
}

/// 2x2 box downsampling; odd trailing rows/columns are dropped.
inline RenderOutput downsample2x(const RenderOutput& in, double mask_threshold = 0.5) {
    RenderOutput out;
    out.width = in.width / 2;
    out.height = in.height / 2;
    out.rgb.assign(3 * out.pixel_count(), 0.0);
    out.depth.assign(out.pixel_count(), 0.0);
    out.alpha.assign(out.pixel_count(), 0.0);
    out.valid_mask.assign(out.pixel_count(), 0);
    for (int y = 0; y < out.height; ++y) {
        for (int x = 0; x < out.width; ++x) {
            const std::size_t o = out.index(x, y);
            double weighted_depth = 0.0;
            for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                    const std::size_t i = in.index(2 * x + dx, 2 * y + dy);
                    for (int c = 0; c < 3; ++c) out.rgb[3 * o + c] += 0.25 * in.rgb[3 * i + c];
                    out.alpha[o] += 0.25 * in.alpha[i];
                    weighted_depth += 0.25 * in.alpha[i] * in.depth[i];
                }
            }
            out.depth[o] = out.alpha[o] > 0.0 ? weighted_depth / out.alpha[o] : 0.0;
            out.valid_mask[o] = out.alpha[o] > mask_threshold ? 1 : 0;
        }
    }
    return out;
}

/// Mean rendered depth over the valid mask; nullopt below `min_fraction` coverage.
inline std::optional<double> mean_valid_depth(const RenderOutput& r, double min_fraction = 0.01) {
    const std::size_t n = r.valid_count();
    if (n == 0 || static_cast<double>(n) < min_fraction * static_cast<double>(r.pixel_count())) {
        return std::nullopt;
    }
    double s = 0.0;
    for (std::size_t i = 0; i < r.depth.size(); ++i)
        if (r.valid_mask[i]) s += r.depth[i];
    return s / static_cast<double>(n);
}

}  // namespace splatreg
