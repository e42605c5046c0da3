#include <gtest/gtest.h>

#include <random>

#include "splatreg/io/image.hpp"
#include "splatreg/render.hpp"
#include "test_support.hpp"

using namespace splatreg;

namespace {

Camera make_camera(int w = 100, int h = 100, double f = 100.0) {
    Camera cam;
    cam.intrinsics = {f, f, w / 2.0, h / 2.0, w, h};
    return cam;
}

GaussianComponent splat(const Vec3& mu, double sigma, double opacity, const Vec3& color) {
    GaussianComponent g;
    g.mean = mu;
    g.covariance = sigma * sigma * Mat3::Identity();
    g.opacity = opacity;
    g.weight = 1.0;
    g.color = color;
    return g;
}

GaussianMixture scene(std::mt19937_64& rng, std::size_t n) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    GaussianMixture m;
    for (std::size_t i = 0; i < n; ++i) {
        auto g = splatreg::testing::random_component(rng, 0.6);
        g.mean.z() += 3.0;
        g.covariance *= 0.2;
        g.opacity = 0.2 + 0.79 * u(rng);
        g.color = Vec3(u(rng), u(rng), u(rng));
        m.components.push_back(g);
    }
    normalize_weights(m);
    return m;
}

RenderOutput blank(int w, int h) {
    RenderOutput r;
    r.width = w;
    r.height = h;
    r.rgb.assign(3 * r.pixel_count(), 0.0);
    r.depth.assign(r.pixel_count(), 0.0);
    r.alpha.assign(r.pixel_count(), 0.0);
    r.valid_mask.assign(r.pixel_count(), 0);
    return r;
}

}  // namespace

TEST(ProjectGaussian, OnAxisCenter) {
    const auto p = project_gaussian(splat(Vec3(0, 0, 1), 0.01, 1.0, Vec3::Ones()), make_camera());
    EXPECT_NEAR(p.center.x(), 50.0, 1e-12);
    EXPECT_NEAR(p.center.y(), 50.0, 1e-12);
    EXPECT_NEAR(p.depth, 1.0, 1e-12);
}

TEST(ProjectGaussian, IsotropicScreenCovariance) {
    const double sigma = 0.05, z = 2.0, f = 100.0;
    const auto p = project_gaussian(splat(Vec3(0, 0, z), sigma, 1.0, Vec3::Ones()), make_camera());
    const double expected = std::pow(f * sigma / z, 2) + kScreenDilation;
    EXPECT_NEAR(p.covariance(0, 0), expected, 1e-12);
    EXPECT_NEAR(p.covariance(1, 1), expected, 1e-12);
    EXPECT_NEAR(p.covariance(0, 1), 0.0, 1e-12);
}

TEST(ProjectGaussian, BehindCameraThrows) {
    try {
        project_gaussian(splat(Vec3(0, 0, -1), 0.1, 1.0, Vec3::Ones()), make_camera());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::BehindCamera);
    }
}

TEST(ProjectGaussian, OffAxisMatchesNumericJacobian) {
    std::mt19937_64 rng(40);
    const Camera cam = make_camera();
    for (int t = 0; t < 50; ++t) {
        auto g = splatreg::testing::random_component(rng, 0.5);
        g.mean.z() += 3.0;
        const auto p = project_gaussian(g, cam);
        auto proj = [&](const Vec3& x) {
            return Eigen::Vector2d(100.0 * x.x() / x.z() + 50.0, 100.0 * x.y() / x.z() + 50.0);
        };
        Eigen::Matrix<double, 2, 3> j;
        for (int c = 0; c < 3; ++c) {
            Vec3 e = Vec3::Zero();
            e[c] = 1e-6;
            j.col(c) = (proj(g.mean + e) - proj(g.mean - e)) / 2e-6;
        }
        Eigen::Matrix2d expected = j * g.covariance * j.transpose();
        expected += kScreenDilation * Eigen::Matrix2d::Identity();
        EXPECT_LE((p.covariance - expected).cwiseAbs().maxCoeff(), 1e-5 * expected.norm());
        EXPECT_LE((p.center - proj(g.mean)).norm(), 1e-12);
    }
}

TEST(Render, EmptyMixtureIsBackground) {
    RenderOptions ro;
    ro.background = Vec3(0.2, 0.4, 0.6);
    const auto r = render(GaussianMixture{}, make_camera(40, 30), ro);
    ASSERT_EQ(r.pixel_count(), 1200u);
    for (int y = 0; y < 30; ++y)
        for (int x = 0; x < 40; ++x) EXPECT_EQ(r.color_at(x, y), ro.background);
    for (double a : r.alpha) EXPECT_EQ(a, 0.0);
    EXPECT_EQ(r.valid_count(), 0u);
}

TEST(Render, SingleOpaqueRedSplat) {
    GaussianMixture m;
    m.components = {splat(Vec3(0, 0, 2), 0.1, 0.99, Vec3(1, 0, 0))};
    const auto r = render(m, make_camera());
    const Vec3 c = r.color_at(50, 50);
    EXPECT_LE((c - Vec3(1, 0, 0)).cwiseAbs().maxCoeff(), 0.02);
    // Center pixel sits exactly on the projected mean: alpha = opacity.
    EXPECT_NEAR(c.x(), 0.99, 1e-12);
    EXPECT_NEAR(r.alpha[r.index(50, 50)], 0.99, 1e-12);
    EXPECT_NEAR(r.depth[r.index(50, 50)], 2.0, 0.02);
    EXPECT_TRUE(r.valid_mask[r.index(50, 50)]);
}

TEST(Render, NearSplatOccludesFar) {
    GaussianMixture m;
    // Far one listed first so ordering must come from the sort.
    m.components = {splat(Vec3(0, 0, 4), 0.3, 0.9, Vec3(0, 0, 1)), splat(Vec3(0, 0, 2), 0.1, 0.99, Vec3(0, 1, 0))};
    const auto r = render(m, make_camera());
    const Vec3 c = r.color_at(50, 50);
    EXPECT_LE((c - Vec3(0, 1, 0)).cwiseAbs().maxCoeff(), 0.03);
    // Hand composite: 0.99 green, then 0.01 * 0.9 blue.
    EXPECT_NEAR(c.y(), 0.99, 1e-12);
    EXPECT_NEAR(c.z(), 0.01 * 0.9, 1e-12);
    const double alpha = 0.99 + 0.01 * 0.9;
    EXPECT_NEAR(r.alpha[r.index(50, 50)], alpha, 1e-12);
    EXPECT_NEAR(r.depth[r.index(50, 50)], (0.99 * 2.0 + 0.009 * 4.0) / alpha, 1e-12);
    EXPECT_NEAR(r.depth[r.index(50, 50)], 2.0, 0.05 * 2.0);
}

TEST(Render, SkipsSplatsBehindCamera) {
    GaussianMixture m;
    m.components = {splat(Vec3(0, 0, -2), 0.1, 0.99, Vec3(1, 0, 0))};
    const auto r = render(m, make_camera());
    EXPECT_EQ(r.valid_count(), 0u);
}

TEST(Render, CompositingBoundAndMonotoneAlpha) {
    std::mt19937_64 rng(41);
    auto m = scene(rng, 60);
    const Camera cam = make_camera(64, 48, 60.0);
    auto prev = render(m, cam);
    for (int t = 0; t < 10; ++t) {
        auto extra = scene(rng, 1).components[0];
        m.components.push_back(extra);
        const auto next = render(m, cam);
        for (std::size_t i = 0; i < next.alpha.size(); ++i) {
            EXPECT_GE(next.alpha[i], 0.0);
            EXPECT_LE(next.alpha[i], 1.0);
            EXPECT_GE(next.alpha[i], prev.alpha[i] - 1e-15);
            EXPECT_EQ(next.valid_mask[i] != 0, next.alpha[i] > 0.5);
            if (next.valid_mask[i]) EXPECT_GT(next.depth[i], 0.0);
        }
        prev = next;
    }
}

TEST(Render, Deterministic) {
    std::mt19937_64 rng(42);
    const auto m = scene(rng, 200);
    const Camera cam = make_camera(80, 70, 70.0);
    const auto a = render(m, cam);
    const auto b = render(m, cam);
    EXPECT_EQ(a.rgb, b.rgb);
    EXPECT_EQ(a.depth, b.depth);
    EXPECT_EQ(a.alpha, b.alpha);
    EXPECT_EQ(a.valid_mask, b.valid_mask);
}

TEST(Render, DepthOrderingPicksNearerSplat) {
    for (double near : {1.0, 2.0, 3.0}) {
        GaussianMixture m;
        m.components = {splat(Vec3(0, 0, near * 3), 0.2, 0.99, Vec3(1, 1, 1)),
                        splat(Vec3(0, 0, near), 0.05, 0.99, Vec3(1, 1, 1))};
        const auto r = render(m, make_camera());
        EXPECT_NEAR(r.depth[r.index(50, 50)], near, 0.05 * near);
    }
}

TEST(PhotometricLoss, IdenticalIsZero) {
    std::mt19937_64 rng(43);
    const auto r = render(scene(rng, 30), make_camera(32, 32, 30.0));
    EXPECT_EQ(photometric_loss(r, r), 0.0);
}

TEST(PhotometricLoss, ConstantOffset) {
    auto a = blank(10, 7);
    auto b = a;
    for (auto& v : b.rgb) v += 0.1;
    EXPECT_NEAR(photometric_loss(a, b), 0.1, 1e-15);
}

TEST(PhotometricLoss, MatchesDirectSummation) {
    std::mt19937_64 rng(44);
    const Camera cam = make_camera(48, 40, 45.0);
    for (int t = 0; t < 5; ++t) {
        const auto a = render(scene(rng, 40), cam);
        const auto b = render(scene(rng, 40), cam);
        double s = 0.0;
        for (int y = 0; y < a.height; ++y)
            for (int x = 0; x < a.width; ++x)
                s += (a.color_at(x, y) - b.color_at(x, y)).cwiseAbs().sum();
        EXPECT_NEAR(photometric_loss(a, b), s / (3.0 * a.width * a.height), 1e-12);
    }
}

TEST(PhotometricLoss, DimensionMismatch) {
    try {
        photometric_loss(blank(4, 4), blank(4, 5));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
    }
    EXPECT_THROW(depth_loss(blank(4, 4), blank(5, 4)), Error);
}

TEST(DepthLoss, UniformOffsetOnValidMask) {
    auto a = blank(6, 6);
    for (auto& d : a.depth) d = 2.0;
    for (auto& m : a.valid_mask) m = 1;
    auto b = a;
    for (auto& d : b.depth) d += 0.5;
    const auto l = depth_loss(a, b);
    EXPECT_NEAR(l.value, 0.5, 1e-15);
    EXPECT_EQ(l.valid_pixels, 36u);
    EXPECT_FALSE(l.empty_intersection);
    EXPECT_EQ(depth_loss(a, a).value, 0.0);
}

TEST(DepthLoss, DisjointMasksFlagged) {
    auto a = blank(4, 4);
    auto b = blank(4, 4);
    for (std::size_t i = 0; i < 16; ++i) (i < 8 ? a : b).valid_mask[i] = 1;
    const auto l = depth_loss(a, b);
    EXPECT_EQ(l.value, 0.0);
    EXPECT_TRUE(l.empty_intersection);
}

TEST(DepthLoss, MatchesDirectSummation) {
    std::mt19937_64 rng(45);
    const Camera cam = make_camera(48, 40, 45.0);
    for (int t = 0; t < 5; ++t) {
        const auto a = render(scene(rng, 80), cam);
        const auto b = render(scene(rng, 80), cam);
        double s = 0.0;
        std::size_t n = 0;
        for (int y = 0; y < a.height; ++y) {
            for (int x = 0; x < a.width; ++x) {
                const auto i = a.index(x, y);
                if (a.alpha[i] > 0.5 && b.alpha[i] > 0.5) {
                    s += std::abs(a.depth[i] - b.depth[i]);
                    ++n;
                }
            }
        }
        ASSERT_GT(n, 0u);
        const auto l = depth_loss(a, b);
        EXPECT_EQ(l.valid_pixels, n);
        EXPECT_NEAR(l.value, s / n, 1e-12);
    }
}

TEST(Downsample, PhotometricLossStableUnderHalving) {
    std::mt19937_64 rng(46);
    const Camera cam = make_camera(96, 80, 90.0);
    for (int t = 0; t < 5; ++t) {
        const auto a = render(scene(rng, 60), cam);
        const auto b = render(scene(rng, 60), cam);
        const double full = photometric_loss(a, b);
        const double half = photometric_loss(downsample2x(a), downsample2x(b));
        EXPECT_NEAR(full, half, 0.02);
    }
}

TEST(MeanValidDepth, NulloptWhenUncovered) {
    EXPECT_FALSE(mean_valid_depth(blank(10, 10)).has_value());
    auto r = blank(10, 10);
    r.valid_mask[3] = 1;
    r.depth[3] = 4.0;
    ASSERT_TRUE(mean_valid_depth(r).has_value());
    EXPECT_EQ(*mean_valid_depth(r), 4.0);
}

// --- Golden images -------------------------------------------------------------------
// Frozen by tests/golden/make_golden.py, an independent per-pixel rasterizer.

namespace {

GaussianComponent oriented(const Vec3& mu, const Vec3& sd, const Vec3& axis, double angle, double opacity,
                           const Vec3& color) {
    GaussianComponent g;
    const Mat3 r = quat_to_rotation(Quaternion::from_axis_angle(axis, angle));
    g.mean = mu;
    g.covariance = r * sd.cwiseAbs2().asDiagonal() * r.transpose();
    g.opacity = opacity;
    g.weight = 1.0;
    g.color = color;
    return g;
}

void expect_matches_golden(const std::string& name, const GaussianMixture& m, const Vec3& bg) {
    RenderOptions ro;
    ro.background = bg;
    const auto r = render(m, make_camera(64, 48, 60.0), ro);
    const std::string dir = SPLATREG_GOLDEN_DIR;
    const auto rgb = read_pfm(dir + "/" + name + "_rgb.pfm");
    const auto depth = read_pfm(dir + "/" + name + "_depth.pfm");
    const auto alpha = read_pfm(dir + "/" + name + "_alpha.pfm");
    ASSERT_EQ(rgb.width, r.width);
    ASSERT_EQ(rgb.height, r.height);
    ASSERT_EQ(rgb.channels, 3);
    double worst = 0.0;
    for (std::size_t i = 0; i < r.rgb.size(); ++i) worst = std::max(worst, std::abs(r.rgb[i] - rgb.data[i]));
    for (std::size_t i = 0; i < r.pixel_count(); ++i) {
        worst = std::max(worst, std::abs(r.depth[i] - depth.data[i]) / std::max(1.0, std::abs(r.depth[i])));
        worst = std::max(worst, std::abs(r.alpha[i] - alpha.data[i]));
    }
    // float32 storage
    EXPECT_LE(worst, 1e-6) << name;
}

}  // namespace

TEST(Golden, EmptyScene) { expect_matches_golden("empty", GaussianMixture{}, Vec3(0.2, 0.4, 0.6)); }

TEST(Golden, SingleRedSplat) {
    GaussianMixture m;
    m.components = {oriented(Vec3(0, 0, 2), Vec3::Constant(0.12), Vec3(0, 0, 1), 0.0, 0.99, Vec3(1, 0, 0))};
    expect_matches_golden("single_red", m, Vec3::Zero());
}

TEST(Golden, TwoOverlappingSplats) {
    GaussianMixture m;
    m.components = {
        oriented(Vec3(0.3, 0.1, 4.0), Vec3(0.5, 0.25, 0.1), Vec3(1, 1, 0), 0.6, 0.9, Vec3(0, 0, 1)),
        oriented(Vec3(-0.05, 0.02, 2.0), Vec3(0.15, 0.08, 0.05), Vec3(0, 0.3, 1), 0.9, 0.99, Vec3(0, 1, 0))};
    expect_matches_golden("two_overlapping", m, Vec3::Constant(0.1));
}
