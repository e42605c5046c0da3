#include <gtest/gtest.h>

#include <random>

#include "splatreg/registration.hpp"
#include "test_support.hpp"

using namespace splatreg;
using splatreg::testing::random_mixture;
using splatreg::testing::random_sim3;

namespace {

SinkhornConfig tight(double eps) {
    SinkhornConfig c;
    c.epsilon = eps;
    c.epsilon_scale = EpsilonScale::absolute;
    c.max_iterations = 20000;
    c.convergence_delta = 1e-13;
    return c;
}

double regularized_objective_at(const GaussianMixture& a, const GaussianMixture& b, const ParamVector& v,
                                const SinkhornConfig& cfg) {
    const CostMatrix c = build_cost_matrix(a, sim3_apply(params_from_vector(v), b));
    return sinkhorn_log(c, a.weights(), b.weights(), cfg).regularized_objective;
}

Camera front_camera(int w = 64, int h = 64, double f = 60.0, double distance = 4.0) {
    Camera cam;
    cam.intrinsics = {f, f, w / 2.0, h / 2.0, w, h};
    cam.translation = Vec3(0, 0, distance);
    return cam;
}

}  // namespace

TEST(Mw2Gradient, MatchesCentralDifferences) {
    std::mt19937_64 rng(50);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = random_mixture(rng, 20);
        const auto b = random_mixture(rng, 20);
        const auto theta = random_sim3(rng, 0.5, 0.3, 0.2);
        const auto cfg = tight(0.3);
        const auto g = mw2_loss_and_gradient(a, b, theta, cfg);
        ASSERT_TRUE(g.plan.converged);
        ParamVector fd{};
        const double h = 1e-5;
        const ParamVector base = theta.to_array();
        for (int j = 0; j < 8; ++j) {
            ParamVector p = base, m = base;
            p[j] += h;
            m[j] -= h;
            fd[j] = (regularized_objective_at(a, b, p, cfg) - regularized_objective_at(a, b, m, cfg)) / (2 * h);
        }
        double norm = 0.0;
        for (double x : fd) norm += x * x;
        norm = std::sqrt(norm);
        for (int j = 0; j < 8; ++j) {
            const double denom = std::max(std::abs(fd[j]), 1e-2 * norm);
            EXPECT_LE(std::abs(g.gradient[j] - fd[j]) / denom, 1e-4) << "trial " << trial << " coord " << j;
        }
    }
}

TEST(Mw2Gradient, QuaternionBlockIsTangent) {
    std::mt19937_64 rng(51);
    const auto a = random_mixture(rng, 10);
    const auto b = random_mixture(rng, 12);
    const auto theta = random_sim3(rng);
    const auto g = mw2_loss_and_gradient(a, b, theta, tight(0.2));
    const double d = g.gradient[0] * theta.q.w + g.gradient[1] * theta.q.x + g.gradient[2] * theta.q.y +
                     g.gradient[3] * theta.q.z;
    EXPECT_NEAR(d, 0.0, 1e-12);
}

TEST(Mw2Gradient, StationaryWhenAligned) {
    std::mt19937_64 rng(52);
    auto b = random_mixture(rng, 15);
    for (auto& c : b.components) c.covariance *= 0.05;  // well separated components
    const auto theta0 = random_sim3(rng, 1.0, 0.5, 0.3);
    const auto a = sim3_apply(theta0, b);
    const auto cfg = tight(1e-3);
    const auto g = mw2_loss_and_gradient(a, b, theta0, cfg);
    double norm = 0.0;
    for (double x : g.gradient) norm += x * x;
    const double loss_scale = build_cost_matrix(a, b).mean();
    EXPECT_LE(std::sqrt(norm), 1e-4 * loss_scale);
}

TEST(Mw2Gradient, TranslationSignAlongX) {
    GaussianMixture a, b;
    for (int i = 0; i < 3; ++i) {
        GaussianComponent g;
        g.mean = Vec3(0, i, 0);
        g.covariance = 0.1 * Mat3::Identity();
        g.weight = 1.0 / 3.0;
        a.components.push_back(g);
        g.mean.x() += 0.5;
        b.components.push_back(g);
    }
    const auto g = mw2_loss_and_gradient(a, b, Sim3Params{}, tight(0.01));
    // Loss decreases when moving b toward -x, so the gradient points along +x.
    EXPECT_GT(g.gradient[4], 0.0);
    EXPECT_NEAR(g.gradient[4], 1.0, 1e-6);
    EXPECT_NEAR(g.gradient[5], 0.0, 1e-9);
}

TEST(Mw2Gradient, RejectsUnnormalizedWeights) {
    std::mt19937_64 rng(53);
    auto a = random_mixture(rng, 4);
    a.components[0].weight *= 2.0;
    EXPECT_THROW(mw2_loss_and_gradient(a, random_mixture(rng, 4), Sim3Params{}, tight(0.1)), Error);
}

TEST(JointLoss, Mw2OnlyEqualsMw2Loss) {
    std::mt19937_64 rng(54);
    const auto a = random_mixture(rng, 10);
    const auto b = random_mixture(rng, 8);
    const auto theta = random_sim3(rng, 0.3, 0.2, 0.1);
    const JointLossWeights w{1.0, 0.0, 0.0};
    const auto cfg = tight(0.1);
    const auto l = joint_loss(a, b, theta, {}, w, cfg);
    EXPECT_EQ(l.total, mw2_distance(a, sim3_apply(theta, b), cfg).mw2_sq);
    EXPECT_EQ(l.total, l.mw2);
}

TEST(JointLoss, AlignedMapsRenderIdentically) {
    std::mt19937_64 rng(55);
    const auto a = random_mixture(rng, 20, 0.8);
    const Camera cams[] = {front_camera()};
    const auto l = joint_loss(a, a, Sim3Params{}, cams, JointLossWeights{}, tight(0.1));
    EXPECT_LE(l.photo, 1e-6);
    EXPECT_LE(l.depth, 1e-6);
}

TEST(JointLoss, WeightedSum) {
    const JointLossWeights w{1.0, 1.0, 0.5};
    EXPECT_NEAR(w.mw2 * 2.0 + w.photo * 0.1 + w.depth * 0.2, 2.2, 1e-15);
    std::mt19937_64 rng(56);
    const auto a = random_mixture(rng, 20, 0.8);
    const auto b = random_mixture(rng, 20, 0.8);
    const Camera cams[] = {front_camera(), front_camera(48, 48, 40.0, 5.0)};
    const auto l = joint_loss(a, b, Sim3Params{}, cams, w, tight(0.1));
    EXPECT_NEAR(l.total, l.mw2 + l.photo + 0.5 * l.depth, 1e-14);
    // Rendering terms are averages over the cameras.
    const auto ra0 = render(a, cams[0]), rb0 = render(b, cams[0]);
    const auto ra1 = render(a, cams[1]), rb1 = render(b, cams[1]);
    EXPECT_NEAR(l.photo, 0.5 * (photometric_loss(ra0, rb0) + photometric_loss(ra1, rb1)), 1e-14);
}

TEST(JointLoss, MissingCameras) {
    std::mt19937_64 rng(57);
    const auto a = random_mixture(rng, 5);
    try {
        joint_loss(a, a, Sim3Params{}, {}, JointLossWeights{}, tight(0.1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MissingCameras);
    }
}

TEST(JointLoss, RejectsAllZeroWeights) {
    std::mt19937_64 rng(58);
    const auto a = random_mixture(rng, 5);
    EXPECT_THROW(joint_loss(a, a, Sim3Params{}, {}, JointLossWeights{0, 0, 0}, tight(0.1)), Error);
}

TEST(InitialScale, IdenticalMapsGiveOne) {
    std::mt19937_64 rng(59);
    const auto a = random_mixture(rng, 40, 0.8);
    EXPECT_NEAR(estimate_initial_scale(a, a, front_camera()), 1.0, 1e-6);
}

TEST(InitialScale, HalvedAboutCameraCenterGivesTwo) {
    std::mt19937_64 rng(60);
    auto a = random_mixture(rng, 150, 0.8);
    for (auto& g : a.components) g.opacity = 0.9;
    const Camera cam = front_camera(64, 64, 50.0, 5.0);
    // Scale by 0.5 about the camera center: x -> c + 0.5 (x - c).
    Sim3Params half;
    half.log_s = std::log(0.5);
    half.t = 0.5 * cam.center();
    const auto b = sim3_apply(half, a);
    EXPECT_NEAR(estimate_initial_scale(a, b, cam), 2.0, 0.1);
}

TEST(InitialScale, EmptyMask) {
    std::mt19937_64 rng(61);
    const auto a = random_mixture(rng, 10, 0.5);
    Camera away = front_camera();
    away.translation = Vec3(0, 0, -10);  // everything behind the camera
    try {
        estimate_initial_scale(a, a, away);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyMask);
    }
}

TEST(OptimizerConfig, ValidatesLadder) {
    OptimizerConfig o;
    o.epsilon_ladder = {0.1, 0.1};
    EXPECT_THROW(o.validate(), Error);
    o.epsilon_ladder = {0.1, -0.01};
    EXPECT_THROW(o.validate(), Error);
    o.epsilon_ladder = {};
    EXPECT_THROW(o.validate(), Error);
    o.epsilon_ladder = {0.5, 0.05};
    EXPECT_NO_THROW(o.validate());
}
