#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "splatreg/pipeline.hpp"
#include "test_support.hpp"

using namespace splatreg;
using splatreg::testing::random_mixture;
using splatreg::testing::random_sim3;

namespace {

SinkhornConfig metric(double eps = 0.01) {
    SinkhornConfig c;
    c.epsilon = eps;
    c.max_iterations = 5000;
    c.convergence_delta = 1e-10;
    return c;
}

GaussianComponent blob(const Vec3& mean, double opacity, double var = 0.01) {
    GaussianComponent g;
    g.mean = mean;
    g.covariance = var * Mat3::Identity();
    g.opacity = opacity;
    return g;
}

/// Components of `entry` carried back to world coordinates.
std::vector<Vec3> world_means(const SubmapEntry& entry) {
    std::vector<Vec3> out;
    for (const auto& g : entry.mixture.components) out.push_back(entry.ground_truth->apply(g.mean));
    return out;
}

std::size_t count_shared(const std::vector<Vec3>& a, const std::vector<Vec3>& b) {
    std::size_t n = 0;
    for (const auto& p : a)
        for (const auto& q : b)
            if ((p - q).norm() < 1e-9) {
                ++n;
                break;
            }
    return n;
}

SyntheticSceneConfig scene(std::uint64_t seed, std::size_t submaps, double overlap = 0.5) {
    SyntheticSceneConfig sc;
    sc.seed = seed;
    sc.n_submaps = submaps;
    sc.overlap_fraction = overlap;
    return sc;
}

PairRegistrationConfig quick_mw2() {
    PairRegistrationConfig cfg;
    cfg.weights = {1.0, 0.0, 0.0};
    cfg.optimizer.max_steps = 5;
    return cfg;
}

}  // namespace

// --- synthetic generator -----------------------------------------------------

TEST(SyntheticScene, SameSeedIsBitIdentical) {
    const auto a = generate_synthetic_scene(scene(7, 3));
    const auto b = generate_synthetic_scene(scene(7, 3));
    ASSERT_EQ(a.submaps.size(), b.submaps.size());
    EXPECT_EQ(a.scene_extent, b.scene_extent);
    for (std::size_t k = 0; k < a.submaps.size(); ++k) {
        const auto& x = a.submaps[k];
        const auto& y = b.submaps[k];
        ASSERT_EQ(x.mixture.size(), y.mixture.size());
        for (std::size_t i = 0; i < x.mixture.size(); ++i) {
            EXPECT_EQ(x.mixture.components[i].mean, y.mixture.components[i].mean);
            EXPECT_EQ(x.mixture.components[i].covariance, y.mixture.components[i].covariance);
            EXPECT_EQ(x.mixture.components[i].weight, y.mixture.components[i].weight);
        }
        EXPECT_EQ(x.ground_truth->to_array(), y.ground_truth->to_array());
        ASSERT_EQ(x.cameras.size(), y.cameras.size());
        EXPECT_EQ(x.cameras[0].translation, y.cameras[0].translation);
    }
}

TEST(SyntheticScene, DifferentSeedsDiffer) {
    const auto a = generate_synthetic_scene(scene(1, 2));
    const auto b = generate_synthetic_scene(scene(2, 2));
    EXPECT_NE(a.submaps[0].mixture.components[0].mean, b.submaps[0].mixture.components[0].mean);
}

TEST(SyntheticScene, HalfOverlapSharesHalfTheComponents) {
    const auto m = generate_synthetic_scene(scene(11, 4, 0.5));
    ASSERT_EQ(m.submaps.size(), 4u);
    for (std::size_t k = 1; k < m.submaps.size(); ++k) {
        const auto prev = world_means(m.submaps[k - 1]);
        const auto cur = world_means(m.submaps[k]);
        const double shared = static_cast<double>(count_shared(prev, cur));
        EXPECT_NEAR(shared / static_cast<double>(prev.size()), 0.5, 0.05) << "pair " << k;
        EXPECT_NEAR(shared / static_cast<double>(cur.size()), 0.5, 0.05) << "pair " << k;
    }
}

TEST(SyntheticScene, GroundTruthMapsLocalToWorld) {
    const auto m = generate_synthetic_scene(scene(12, 2, 1.0));
    // Full overlap and no noise: both submaps hold the same world components.
    const auto a = world_means(m.submaps[0]);
    const auto b = world_means(m.submaps[1]);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LT((a[i] - b[i]).norm(), 1e-9);
    EXPECT_EQ(m.submaps[0].ground_truth->to_array(), Sim3Params{}.to_array());
}

TEST(SyntheticScene, PoseRangesRespected) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto m = generate_synthetic_scene(scene(seed, 2));
        const auto& gt = *m.submaps[1].ground_truth;
        EXPECT_LE(rotation_angle_between(gt.rotation(), Mat3::Identity()), 30.0 * M_PI / 180.0 + 1e-12);
        EXPECT_LE(gt.t.norm(), 0.5 * m.scene_extent + 1e-12);
        EXPECT_GE(gt.scale(), 0.5 - 1e-12);
        EXPECT_LE(gt.scale(), 2.0 + 1e-12);
    }
}

TEST(SyntheticScene, ConsecutiveSubmapsShareAView) {
    const auto m = generate_synthetic_scene(scene(13, 3));
    for (std::size_t k = 1; k < m.submaps.size(); ++k) {
        const Camera back = transform_camera(*m.submaps[k - 1].ground_truth, m.submaps[k - 1].cameras.back());
        const Camera front = transform_camera(*m.submaps[k].ground_truth, m.submaps[k].cameras.front());
        EXPECT_LT((back.center() - front.center()).norm(), 1e-9);
        EXPECT_LT((back.rotation - front.rotation).norm(), 1e-9);
    }
}

TEST(SyntheticScene, RejectsInvalidParameters) {
    auto bad = scene(0, 2);
    bad.n_components = 5;
    EXPECT_THROW(generate_synthetic_scene(bad), Error);
    bad = scene(0, 2, 0.0);
    EXPECT_THROW(generate_synthetic_scene(bad), Error);
    bad = scene(0, 2, 1.5);
    EXPECT_THROW(generate_synthetic_scene(bad), Error);
    bad = scene(0, 2);
    bad.noise = -0.1;
    EXPECT_THROW(generate_synthetic_scene(bad), Error);
    bad = scene(0, 0);
    EXPECT_THROW(generate_synthetic_scene(bad), Error);
}

// --- merge ---------------------------------------------------------------------

TEST(MergeMaps, DisjointSingletons) {
    GaussianMixture a, b;
    a.components.push_back(blob(Vec3(0, 0, 0), 0.6));
    b.components.push_back(blob(Vec3(5, 0, 0), 0.2));
    const auto m = merge_maps(normalize_weights(a), normalize_weights(b), Sim3Params{});
    ASSERT_EQ(m.size(), 2u);
    EXPECT_NEAR(m.components[0].weight, 0.75, 1e-15);
    EXPECT_NEAR(m.components[1].weight, 0.25, 1e-15);
}

TEST(MergeMaps, SelfUnderIdentityHalvesWeights) {
    std::mt19937_64 rng(1);
    const auto g = random_mixture(rng, 12);
    const auto m = merge_maps(g, g, Sim3Params{});
    ASSERT_EQ(m.size(), 24u);
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_NEAR(m.components[i].weight, 0.5 * g.components[i].weight, 1e-15);
        EXPECT_NEAR(m.components[i + g.size()].weight, 0.5 * g.components[i].weight, 1e-15);
    }
}

TEST(MergeMaps, AppliesThetaAndKeepsUnitMass) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_mixture(rng, 7);
        const auto b = random_mixture(rng, 9);
        const auto theta = random_sim3(rng);
        const auto m = merge_maps(a, b, theta);
        ASSERT_EQ(m.size(), 16u);
        EXPECT_NEAR(m.total_weight(), 1.0, 1e-9);
        EXPECT_LT((m.components[7].mean - theta.apply(b.components[0].mean)).norm(), 1e-12);
    }
}

TEST(MergeMaps, MergedIsCloserToMainThanPlacedSub) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const auto main = random_mixture(rng, 15);
        const auto sub = random_mixture(rng, 15);
        const auto theta = random_sim3(rng, 0.5, 0.5, 0.2);
        const auto merged = merge_maps(main, sub, theta);
        const auto placed = normalize_weights(sim3_apply(theta, sub));
        EXPECT_LE(mw2_distance(merged, main, metric()).mw2_sq, mw2_distance(placed, main, metric()).mw2_sq);
    }
}

// --- prune -----------------------------------------------------------------------

TEST(Prune, WellSeparatedOpaqueMapUnchanged) {
    GaussianMixture g;
    for (int i = 0; i < 5; ++i) g.components.push_back(blob(Vec3(i, 0, 0), 0.5 + 0.05 * i));
    g = normalize_weights(g);
    const auto p = prune(g);
    ASSERT_EQ(p.size(), g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        EXPECT_EQ(p.components[i].mean, g.components[i].mean);
        EXPECT_NEAR(p.components[i].weight, g.components[i].weight, 1e-15);
    }
}

TEST(Prune, DropsBelowOpacityFloor) {
    GaussianMixture g;
    g.components.push_back(blob(Vec3(0, 0, 0), 0.8));
    g.components.push_back(blob(Vec3(1, 0, 0), 0.001));
    g.components.push_back(blob(Vec3(2, 0, 0), 0.4));
    const auto p = prune(normalize_weights(g));
    ASSERT_EQ(p.size(), 2u);
    EXPECT_EQ(p.components[1].mean, Vec3(2, 0, 0));
    EXPECT_NEAR(p.total_weight(), 1.0, 1e-12);
}

TEST(Prune, IdenticalPairKeepsOne) {
    GaussianMixture g;
    g.components.push_back(blob(Vec3(0, 0, 0), 0.5));
    g.components.push_back(blob(Vec3(0, 0, 0), 0.7));
    g.components.push_back(blob(Vec3(3, 0, 0), 0.6));
    const auto p = prune(normalize_weights(g));
    ASSERT_EQ(p.size(), 2u);
    EXPECT_EQ(p.components[0].opacity, 0.7);  // higher-opacity member survives
}

TEST(Prune, NearDuplicateNeedsSimilarCovariance) {
    PruneOptions o;
    o.dedup_radius = 0.1;
    GaussianMixture g;
    g.components.push_back(blob(Vec3(0, 0, 0), 0.5, 0.01));
    g.components.push_back(blob(Vec3(0.05, 0, 0), 0.4, 0.0105));  // 5% covariance change
    g.components.push_back(blob(Vec3(1, 0, 0), 0.5, 0.01));
    g.components.push_back(blob(Vec3(1.05, 0, 0), 0.4, 0.02));  // 100% change
    const auto p = prune(normalize_weights(g), o);
    EXPECT_EQ(p.size(), 3u);
}

TEST(Prune, NeverEmpties) {
    GaussianMixture g;
    g.components.push_back(blob(Vec3(0, 0, 0), 0.001));
    g.components.push_back(blob(Vec3(1, 0, 0), 0.003));
    const auto p = prune(normalize_weights(g));
    ASSERT_EQ(p.size(), 1u);
    EXPECT_EQ(p.components[0].opacity, 0.003);
    EXPECT_NEAR(p.components[0].weight, 1.0, 1e-15);
}

TEST(Prune, IdempotentWithFixedRadius) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        auto g = random_mixture(rng, 60, 0.5);
        for (int i = 0; i < 10; ++i) g.components.push_back(g.components[static_cast<std::size_t>(i)]);
        g.components[3].opacity = 0.002;
        g = normalize_weights(g);
        PruneOptions o;
        o.dedup_radius = 0.5 * median_nearest_neighbor_distance(g);
        const auto once = prune(g, o);
        const auto twice = prune(once, o);
        ASSERT_EQ(once.size(), twice.size());
        for (std::size_t i = 0; i < once.size(); ++i) {
            EXPECT_EQ(once.components[i].mean, twice.components[i].mean);
            EXPECT_NEAR(once.components[i].weight, twice.components[i].weight, 1e-15);
        }
        EXPECT_LT(once.size(), g.size());
    }
}

// --- ATE ---------------------------------------------------------------------------

TEST(Ate, IdenticalTrajectoriesGiveZero) {
    const std::vector<Vec3> t{{0, 0, 0}, {1, 0, 0}, {2, 1, 0}, {3, 1, 1}};
    EXPECT_LE(ate_rmse(t, t), 1e-12);
}

TEST(Ate, SimilarityTransformedGroundTruthGivesZero) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Vec3> gt, est;
        const auto theta = random_sim3(rng, 3.0, 2.0, 0.7);
        for (int i = 0; i < 12; ++i) {
            gt.push_back(splatreg::testing::random_point(rng, 2.0));
            est.push_back(theta.apply(gt.back()));
        }
        EXPECT_LE(ate_rmse(est, gt), 1e-9);
    }
}

TEST(Ate, LengthMismatch) {
    const std::vector<Vec3> a{{0, 0, 0}, {1, 0, 0}}, b{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
    try {
        ate_rmse(a, b);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
    }
}

TEST(Ate, TooShortRejected) {
    const std::vector<Vec3> a{{0, 0, 0}};
    EXPECT_THROW(ate_rmse(a, a), Error);
}

// Residual of a least-squares fit of the 7 similarity parameters to 3n noisy
// coordinates: E[ATE^2] = sigma^2 (3n - 7) / n for small sigma.
TEST(Ate, MonteCarloNoiseFloor) {
    const int n = 10;
    const double sigma = 0.01;
    std::vector<Vec3> gt;
    for (int i = 0; i < n; ++i) gt.emplace_back(0.5 * i, std::sin(0.7 * i), 0.2 * i * i / n);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> noise(0.0, sigma);
    double sum_sq = 0.0;
    const int seeds = 100;
    for (int s = 0; s < seeds; ++s) {
        std::vector<Vec3> est = gt;
        for (auto& p : est) p += Vec3(noise(rng), noise(rng), noise(rng));
        const double e = ate_rmse(est, gt);
        sum_sq += e * e;
    }
    const double measured = std::sqrt(sum_sq / seeds);
    const double expected = sigma * std::sqrt((3.0 * n - 7.0) / n);
    EXPECT_NEAR(measured / expected, 1.0, 0.15);
}

// --- pair registration -------------------------------------------------------------

TEST(RegisterPair, SelfRegistrationStaysAtIdentity) {
    const auto m = generate_synthetic_scene(scene(20, 1));
    const auto& g = m.submaps[0];
    const auto r = register_pair(g.mixture, g.mixture, g.cameras, quick_mw2(), &g.cameras.front(), Sim3Params{});
    const auto e = pose_error(r.theta, Sim3Params{});
    EXPECT_LT(e.rotation_deg, 0.05);
    EXPECT_LT(e.translation, 1e-3 * m.scene_extent);
    EXPECT_LT(e.scale_relative, 5e-3);
    // Entropic floor: well below the mean pairwise cost.
    const auto placed = normalize_weights(sim3_apply(r.theta, g.mixture));
    const double floor = mw2_distance(g.mixture, placed, metric(0.005)).mw2_sq;
    EXPECT_LT(floor, 0.01 * build_cost_matrix(g.mixture, g.mixture).mean());
}

TEST(RegisterPair, RecoversKnownTransformFullOverlap) {
    for (std::uint64_t seed : {21u, 22u}) {
        const auto m = generate_synthetic_scene(scene(seed, 2, 1.0));
        const auto& a = m.submaps[0];
        const auto& b = m.submaps[1];
        const auto r = register_pair(a.mixture, b.mixture, b.cameras, quick_mw2());
        const auto e = pose_error(r.theta, *b.ground_truth);
        EXPECT_LT(e.rotation_deg, 1.0) << "seed " << seed;
        EXPECT_LT(e.scale_relative, 0.01) << "seed " << seed;
        EXPECT_LT(e.translation, 0.01 * m.scene_extent) << "seed " << seed;
    }
}

TEST(RegisterPair, HalfOverlapWithSharedView) {
    for (std::uint64_t seed : {23u, 24u}) {
        const auto m = generate_synthetic_scene(scene(seed, 2, 0.5));
        const auto& a = m.submaps[0];
        const auto& b = m.submaps[1];
        const auto r = register_pair(a.mixture, b.mixture, b.cameras, quick_mw2(), &a.cameras.back());
        EXPECT_LT(pose_error(r.theta, *b.ground_truth).rotation_deg, 3.0) << "seed " << seed;
    }
}

TEST(RegisterPair, RejectsEmptyAndNonFinite) {
    const auto m = generate_synthetic_scene(scene(25, 1));
    const auto& g = m.submaps[0];
    try {
        register_pair(GaussianMixture{}, g.mixture, g.cameras, quick_mw2());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyMixture);
    }
    auto bad = g.mixture;
    bad.components[0].mean.x() = std::nan("");
    EXPECT_THROW(register_pair(g.mixture, bad, g.cameras, quick_mw2()), Error);
}

TEST(RegisterPair, JointLossNeedsCameras) {
    const auto m = generate_synthetic_scene(scene(26, 1));
    const auto& g = m.submaps[0];
    PairRegistrationConfig cfg;
    try {
        register_pair(g.mixture, g.mixture, {}, cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::MissingCameras);
    }
}

// --- incremental pipeline ------------------------------------------------------------

TEST(RunIncremental, FourSubmapTrajectory) {
    const auto m = generate_synthetic_scene(scene(30, 4));
    PipelineConfig cfg;
    cfg.registration = quick_mw2();
    const auto r = run_incremental(m, cfg);
    ASSERT_EQ(r.trajectory_estimated.size(), 4u);
    ASSERT_EQ(r.trajectory_ground_truth.size(), 4u);
    for (const auto& o : r.submaps) EXPECT_TRUE(o.accepted) << o.error;
    ASSERT_TRUE(r.ate_rmse.has_value());
    EXPECT_LT(*r.ate_rmse, 0.01 * m.scene_extent);
    EXPECT_LE(r.map_size_after_prune, r.map_size_before_prune);
    EXPECT_NEAR(r.merged.total_weight(), 1.0, 1e-9);
}

TEST(RunIncremental, RegistrationNeverWorsensMetric) {
    const auto m = generate_synthetic_scene(scene(31, 3));
    PipelineConfig cfg;
    cfg.registration = quick_mw2();
    const auto r = run_incremental(m, cfg);
    for (std::size_t k = 1; k < r.submaps.size(); ++k) {
        ASSERT_TRUE(r.submaps[k].accepted);
        EXPECT_LE(r.submaps[k].mw2_final, r.submaps[k].mw2_initial) << "submap " << k;
    }
}

TEST(RunIncremental, TwoIdenticalSubmaps) {
    auto m = generate_synthetic_scene(scene(32, 1));
    m.submaps.push_back(m.submaps[0]);
    PipelineConfig cfg;
    cfg.registration = quick_mw2();
    const auto r = run_incremental(m, cfg);
    ASSERT_EQ(r.trajectory_estimated.size(), 2u);
    // Entropic smoothing leaves a small bias even for identical maps.
    EXPECT_LT((r.trajectory_estimated[0].position - r.trajectory_estimated[1].position).norm(),
              0.01 * m.scene_extent);
    ASSERT_TRUE(r.ate_rmse.has_value());
    EXPECT_LT(*r.ate_rmse, 0.01 * m.scene_extent);
}

TEST(RunIncremental, CorruptedSubmapIsSkipped) {
    auto m = generate_synthetic_scene(scene(33, 4));
    for (auto& g : m.submaps[2].mixture.components) g.mean.x() = std::nan("");
    PipelineConfig cfg;
    cfg.registration = quick_mw2();
    const auto r = run_incremental(m, cfg);
    ASSERT_EQ(r.submaps.size(), 4u);
    EXPECT_FALSE(r.submaps[2].accepted);
    EXPECT_FALSE(r.submaps[2].error.empty());
    EXPECT_TRUE(r.submaps[1].accepted);
    EXPECT_TRUE(r.submaps[3].accepted) << r.submaps[3].error;
    EXPECT_FALSE(r.trajectory_valid[2]);
    EXPECT_EQ(r.trajectory_estimated.size(), 4u);
}

TEST(RunIncremental, DeterministicPerSeed) {
    const auto m = generate_synthetic_scene(scene(34, 3));
    PipelineConfig cfg;
    cfg.registration = quick_mw2();
    const auto a = run_incremental(m, cfg);
    const auto b = run_incremental(m, cfg);
    ASSERT_EQ(a.submaps.size(), b.submaps.size());
    for (std::size_t k = 0; k < a.submaps.size(); ++k) {
        EXPECT_EQ(a.submaps[k].result.theta.to_array(), b.submaps[k].result.theta.to_array());
        EXPECT_EQ(a.submaps[k].result.mw2_history, b.submaps[k].result.mw2_history);
    }
    EXPECT_EQ(*a.ate_rmse, *b.ate_rmse);
    EXPECT_EQ(a.merged.size(), b.merged.size());
}

TEST(RunIncremental, NeedsTwoSubmaps) {
    auto m = generate_synthetic_scene(scene(35, 1));
    EXPECT_THROW(run_incremental(m), Error);
}
