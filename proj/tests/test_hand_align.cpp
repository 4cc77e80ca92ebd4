#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "retarget/hand_align.hpp"
#include "retarget/synth.hpp"
#include "test_support.hpp"

using namespace retarget;
using namespace testing_support;

namespace {

Observation observation(const SynthFixture& fx, std::size_t f) {
  return {fx.clouds[f], fx.depths[f], fx.masks[f]};
}

std::vector<Observation> observations(const SynthFixture& fx) {
  std::vector<Observation> out;
  for (std::size_t f = 0; f < fx.clouds.size(); ++f) out.push_back(observation(fx, f));
  return out;
}

SynthFixture fixture(int frames, double hand_scale = 1.0, double noise = 0.0, std::uint64_t seed = 3) {
  SynthParams p;
  p.n_frames = frames;
  p.hand_scale = hand_scale;
  p.noise_sigma = noise;
  p.seed = seed;
  return synth_hand_trajectory(p);
}

// Observed geometry of a cloud: depth image and mask from splatting.
Observation observe(const PointCloud& cloud, const CameraIntrinsics& K) {
  DepthImage d = splat_depth(cloud.points, K, 3);
  ImageMask m = ImageMask::from_valid(d);
  return {cloud, std::move(d), std::move(m)};
}

// Planar hand silhouette facing the camera at depth z: palm plus five finger strips.
PointCloud flat_hand_cloud(double z) {
  PointCloud c;
  auto strip = [&](double x0, double x1, double y0, double y1) {
    for (double x = x0; x <= x1 + 1e-12; x += 0.0005)
      for (double y = y0; y <= y1 + 1e-12; y += 0.0005) {
        c.points.push_back(Vec3(x, y, z));
        c.normals.push_back(Vec3(0, 0, -1));
      }
  };
  strip(-0.04, 0.04, -0.05, 0.04);
  for (int d = 0; d < 5; ++d) strip(-0.04 + 0.018 * d, -0.03 + 0.018 * d, -0.12, -0.05);
  return c;
}

double twist_norm(const RigidTransform& T) {
  return std::sqrt(T.rotation.rotation_vector().squaredNorm() + T.translation.squaredNorm());
}

}  // namespace

TEST(Calibration, IdentityWhenPredictionIsExact) {
  const SynthFixture fx = fixture(2);
  const auto r = calibrate_depth_sequence(observations(fx), fx.object_true, fx.object_true, {}, true,
                                          fx.intrinsics);
  EXPECT_NEAR(r.transform.scale, 1.0, 1e-12);
  EXPECT_LT(r.transform.rotation.angle_to(Rotation()), 1e-9);
  EXPECT_LT(r.transform.translation.norm(), 1e-12);
  for (std::size_t f = 0; f < 2; ++f) {
    for (std::size_t i = 0; i < fx.clouds[f].size(); ++i)
      EXPECT_LT((r.frames[f].cloud.points[i] - fx.clouds[f].points[i]).norm(), 1e-12);
    EXPECT_EQ(r.frames[f].depth.valid, fx.depths[f].valid);
    for (std::size_t i = 0; i < fx.depths[f].values.size(); ++i)
      EXPECT_NEAR(r.frames[f].depth.values[i], fx.depths[f].values[i], 1e-6);
  }
}

TEST(Calibration, HalfDepthRecoversScaleTwo) {
  SynthParams p;
  p.n_frames = 2;
  p.depth_scale = 0.5;
  const SynthFixture fx = synth_hand_trajectory(p);
  const auto r = calibrate_depth_sequence(observations(fx), fx.object_true, fx.object_pred, {}, true,
                                          fx.intrinsics);
  EXPECT_NEAR(r.transform.scale, 2.0, 1e-9);
  EXPECT_LT(r.transform.rotation.angle_to(Rotation()), 1e-9);
  EXPECT_LT(r.transform.translation.norm(), 1e-9);
  // Scaling about the camera centre keeps every sample on its pixel.
  const DepthImage& before = fx.depths[1];
  const DepthImage& after = r.frames[1].depth;
  EXPECT_EQ(after.valid, before.valid);
  for (std::size_t i = 0; i < before.values.size(); ++i)
    if (before.valid[i]) EXPECT_NEAR(after.values[i], 2.0f * before.values[i], 1e-5);
}

TEST(Calibration, RecoversRandomSimilarity) {
  std::mt19937_64 rng(4);
  const SynthFixture fx = fixture(1);
  for (int trial = 0; trial < 5; ++trial) {
    const SimilarityTransform G{1.3, random_rotation(rng, 0.1), random_vec(rng, -0.05, 0.05)};
    const PointCloud pred = fx.object_true.transformed(G);
    const auto r = calibrate_depth_sequence({}, fx.object_true, pred, {}, true, fx.intrinsics);
    const SimilarityTransform expect = G.inverse();
    EXPECT_NEAR(r.transform.scale, expect.scale, 1e-6);
    EXPECT_LT(r.transform.rotation.angle_to(expect.rotation), 1e-6);
    EXPECT_LT((r.transform.translation - expect.translation).norm(), 1e-6);
  }
}

TEST(Calibration, Errors) {
  PointCloud line;
  for (int i = 0; i < 10; ++i) line.points.push_back(Vec3(0.01 * i, 0, 0.5));
  const CameraIntrinsics K{500, 500, 320, 240, 640, 480};
  EXPECT_THROW(calibrate_depth_sequence({}, line, line, {}, true, K), RankDeficientError);
  PointCloud shorter = line;
  shorter.points.pop_back();
  EXPECT_THROW(calibrate_depth_sequence({}, line, shorter, {}, true, K), InvalidArgument);
}

TEST(IcpLoss, IdenticalCloudsGiveZero) {
  const SynthFixture fx = fixture(1);
  EXPECT_EQ(icp_alignment_loss(fx.clouds[0], fx.clouds[0], 1.0, RigidTransform{}, 0.01), 0.0);
}

TEST(IcpLoss, SingleQuadraticResidual) {
  PointCloud plane;
  for (int i = -5; i <= 5; ++i)
    for (int j = -5; j <= 5; ++j) {
      plane.points.push_back(Vec3(0.01 * i, 0.01 * j, 0));
      plane.normals.push_back(Vec3::UnitZ());
    }
  PointCloud one;
  const double h = 0.004;
  one.points.push_back(Vec3(0.0, 0.0, h));
  EXPECT_NEAR(icp_alignment_loss(one, plane, 1.0, RigidTransform{}, 0.01), 0.5 * h * h, 1e-15);
  EXPECT_THROW(icp_alignment_loss(PointCloud{}, plane, 1.0, RigidTransform{}, 0.01), LossUndefinedError);
}

TEST(IcpLoss, TruthBeatsIdentity) {
  std::mt19937_64 rng(5);
  const SynthFixture fx = fixture(1);
  for (int trial = 0; trial < 5; ++trial) {
    const double sigma = 1.1;
    const RigidTransform T{random_rotation(rng, 0.1), random_vec(rng, -0.01, 0.01)};
    // observed = sigma * T(model)  =>  model = T^-1(observed / sigma)
    const PointCloud model = fx.clouds[0].transformed(SimilarityTransform{1.0 / sigma, Rotation(), Vec3::Zero()})
                                 .transformed(T.inverse());
    const double at_truth = icp_alignment_loss(model, fx.clouds[0], sigma, T, 0.01);
    const double at_identity = icp_alignment_loss(model, fx.clouds[0], 1.0, RigidTransform{}, 0.01);
    EXPECT_LT(at_truth, 1e-20);
    EXPECT_LT(at_truth, at_identity);
  }
}

TEST(DepthLoss, ExamplesAndMasking) {
  const SynthFixture fx = fixture(1);
  const Observation obs = observation(fx, 0);
  const PointCloud& cloud = fx.clouds[0];
  EXPECT_EQ(depth_consistency_loss(cloud, 1.0, RigidTransform{}, obs.depth, obs.mask, fx.intrinsics, 3), 0.0);

  DepthImage offset = obs.depth;
  for (std::size_t i = 0; i < offset.values.size(); ++i)
    if (offset.valid[i]) offset.values[i] += 0.02f;
  EXPECT_NEAR(depth_consistency_loss(cloud, 1.0, RigidTransform{}, offset, obs.mask, fx.intrinsics, 3), 0.02,
              1e-6);

  const RigidTransform shift{Rotation(), Vec3(0, 0, 0.005)};
  const PointCloud flat = flat_hand_cloud(0.4);
  const Observation flat_obs = observe(flat, fx.intrinsics);
  EXPECT_NEAR(depth_consistency_loss(flat, 1.0, shift, flat_obs.depth, flat_obs.mask, fx.intrinsics, 3), 0.005,
              1e-4);

  // Pixels outside the mask do not matter.
  ImageMask half = obs.mask;
  for (int v = 0; v < half.height; ++v)
    for (int u = 0; u < half.width / 2; ++u) half.data[static_cast<std::size_t>(v) * half.width + u] = 0;
  const double before = depth_consistency_loss(cloud, 1.0, shift, obs.depth, half, fx.intrinsics, 3);
  DepthImage mutated = obs.depth;
  for (int v = 0; v < mutated.height; ++v)
    for (int u = 0; u < mutated.width / 2; ++u) mutated.set(u, v, 7.0f);
  EXPECT_EQ(depth_consistency_loss(cloud, 1.0, shift, mutated, half, fx.intrinsics, 3), before);

  const ImageMask empty(obs.mask.width, obs.mask.height, 0);
  EXPECT_THROW(depth_consistency_loss(cloud, 1.0, shift, obs.depth, empty, fx.intrinsics, 3), LossUndefinedError);
  const ImageMask wrong(10, 10, 1);
  EXPECT_THROW(depth_consistency_loss(cloud, 1.0, shift, obs.depth, wrong, fx.intrinsics, 3), InvalidArgument);
}

TEST(AlignFrame, OptimumAtStart) {
  const SynthFixture fx = fixture(1);
  const AlignConfig cfg;
  const HandAlignment a =
      align_hand_frame(fx.trajectory.frames[0], observation(fx, 0), fx.intrinsics, HandAlignment{}, cfg);
  EXPECT_NEAR(a.sigma, 1.0, 1e-3);
  EXPECT_LT(a.correction.rotation.angle_to(Rotation()), 1e-3);
  EXPECT_LT(a.correction.translation.norm(), 1e-3);
  EXPECT_LE(a.final_objective, a.initial_objective);
}

TEST(AlignFrame, RecoversScale) {
  for (double s : {1.0 / 1.2, 1.2}) {
    const SynthFixture fx = fixture(1, s);
    const HandAlignment a = align_hand_frame(fx.trajectory.frames[0], observation(fx, 0), fx.intrinsics,
                                             HandAlignment{}, AlignConfig{});
    EXPECT_NEAR(a.sigma / s, 1.0, 0.02) << s;
    EXPECT_LE(a.final_objective, a.initial_objective);
  }
}

TEST(AlignFrame, NoisyObservation) {
  const double noise = 0.002;
  const SynthFixture fx = fixture(3, 1.0, noise);
  for (std::size_t f = 0; f < 3; ++f) {
    const HandAlignment a = align_hand_frame(fx.trajectory.frames[f], observation(fx, f), fx.intrinsics,
                                             HandAlignment{}, AlignConfig{});
    EXPECT_TRUE(a.converged);
    EXPECT_LE(a.icp_residual, 3 * noise);
    EXPECT_LE(a.depth_residual, 3 * noise);
  }
}

TEST(AlignFrame, StrongRegularizerPinsIdentity) {
  const SynthFixture fx = fixture(1, 1.1);
  HandFrame hand = fx.trajectory.frames[0].transformed({1.0, Rotation(), Vec3(0.004, -0.003, 0.0)});
  AlignConfig cfg;
  cfg.lambda_reg = 1e6;
  const HandAlignment a = align_hand_frame(hand, observation(fx, 0), fx.intrinsics, HandAlignment{}, cfg);
  EXPECT_LT(twist_norm(a.correction), 1e-4);
}

TEST(AlignFrame, FailuresAreStructured) {
  const SynthFixture fx = fixture(1);
  Observation empty{PointCloud{}, fx.depths[0], fx.masks[0]};
  EXPECT_THROW(align_hand_frame(fx.trajectory.frames[0], empty, fx.intrinsics, HandAlignment{}, AlignConfig{}),
               AlignmentFailure);
  Observation no_mask = observation(fx, 0);
  no_mask.mask = ImageMask(no_mask.mask.width, no_mask.mask.height, 0);
  EXPECT_THROW(align_hand_frame(fx.trajectory.frames[0], no_mask, fx.intrinsics, HandAlignment{}, AlignConfig{}),
               AlignmentFailure);
  AlignConfig bad;
  bad.splat_footprint = 2;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(AlignmentObjectiveTest, AnalyticGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const SynthFixture fx = fixture(1, 1.05, 0.001);
  const AlignConfig cfg;
  const HandFrame& hand = fx.trajectory.frames[0];
  const SurfaceSampling s = model_sampling(hand, cfg);
  const PointCloud mano = sample_hand_surface(hand.joints, s);
  const KdTree tree = build_index(fx.clouds[0]);
  AlignmentObjective obj(mano, fx.clouds[0], tree, fx.depths[0], fx.masks[0], fx.intrinsics, cfg,
                         hand_capsules(hand.joints, s));
  std::uniform_real_distribution<double> u(-0.02, 0.02);
  for (int trial = 0; trial < 10; ++trial) {
    VecX p(7);
    p(0) = std::log(1.05) + u(rng);
    for (int i = 1; i < 7; ++i) p(i) = u(rng) / 4;
    obj.freeze(p);
    EXPECT_LT(check_gradient(obj.problem(), p), 1e-5) << trial;
  }
}

TEST(AlignTrajectory, StaticHandGivesMatchingAlignments) {
  const SynthFixture one = fixture(1, 1.1);
  HandTrajectory traj;
  std::vector<Observation> obs;
  for (int i = 0; i < 5; ++i) {
    HandFrame f = one.trajectory.frames[0];
    f.frame_index = i;
    traj.frames.push_back(f);
    obs.push_back(observation(one, 0));
  }
  const auto al = align_trajectory(traj, obs, one.intrinsics, AlignConfig{});
  ASSERT_EQ(al.size(), 5u);
  for (const auto& a : al) {
    EXPECT_NEAR(a.sigma, al[0].sigma, 1e-3);
    EXPECT_LT((a.correction.translation - al[0].correction.translation).norm(), 1e-3);
  }
}

TEST(AlignTrajectory, TracksApproachingHand) {
  // The hand translates 6 cm over the sequence; the estimator reports it 10% small.
  const SynthFixture fx = fixture(6, 1.1);
  const auto al = align_trajectory(fx.trajectory, observations(fx), fx.intrinsics, AlignConfig{});
  for (std::size_t t = 0; t < al.size(); ++t) {
    const HandFrame corrected = fx.trajectory.frames[t].transformed(al[t].similarity());
    double err = 0.0;
    for (std::size_t j = 0; j < kNumKeypoints; ++j)
      err += (corrected.joints[j] - fx.true_frames[t].joints[j]).norm() / kNumKeypoints;
    EXPECT_LT(err, 0.002) << t;
  }
}

TEST(AlignTrajectory, EmptyFrameIsNamed) {
  const SynthFixture fx = fixture(5);
  auto obs = observations(fx);
  obs[3].cloud = PointCloud{};
  try {
    align_trajectory(fx.trajectory, obs, fx.intrinsics, AlignConfig{});
    FAIL();
  } catch (const AlignmentFailure& e) {
    EXPECT_NE(std::string(e.what()).find("frame 3"), std::string::npos) << e.what();
  }
  obs.pop_back();
  EXPECT_THROW(align_trajectory(fx.trajectory, obs, fx.intrinsics, AlignConfig{}), InvalidArgument);
}

TEST(AlignTrajectory, IndependentModeMatchesPerFrameSolves) {
  const SynthFixture fx = fixture(3, 1.1);
  AlignConfig cfg;
  cfg.independent = true;
  const auto al = align_trajectory(fx.trajectory, observations(fx), fx.intrinsics, cfg);
  for (std::size_t t = 0; t < al.size(); ++t) {
    const HandAlignment solo =
        align_hand_frame(fx.trajectory.frames[t], observation(fx, t), fx.intrinsics, HandAlignment{}, cfg);
    EXPECT_EQ(al[t].sigma, solo.sigma);
    EXPECT_EQ(al[t].correction.translation, solo.correction.translation);
  }
}
