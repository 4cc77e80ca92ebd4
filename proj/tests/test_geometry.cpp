#include <gtest/gtest.h>

#include <algorithm>
#include <numbers>
#include <random>

#include "retarget/geometry.hpp"
#include "test_support.hpp"

using namespace retarget;
using namespace testing_support;

TEST(Huber, Branches) {
  EXPECT_EQ(huber(0.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(huber(0.5, 1.0), 0.125);
  EXPECT_DOUBLE_EQ(huber(2.0, 1.0), 1.5);
}

TEST(Huber, RejectsBadArguments) {
  EXPECT_THROW(huber(1.0, 0.0), InvalidArgument);
  EXPECT_THROW(huber(1.0, -1.0), InvalidArgument);
  EXPECT_THROW(huber(std::nan(""), 1.0), InvalidArgument);
  EXPECT_THROW(huber(INFINITY, 1.0), InvalidArgument);
}

TEST(Huber, EvenAndContinuousAtThreshold) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int i = 0; i < 1000; ++i) {
    const double r = u(rng);
    EXPECT_EQ(huber(r, 0.7), huber(-r, 0.7));
  }
  const double d = 0.3;
  EXPECT_NEAR(huber(d - 1e-12, d), huber(d + 1e-12, d), 1e-12);
  EXPECT_NEAR(huber_derivative(d - 1e-12, d), huber_derivative(d + 1e-12, d), 1e-11);
}

TEST(Huber, DerivativeMatchesCentralDifferences) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  const double delta = 1.0, h = 1e-6;
  for (int i = 0; i < 500; ++i) {
    const double r = u(rng);
    if (std::abs(std::abs(r) - delta) < 1e-3) continue;
    const double fd = (huber(r + h, delta) - huber(r - h, delta)) / (2.0 * h);
    const double an = huber_derivative(r, delta);
    EXPECT_LE(std::abs(fd - an), 1e-6 * std::max(1.0, std::abs(an)));
  }
}

TEST(Rotation, MatrixQuaternionRoundTrip) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const Rotation r = random_rotation(rng);
    EXPECT_NEAR(r.quaternion().norm(), 1.0, 1e-9);
    const Mat3 m = r.matrix();
    EXPECT_LT((Rotation::from_matrix(m).matrix() - m).norm(), 1e-9);
  }
}

TEST(Rotation, CompositionPathsAgree) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const Rotation a = random_rotation(rng), b = random_rotation(rng);
    EXPECT_LT(((a * b).matrix() - a.matrix() * b.matrix()).norm(), 1e-12);
    const Vec3 p = random_vec(rng);
    EXPECT_LT(((a * b) * p - a.matrix() * (b.matrix() * p)).norm(), 1e-12);
  }
}

TEST(Rotation, AxisAngleAndRpy) {
  const Rotation r = Rotation::from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2);
  EXPECT_LT((r * Vec3::UnitX() - Vec3::UnitY()).norm(), 1e-12);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const Rotation q = random_rotation(rng);
    const Vec3 rpy = q.rpy();
    EXPECT_LT(Rotation::from_rpy(rpy.x(), rpy.y(), rpy.z()).angle_to(q), 1e-9);
    EXPECT_LT(Rotation::from_rotation_vector(q.rotation_vector()).angle_to(q), 1e-9);
  }
  // URDF fixed-axis convention: roll about x first, then pitch about y, then yaw about z.
  const Mat3 expect = Eigen::AngleAxisd(0.3, Vec3::UnitZ()).toRotationMatrix() *
                      Eigen::AngleAxisd(0.2, Vec3::UnitY()).toRotationMatrix() *
                      Eigen::AngleAxisd(0.1, Vec3::UnitX()).toRotationMatrix();
  EXPECT_LT((Rotation::from_rpy(0.1, 0.2, 0.3).matrix() - expect).norm(), 1e-12);
}

TEST(Rotation, RejectsImproperMatrices) {
  Mat3 reflect = Mat3::Identity();
  reflect(2, 2) = -1.0;
  EXPECT_THROW(Rotation::from_matrix(reflect), InvalidArgument);
  EXPECT_THROW(Rotation::from_matrix(2.0 * Mat3::Identity()), InvalidArgument);
  EXPECT_THROW(Rotation::from_quaternion(0, 0, 0, 0), InvalidArgument);
}

TEST(RigidTransform, InverseAndAssociativity) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 100; ++i) {
    const RigidTransform a{random_rotation(rng), random_vec(rng)};
    const RigidTransform b{random_rotation(rng), random_vec(rng)};
    const RigidTransform c{random_rotation(rng), random_vec(rng)};
    EXPECT_LT(((a.inverse() * a).matrix() - Mat4::Identity()).norm(), 1e-9);
    EXPECT_LT((((a * b) * c).matrix() - (a * (b * c)).matrix()).norm(), 1e-12);
    EXPECT_LT(((a * b).matrix() - a.matrix() * b.matrix()).norm(), 1e-12);
  }
}

TEST(SimilarityTransform, ApplyAndInverse) {
  std::mt19937_64 rng(7);
  const SimilarityTransform T{1.7, random_rotation(rng), random_vec(rng)};
  const Vec3 p = random_vec(rng);
  EXPECT_LT((T.apply(p) - (1.7 * (T.rotation.matrix() * p) + T.translation)).norm(), 1e-12);
  EXPECT_LT((T.inverse().apply(T.apply(p)) - p).norm(), 1e-12);
}

namespace {
std::vector<Vec3> cube() {
  std::vector<Vec3> pts;
  for (int i = 0; i < 8; ++i) pts.emplace_back(i & 1, (i >> 1) & 1, (i >> 2) & 1);
  return pts;
}
}  // namespace

TEST(Umeyama, IdentityAndTranslation) {
  const auto src = cube();
  auto T = weighted_umeyama(src, src, true);
  EXPECT_NEAR(T.scale, 1.0, 1e-12);
  EXPECT_LT(T.rotation.angle_to(Rotation()), 1e-9);
  EXPECT_LT(T.translation.norm(), 1e-12);
  std::vector<Vec3> dst = src;
  for (auto& p : dst) p += Vec3(0, 0, 1);
  T = weighted_umeyama(src, dst, true);
  EXPECT_NEAR(T.scale, 1.0, 1e-12);
  EXPECT_LT((T.translation - Vec3(0, 0, 1)).norm(), 1e-12);
}

TEST(Umeyama, RecoversGenerator) {
  std::mt19937_64 rng(8);
  std::vector<Vec3> src(50), dst(50);
  const SimilarityTransform G{2.0, Rotation::from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2),
                              Vec3(1, 2, 3)};
  for (int i = 0; i < 50; ++i) {
    src[i] = random_vec(rng);
    dst[i] = G.apply(src[i]);
  }
  const auto T = weighted_umeyama(src, dst, true);
  EXPECT_NEAR(T.scale, 2.0, 1e-9);
  EXPECT_LT(T.rotation.angle_to(G.rotation), 1e-9);
  EXPECT_LT((T.translation - G.translation).norm(), 1e-9);
}

TEST(Umeyama, RandomRoundTripWithFourPoints) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> us(0.5, 2.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Vec3> src(4), dst(4);
    const SimilarityTransform G{us(rng), random_rotation(rng), random_vec(rng, -2, 2)};
    for (int i = 0; i < 4; ++i) {
      src[i] = random_vec(rng);
      dst[i] = G.apply(src[i]);
    }
    const auto T = weighted_umeyama(src, dst, true);
    EXPECT_NEAR(T.scale, G.scale, 1e-9);
    EXPECT_LT(T.rotation.angle_to(G.rotation), 1e-9);
    EXPECT_LT((T.translation - G.translation).norm(), 1e-9);
    EXPECT_GT(T.rotation.matrix().determinant(), 0.0);
  }
}

TEST(Umeyama, ZeroWeightEqualsRemoval) {
  std::mt19937_64 rng(10);
  std::vector<Vec3> src(20), dst(20);
  for (int i = 0; i < 20; ++i) {
    src[i] = random_vec(rng);
    dst[i] = 1.3 * src[i] + random_vec(rng, -0.05, 0.05);
  }
  std::vector<double> w(20, 1.0);
  w[7] = 0.0;
  const auto a = weighted_umeyama(src, dst, w, true);
  std::vector<Vec3> s2 = src, d2 = dst;
  s2.erase(s2.begin() + 7);
  d2.erase(d2.begin() + 7);
  const auto b = weighted_umeyama(s2, d2, true);
  EXPECT_NEAR(a.scale, b.scale, 1e-12);
  EXPECT_LT((a.rotation.matrix() - b.rotation.matrix()).norm(), 1e-12);
  EXPECT_LT((a.translation - b.translation).norm(), 1e-12);
}

TEST(Umeyama, RigidModeFixesScale) {
  std::mt19937_64 rng(11);
  std::vector<Vec3> src(10), dst(10);
  for (int i = 0; i < 10; ++i) {
    src[i] = random_vec(rng);
    dst[i] = 2.0 * src[i];
  }
  EXPECT_EQ(weighted_umeyama(src, dst, false).scale, 1.0);
}

TEST(Umeyama, ReflectionSuppressed) {
  std::mt19937_64 rng(12);
  std::vector<Vec3> src(30), dst(30);
  for (int i = 0; i < 30; ++i) {
    src[i] = random_vec(rng);
    dst[i] = Vec3(src[i].x(), src[i].y(), -src[i].z());
  }
  EXPECT_NEAR(weighted_umeyama(src, dst, true).rotation.matrix().determinant(), 1.0, 1e-9);
}

TEST(Umeyama, Errors) {
  std::vector<Vec3> line{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  EXPECT_THROW(weighted_umeyama(line, line, true), RankDeficientError);
  std::vector<Vec3> same(4, Vec3(1, 1, 1));
  EXPECT_THROW(weighted_umeyama(same, same, true), RankDeficientError);
  const auto c = cube();
  std::vector<Vec3> shorter(c.begin(), c.end() - 1);
  EXPECT_THROW(weighted_umeyama(c, shorter, true), InvalidArgument);
  std::vector<double> zero(c.size(), 0.0);
  EXPECT_THROW(weighted_umeyama(c, c, zero, true), InvalidArgument);
}

namespace {
CameraIntrinsics K640() { return {500.0, 500.0, 320.0, 240.0, 640, 480}; }
}  // namespace

TEST(Projection, Examples) {
  auto p = project_point({0, 0, 1}, K640());
  EXPECT_DOUBLE_EQ(p.u, 320.0);
  EXPECT_DOUBLE_EQ(p.v, 240.0);
  EXPECT_DOUBLE_EQ(p.depth, 1.0);
  p = project_point({0.1, 0, 1}, K640());
  EXPECT_DOUBLE_EQ(p.u, 370.0);
  EXPECT_THROW(project_point({0, 0, -1}, K640()), BehindCameraError);
  EXPECT_THROW(project_point({0, 0, 0}, K640()), BehindCameraError);
}

TEST(Projection, BackprojectInverts) {
  std::mt19937_64 rng(13);
  const auto K = K640();
  for (int i = 0; i < 100; ++i) {
    const Vec3 p = random_vec(rng, -0.3, 0.3) + Vec3(0, 0, 1.0);
    const auto px = project_point(p, K);
    EXPECT_LT((K.backproject(px.u, px.v, px.depth) - p).norm(), 1e-12);
  }
}

TEST(Intrinsics, Validation) {
  EXPECT_NO_THROW(K640().validate());
  EXPECT_THROW((CameraIntrinsics{0, 500, 320, 240, 640, 480}.validate()), InvalidArgument);
  EXPECT_THROW((CameraIntrinsics{500, 500, 640, 240, 640, 480}.validate()), InvalidArgument);
  EXPECT_THROW((CameraIntrinsics{500, 500, 320, 240, 0, 480}.validate()), InvalidArgument);
}

TEST(Splat, SinglePointAndZBuffer) {
  const std::vector<Vec3> one{{0, 0, 1}};
  const DepthImage d = splat_depth(one, K640(), 1);
  EXPECT_EQ(d.valid_count(), 1u);
  EXPECT_TRUE(d.is_valid(320, 240));
  EXPECT_EQ(d.at(320, 240), 1.0f);

  const std::vector<Vec3> two{{0, 0, 1.0}, {0, 0, 0.5}};
  const DepthImage z = splat_depth(two, K640(), 1);
  EXPECT_EQ(z.at(320, 240), 0.5f);
  EXPECT_EQ(splat_depth(std::vector<Vec3>{}, K640()).valid_count(), 0u);
  EXPECT_EQ(splat_depth(one, K640(), 3).valid_count(), 9u);
  EXPECT_THROW(splat_depth(one, K640(), 2), InvalidArgument);
}

TEST(Splat, DensePlaneCoversFrustum) {
  const auto K = K640();
  std::vector<Vec3> pts;
  for (int v = 0; v < K.height; ++v)
    for (int u = 0; u < K.width; ++u) pts.push_back(K.backproject(u, v, 2.0));
  const DepthImage d = splat_depth(pts, K, 3);
  EXPECT_EQ(d.valid_count(), static_cast<std::size_t>(K.width * K.height));
  for (int v = 0; v < K.height; ++v)
    for (int u = 0; u < K.width; ++u) ASSERT_NEAR(d.at(u, v), 2.0, 1e-6);
}

TEST(Splat, PermutationInvariant) {
  std::mt19937_64 rng(14);
  std::vector<Vec3> pts;
  for (int i = 0; i < 3000; ++i) pts.push_back(random_vec(rng, -0.2, 0.2) + Vec3(0, 0, 0.8));
  const DepthImage a = splat_depth(pts, K640(), 3);
  std::shuffle(pts.begin(), pts.end(), rng);
  const DepthImage b = splat_depth(pts, K640(), 3);
  EXPECT_EQ(a.values, b.values);
  EXPECT_EQ(a.valid, b.valid);
}
