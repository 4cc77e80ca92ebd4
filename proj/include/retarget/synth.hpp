#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <vector>

#include "retarget/geometry.hpp"
#include "retarget/hand_model.hpp"
#include "retarget/pointcloud.hpp"

namespace retarget {

// Kinematic description of a human digit in the wrist frame (fingers along
// +z, palm facing +x, index on +y).
struct DigitShape {
  Vec3 base;       // MCP for fingers, CMC for the thumb
  Vec3 direction;  // unflexed segment direction
  Vec3 palmar;     // flexion rotates direction toward this
  std::array<double, 3> lengths;
};

struct HumanHandShape {
  std::array<DigitShape, 5> digits;

  static HumanHandShape standard() {
    HumanHandShape s;
    auto finger = [](Vec3 base, Vec3 dir, std::array<double, 3> len) {
      dir.normalize();
      Vec3 palmar = Vec3::UnitX() - Vec3::UnitX().dot(dir) * dir;
      return DigitShape{base, dir, palmar.normalized(), len};
    };
    const Vec3 thumb_dir = Vec3(0.25, 0.55, 0.8).normalized();
    Vec3 thumb_palmar = Vec3(1.0, -0.6, 0.0);
    thumb_palmar -= thumb_palmar.dot(thumb_dir) * thumb_dir;
    s.digits[0] = {Vec3(0.012, 0.022, 0.025), thumb_dir, thumb_palmar.normalized(),
                   {0.045, 0.032, 0.028}};
    s.digits[1] = finger({0.0, 0.024, 0.094}, {0.0, 0.08, 1.0}, {0.042, 0.025, 0.021});
    s.digits[2] = finger({0.0, 0.002, 0.097}, {0.0, 0.0, 1.0}, {0.046, 0.028, 0.022});
    s.digits[3] = finger({0.0, -0.018, 0.092}, {0.0, -0.08, 1.0}, {0.043, 0.027, 0.022});
    s.digits[4] = finger({0.0, -0.036, 0.082}, {0.0, -0.16, 1.0}, {0.034, 0.020, 0.019});
    return s;
  }

  // Flexion is three cumulative angles per digit, ordered thumb..pinky.
  std::array<Vec3, kNumKeypoints> keypoints(const std::array<std::array<double, 3>, 5>& flex) const {
    std::array<Vec3, kNumKeypoints> out;
    out[kWrist] = Vec3::Zero();
    for (std::size_t d = 0; d < 5; ++d) {
      const DigitShape& g = digits[d];
      Vec3 p = g.base;
      out[static_cast<std::size_t>(digit_keypoint(static_cast<Digit>(d), 0))] = p;
      double phi = 0.0;
      for (int k = 0; k < 3; ++k) {
        phi += flex[d][static_cast<std::size_t>(k)];
        p += g.lengths[static_cast<std::size_t>(k)] *
             (std::cos(phi) * g.direction + std::sin(phi) * g.palmar);
        out[static_cast<std::size_t>(digit_keypoint(static_cast<Digit>(d), k + 1))] = p;
      }
    }
    return out;
  }
};

enum class ClosingCurve { kLinear, kSmoothstep };

struct SynthParams {
  int n_frames = 10;
  Vec3 approach_axis = Vec3::UnitZ();
  double approach_distance = 0.06;  // meters travelled by the wrist
  ClosingCurve closing = ClosingCurve::kSmoothstep;
  double noise_sigma = 0.0;         // depth noise, meters
  std::uint64_t seed = 0;
  double hand_scale = 1.0;          // true hand = hand_scale x estimated hand
  double depth_scale = 1.0;         // observed depth = depth_scale x true depth
  int cloud_points = 2000;
  int object_points = 600;
  int footprint = 3;
  double start_depth = 0.42;
  CameraIntrinsics intrinsics{500.0, 500.0, 320.0, 240.0, 640, 480};
};

struct SynthFixture {
  HandTrajectory trajectory;                 // as reported by a hand-pose estimator
  std::vector<HandFrame> true_frames;        // metric ground truth
  std::vector<PointCloud> clouds;            // observed hand clouds (with normals)
  std::vector<DepthImage> depths;
  std::vector<ImageMask> masks;
  CameraIntrinsics intrinsics;
  PointCloud object_true;
  PointCloud object_pred;                    // pointwise match of object_true
};

inline double closing_value(ClosingCurve c, double t) {
  t = std::clamp(t, 0.0, 1.0);
  return c == ClosingCurve::kLinear ? t : t * t * (3.0 - 2.0 * t);
}

// Flexion for a closing fraction in [0, 1].
inline std::array<std::array<double, 3>, 5> closing_flexion(double c) {
  const std::array<double, 3> thumb_open{0.10, 0.05, 0.05}, thumb_closed{0.50, 0.40, 0.30};
  const std::array<double, 3> open{0.10, 0.10, 0.05}, closed{0.90, 1.00, 0.60};
  std::array<std::array<double, 3>, 5> flex{};
  for (std::size_t d = 0; d < 5; ++d)
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& o = d == 0 ? thumb_open : open;
      const auto& e = d == 0 ? thumb_closed : closed;
      flex[d][k] = o[k] + c * (e[k] - o[k]);
    }
  return flex;
}

// Wrist orientation of the fixtures: fingers point up in the image and the
// palm faces the camera.
inline Rotation synth_wrist_rotation() {
  Mat3 m;
  m.col(0) = Vec3(0.0, 0.0, -1.0);
  m.col(1) = Vec3(1.0, 0.0, 0.0);
  m.col(2) = Vec3(0.0, -1.0, 0.0);
  return Rotation::from_axis_angle(Vec3(0.0, 0.0, 1.0), 0.2) * Rotation::from_matrix(m);
}

inline HandFrame make_hand_frame(const HumanHandShape& shape, double closing,
                                 const RigidTransform& wrist, int index) {
  HandFrame f;
  const auto local = shape.keypoints(closing_flexion(closing));
  for (std::size_t i = 0; i < local.size(); ++i) f.joints[i] = wrist.apply(local[i]);
  f.wrist_pose = wrist;
  f.frame_index = index;
  f.confidence = 1.0;
  return f;
}

// Camera-facing, unoccluded surface samples, as a depth sensor would see them. Draws
// until `num_points` visible samples are collected.
inline PointCloud visible_hand_surface(const std::array<Vec3, kNumKeypoints>& joints,
                                       const SurfaceSampling& opts) {
  SurfaceSampling over = opts;
  over.num_points = 4 * opts.num_points;
  const PointCloud all = sample_hand_surface(joints, over);
  const auto capsules = hand_capsules(joints, opts);
  PointCloud out;
  for (std::size_t i = 0; i < all.size() && out.size() < static_cast<std::size_t>(opts.num_points); ++i) {
    if (all.normals[i].dot(all.points[i]) < 0.0 && !occluded(all.points[i], capsules)) {
      out.points.push_back(all.points[i]);
      out.normals.push_back(all.normals[i]);
    }
  }
  return out;
}

// Depth noise moves a point along its camera ray.
inline void add_depth_noise(PointCloud& cloud, double sigma, std::mt19937_64& rng) {
  if (sigma <= 0.0) return;
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& p : cloud.points) {
    const double z = p.z();
    p *= (z + n(rng)) / z;
  }
}

inline PointCloud sample_cylinder(const Vec3& center, const Vec3& axis, double radius,
                                  double length, int n) {
  const Vec3 a = axis.normalized();
  const Vec3 u = a.unitOrthogonal();
  const Vec3 v = a.cross(u);
  const int rings = std::max(2, static_cast<int>(std::sqrt(static_cast<double>(n) / 2.0)));
  const int per_ring = std::max(3, n / rings);
  PointCloud out;
  for (int r = 0; r < rings; ++r) {
    const double h = length * (static_cast<double>(r) / (rings - 1) - 0.5);
    for (int k = 0; k < per_ring; ++k) {
      const double th = 2.0 * std::numbers::pi * k / per_ring;
      const Vec3 radial = std::cos(th) * u + std::sin(th) * v;
      out.points.push_back(center + h * a + radius * radial);
      out.normals.push_back(radial);
    }
  }
  return out;
}

// Synthetic demonstration: a hand approaching along `approach_axis` while
// closing around a cylinder. Everything is a pure function of the params.
inline SynthFixture synth_hand_trajectory(const SynthParams& params) {
  if (params.n_frames < 1) throw InvalidArgument("synth: n_frames must be >= 1");
  if (!(params.hand_scale > 0.0) || !(params.depth_scale > 0.0))
    throw InvalidArgument("synth: scales must be positive");
  if (params.noise_sigma < 0.0) throw InvalidArgument("synth: noise sigma must be >= 0");
  params.intrinsics.validate();

  const HumanHandShape shape = HumanHandShape::standard();
  const Rotation R = synth_wrist_rotation();
  const Vec3 axis = params.approach_axis.normalized();
  const Vec3 end_pos(-0.02, 0.08, params.start_depth);
  const Vec3 start_pos = end_pos - params.approach_distance * axis;

  SynthFixture fx;
  fx.intrinsics = params.intrinsics;
  fx.trajectory.fps = 30.0;
  std::mt19937_64 noise_rng(params.seed ^ 0x9e3779b97f4a7c15ULL);
  const SimilarityTransform depth_frame{params.depth_scale, Rotation(), Vec3::Zero()};

  for (int f = 0; f < params.n_frames; ++f) {
    const double t = params.n_frames == 1 ? 1.0 : static_cast<double>(f) / (params.n_frames - 1);
    const RigidTransform wrist{R, start_pos + t * (end_pos - start_pos)};
    const HandFrame truth = make_hand_frame(shape, closing_value(params.closing, t), wrist, f);
    fx.true_frames.push_back(truth);
    fx.trajectory.frames.push_back(
        truth.transformed({1.0 / params.hand_scale, Rotation(), Vec3::Zero()}));

    SurfaceSampling sampling = sampling_for_hand(truth.joints);
    sampling.num_points = params.cloud_points;
    sampling.seed = params.seed * 1000003ULL + static_cast<std::uint64_t>(f);
    PointCloud cloud = visible_hand_surface(truth.joints, sampling).transformed(depth_frame);
    add_depth_noise(cloud, params.noise_sigma, noise_rng);
    DepthImage depth = splat_depth(cloud.points, params.intrinsics, params.footprint);
    fx.masks.push_back(ImageMask::from_valid(depth));
    fx.depths.push_back(std::move(depth));
    fx.clouds.push_back(std::move(cloud));
  }

  const HandFrame& last = fx.true_frames.back();
  const Vec3 thumb_tip = last.joints[static_cast<std::size_t>(tip_keypoint(Digit::kThumb))];
  const Vec3 middle_tip = last.joints[static_cast<std::size_t>(tip_keypoint(Digit::kMiddle))];
  fx.object_true = sample_cylinder(0.5 * (thumb_tip + middle_tip), R * Vec3::UnitY(), 0.02, 0.1,
                                   params.object_points);
  fx.object_pred = fx.object_true.transformed(depth_frame);

  auto& contacts = fx.trajectory.contacts[last.frame_index];
  for (Digit d : {Digit::kThumb, Digit::kIndex, Digit::kMiddle})
    contacts[d] = depth_frame.apply(last.joints[static_cast<std::size_t>(tip_keypoint(d))]);
  return fx;
}

}  // namespace retarget
