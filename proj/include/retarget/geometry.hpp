#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "retarget/errors.hpp"

namespace retarget {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// SO(3) helpers

inline Mat3 skew(const Vec3& v) {
  Mat3 s;
  // clang-format off
  s <<     0.0, -v.z(),  v.y(),
         v.z(),    0.0, -v.x(),
        -v.y(),  v.x(),    0.0;
  // clang-format on
  return s;
}

// Left Jacobian of SO(3): d/dw exp(w) x = -skew(exp(w) x) * left_jacobian(w).
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const Mat3 W = skew(w);
  if (theta2 < 1e-10) {
    // Series up to second order; the truncation error is O(theta^3).
    return Mat3::Identity() + 0.5 * W + (1.0 / 6.0) * W * W;
  }
  const double theta = std::sqrt(theta2);
  const double a = (1.0 - std::cos(theta)) / theta2;
  const double b = (theta - std::sin(theta)) / (theta2 * theta);
  return Mat3::Identity() + a * W + b * W * W;
}

// ---------------------------------------------------------------------------
// Rotation

// Unit quaternion rotation; the 3x3 matrix form is a derived view.
class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}

  static Rotation identity() { return Rotation(); }

  static Rotation from_quaternion(double w, double x, double y, double z) {
    Eigen::Quaterniond q(w, x, y, z);
    const double n = q.norm();
    if (!std::isfinite(n) || n < 1e-12)
      throw InvalidArgument("rotation: quaternion must be finite and non-zero");
    q.coeffs() /= n;
    return Rotation(q);
  }

  static Rotation from_quaternion(const Eigen::Quaterniond& q) {
    return from_quaternion(q.w(), q.x(), q.y(), q.z());
  }

  static Rotation from_matrix(const Mat3& m) {
    if (!m.allFinite())
      throw InvalidArgument("rotation: matrix must be finite");
    const double ortho_err = (m.transpose() * m - Mat3::Identity()).norm();
    if (ortho_err > 1e-6 || m.determinant() < 0.0)
      throw InvalidArgument("rotation: matrix is not a proper rotation");
    Eigen::Quaterniond q(m);
    q.normalize();
    return Rotation(q);
  }

  // Axis-angle packed as axis * angle (radians).
  static Rotation from_rotation_vector(const Vec3& w) {
    if (!w.allFinite())
      throw InvalidArgument("rotation: rotation vector must be finite");
    const double theta = w.norm();
    if (theta < 1e-300) return Rotation();
    Eigen::Quaterniond q(Eigen::AngleAxisd(theta, w / theta));
    q.normalize();
    return Rotation(q);
  }

  static Rotation from_axis_angle(const Vec3& axis, double angle) {
    const double n = axis.norm();
    if (!(n > 0.0)) throw InvalidArgument("rotation: zero axis");
    return from_rotation_vector(axis / n * angle);
  }

  // URDF convention: R = Rz(yaw) * Ry(pitch) * Rx(roll).
  static Rotation from_rpy(double roll, double pitch, double yaw) {
    Eigen::Quaterniond q = Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                           Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                           Eigen::AngleAxisd(roll, Vec3::UnitX());
    q.normalize();
    return Rotation(q);
  }

  const Eigen::Quaterniond& quaternion() const { return q_; }
  Mat3 matrix() const { return q_.toRotationMatrix(); }

  Vec3 rotation_vector() const {
    Eigen::Quaterniond q = q_;
    if (q.w() < 0.0) q.coeffs() = -q.coeffs();
    const double s = q.vec().norm();
    if (s < 1e-300) return Vec3::Zero();
    const double angle = 2.0 * std::atan2(s, q.w());
    return q.vec() / s * angle;
  }

  // Roll/pitch/yaw such that from_rpy reproduces this rotation.
  Vec3 rpy() const {
    const Mat3 m = matrix();
    const double pitch = std::asin(std::clamp(-m(2, 0), -1.0, 1.0));
    double roll, yaw;
    if (std::abs(m(2, 0)) < 1.0 - 1e-12) {
      roll = std::atan2(m(2, 1), m(2, 2));
      yaw = std::atan2(m(1, 0), m(0, 0));
    } else {
      roll = 0.0;
      yaw = std::atan2(-m(0, 1), m(1, 1));
    }
    return {roll, pitch, yaw};
  }

  Rotation inverse() const { return Rotation(q_.conjugate()); }

  Rotation operator*(const Rotation& other) const {
    Eigen::Quaterniond q = q_ * other.q_;
    q.normalize();
    return Rotation(q);
  }

  Vec3 operator*(const Vec3& p) const { return q_ * p; }

  // Geodesic angle between two rotations, in [0, pi].
  double angle_to(const Rotation& other) const {
    const Eigen::Quaterniond d = q_.conjugate() * other.q_;
    return 2.0 * std::atan2(d.vec().norm(), std::abs(d.w()));
  }

 private:
  explicit Rotation(const Eigen::Quaterniond& q) : q_(q) {}
  Eigen::Quaterniond q_;
};

// ---------------------------------------------------------------------------
// Rigid and similarity transforms

struct RigidTransform {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  static RigidTransform from_matrix(const Mat4& m) {
    return {Rotation::from_matrix(m.topLeftCorner<3, 3>()),
            m.topRightCorner<3, 1>()};
  }

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  Vec3 operator*(const Vec3& p) const { return apply(p); }

  RigidTransform operator*(const RigidTransform& o) const {
    return {rotation * o.rotation, rotation * o.translation + translation};
  }

  RigidTransform inverse() const {
    const Rotation r_inv = rotation.inverse();
    return {r_inv, -(r_inv * translation)};
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation.matrix();
    m.topRightCorner<3, 1>() = translation;
    return m;
  }
};

struct SimilarityTransform {
  double scale = 1.0;
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  static SimilarityTransform identity() { return {}; }

  static SimilarityTransform from_rigid(const RigidTransform& t) {
    return {1.0, t.rotation, t.translation};
  }

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
  Vec3 operator*(const Vec3& p) const { return apply(p); }

  SimilarityTransform operator*(const SimilarityTransform& o) const {
    return {scale * o.scale, rotation * o.rotation,
            scale * (rotation * o.translation) + translation};
  }

  SimilarityTransform inverse() const {
    const Rotation r_inv = rotation.inverse();
    return {1.0 / scale, r_inv, -(r_inv * translation) / scale};
  }

  RigidTransform rigid_part() const { return {rotation, translation}; }
};

// ---------------------------------------------------------------------------
// Robust loss

inline double huber(double r, double delta) {
  if (!std::isfinite(r) || !std::isfinite(delta))
    throw InvalidArgument("huber: arguments must be finite");
  if (delta <= 0.0) throw InvalidArgument("huber: delta must be positive");
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_derivative(double r, double delta) {
  if (!std::isfinite(r) || !std::isfinite(delta))
    throw InvalidArgument("huber: arguments must be finite");
  if (delta <= 0.0) throw InvalidArgument("huber: delta must be positive");
  if (std::abs(r) <= delta) return r;
  return r > 0.0 ? delta : -delta;
}

// ---------------------------------------------------------------------------
// Weighted Umeyama

// Least-squares similarity (or rigid, with_scale = false) mapping src onto
// dst: argmin sum_i w_i |s R src_i + t - dst_i|^2 with det(R) = +1.
inline SimilarityTransform weighted_umeyama(std::span<const Vec3> src,
                                            std::span<const Vec3> dst,
                                            std::span<const double> weights,
                                            bool with_scale) {
  if (src.size() != dst.size() || src.size() != weights.size())
    throw InvalidArgument("weighted_umeyama: src, dst and weights differ in length");
  if (src.size() < 3)
    throw InvalidArgument("weighted_umeyama: need at least 3 correspondences");

  double total = 0.0;
  Vec3 mu_src = Vec3::Zero();
  Vec3 mu_dst = Vec3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double w = weights[i];
    if (!std::isfinite(w) || w < 0.0)
      throw InvalidArgument("weighted_umeyama: weights must be finite and non-negative");
    if (!src[i].allFinite() || !dst[i].allFinite())
      throw InvalidArgument("weighted_umeyama: points must be finite");
    total += w;
    mu_src += w * src[i];
    mu_dst += w * dst[i];
  }
  if (!(total > 0.0))
    throw InvalidArgument("weighted_umeyama: total weight must be positive");
  mu_src /= total;
  mu_dst /= total;

  Mat3 cov = Mat3::Zero();
  Mat3 src_cov = Mat3::Zero();
  double src_var = 0.0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double w = weights[i];
    if (w == 0.0) continue;
    const Vec3 a = src[i] - mu_src;
    const Vec3 b = dst[i] - mu_dst;
    cov += w * b * a.transpose();
    src_cov += w * a * a.transpose();
    src_var += w * a.squaredNorm();
  }
  cov /= total;
  src_cov /= total;
  src_var /= total;

  // Collinear or coincident sources leave the rotation about the line free.
  Eigen::SelfAdjointEigenSolver<Mat3> src_eig(src_cov, Eigen::EigenvaluesOnly);
  const Vec3 ev = src_eig.eigenvalues();  // ascending
  if (!(ev(2) > 0.0) || ev(1) <= 1e-12 * ev(2))
    throw RankDeficientError("weighted_umeyama: source points are collinear or coincident");

  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3 sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0))
    throw RankDeficientError("weighted_umeyama: cross-covariance is rank deficient");

  const Mat3& U = svd.matrixU();
  const Mat3& V = svd.matrixV();
  Vec3 S = Vec3::Ones();
  if (U.determinant() * V.determinant() < 0.0) S(2) = -1.0;

  const Mat3 R = U * S.asDiagonal() * V.transpose();
  const double scale = with_scale ? sv.dot(S) / src_var : 1.0;

  SimilarityTransform out;
  out.scale = scale;
  out.rotation = Rotation::from_matrix(R);
  out.translation = mu_dst - scale * (out.rotation * mu_src);
  return out;
}

inline SimilarityTransform weighted_umeyama(std::span<const Vec3> src,
                                            std::span<const Vec3> dst,
                                            bool with_scale) {
  const std::vector<double> w(src.size(), 1.0);
  return weighted_umeyama(src, dst, w, with_scale);
}

// ---------------------------------------------------------------------------
// Pinhole camera and depth images

struct CameraIntrinsics {
  double fx = 0.0, fy = 0.0;
  double cx = 0.0, cy = 0.0;
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0))
      throw InvalidArgument("intrinsics: fx and fy must be positive");
    if (width <= 0 || height <= 0)
      throw InvalidArgument("intrinsics: width and height must be positive");
    if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height))
      throw InvalidArgument("intrinsics: principal point outside the image");
  }

  // Camera-frame point on the ray through pixel (u, v) at the given depth.
  Vec3 backproject(double u, double v, double depth) const {
    return {(u - cx) / fx * depth, (v - cy) / fy * depth, depth};
  }
};

struct PixelProjection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;
};

inline PixelProjection project_point(const Vec3& p, const CameraIntrinsics& K) {
  if (!p.allFinite()) throw InvalidArgument("project_point: point must be finite");
  if (!(p.z() > 0.0))
    throw BehindCameraError("project_point: point is behind the camera (z <= 0)");
  return {K.fx * p.x() / p.z() + K.cx, K.fy * p.y() / p.z() + K.cy, p.z()};
}

// Row-major depth grid; invalid pixels carry value 0 and valid = 0.
struct DepthImage {
  int width = 0;
  int height = 0;
  std::vector<float> values;
  std::vector<std::uint8_t> valid;

  DepthImage() = default;
  DepthImage(int w, int h)
      : width(w),
        height(h),
        values(static_cast<std::size_t>(w) * h, 0.0f),
        valid(static_cast<std::size_t>(w) * h, 0) {
    if (w <= 0 || h <= 0) throw InvalidArgument("depth image: dimensions must be positive");
  }

  std::size_t index(int u, int v) const {
    return static_cast<std::size_t>(v) * width + u;
  }
  bool is_valid(int u, int v) const { return valid[index(u, v)] != 0; }
  float at(int u, int v) const { return values[index(u, v)]; }

  void set(int u, int v, float depth) {
    values[index(u, v)] = depth;
    valid[index(u, v)] = 1;
  }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto b : valid) n += b != 0;
    return n;
  }
};

// Binary pixel mask (e.g. the hand region), row-major like DepthImage.
struct ImageMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  ImageMask() = default;
  ImageMask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
    if (w <= 0 || h <= 0) throw InvalidArgument("mask: dimensions must be positive");
  }

  static ImageMask from_valid(const DepthImage& d) {
    ImageMask m(d.width, d.height);
    m.data = d.valid;
    return m;
  }

  bool at(int u, int v) const { return data[static_cast<std::size_t>(v) * width + u] != 0; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto b : data) n += b != 0;
    return n;
  }
};

// Per-pixel index of the point that won the z-test, or -1.
struct SplatResult {
  DepthImage depth;
  std::vector<std::int32_t> winner;
};

// Nearest pixel centre for a continuous image coordinate.
inline int pixel_index(double coord) {
  return static_cast<int>(std::floor(coord + 0.5));
}

inline SplatResult splat_depth_indexed(std::span<const Vec3> points,
                                       const CameraIntrinsics& K,
                                       int footprint = 3) {
  K.validate();
  if (footprint < 1 || footprint % 2 == 0)
    throw InvalidArgument("splat_depth: footprint must be a positive odd integer");
  SplatResult out{DepthImage(K.width, K.height),
                  std::vector<std::int32_t>(static_cast<std::size_t>(K.width) * K.height, -1)};
  const int half = footprint / 2;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3& p = points[i];
    if (!p.allFinite() || !(p.z() > 0.0)) continue;
    const double u = K.fx * p.x() / p.z() + K.cx;
    const double v = K.fy * p.y() / p.z() + K.cy;
    const int pu = pixel_index(u);
    const int pv = pixel_index(v);
    const float z = static_cast<float>(p.z());
    for (int dv = -half; dv <= half; ++dv) {
      const int y = pv + dv;
      if (y < 0 || y >= K.height) continue;
      for (int du = -half; du <= half; ++du) {
        const int x = pu + du;
        if (x < 0 || x >= K.width) continue;
        const std::size_t idx = out.depth.index(x, y);
        const auto wi = static_cast<std::int32_t>(i);
        if (!out.depth.valid[idx] || z < out.depth.values[idx] ||
            (z == out.depth.values[idx] && wi < out.winner[idx])) {
          out.depth.values[idx] = z;
          out.depth.valid[idx] = 1;
          out.winner[idx] = wi;
        }
      }
    }
  }
  return out;
}

// Point-splat z-buffer render: each point covers a footprint x footprint
// block and the nearest depth wins.
inline DepthImage splat_depth(std::span<const Vec3> points, const CameraIntrinsics& K,
                              int footprint = 3) {
  return splat_depth_indexed(points, K, footprint).depth;
}

}  // namespace retarget
