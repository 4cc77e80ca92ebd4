#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>

#include "retarget/geometry.hpp"
#include "retarget/kdtree.hpp"

namespace retarget {

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;    // empty when absent
  std::vector<double> weights;  // empty when absent

  PointCloud() = default;
  explicit PointCloud(std::vector<Vec3> pts) : points(std::move(pts)) {}

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }
  bool has_weights() const { return !weights.empty(); }

  void validate() const {
    for (const auto& p : points)
      if (!p.allFinite()) throw InvalidArgument("point cloud: non-finite point");
    if (has_normals()) {
      if (normals.size() != points.size())
        throw InvalidArgument("point cloud: normals and points differ in length");
      for (const auto& n : normals)
        if (!n.allFinite() || std::abs(n.norm() - 1.0) > 1e-6)
          throw InvalidArgument("point cloud: normals must have unit length");
    }
    if (has_weights()) {
      if (weights.size() != points.size())
        throw InvalidArgument("point cloud: weights and points differ in length");
      for (double w : weights)
        if (!std::isfinite(w) || w < 0.0)
          throw InvalidArgument("point cloud: weights must be non-negative");
    }
  }

  PointCloud transformed(const SimilarityTransform& T) const {
    PointCloud out = *this;
    for (auto& p : out.points) p = T.apply(p);
    for (auto& n : out.normals) n = T.rotation * n;
    return out;
  }
  PointCloud transformed(const RigidTransform& T) const {
    return transformed(SimilarityTransform::from_rigid(T));
  }
};

struct Correspondence {
  std::size_t src_index = 0;
  std::size_t dst_index = 0;
  double distance = 0.0;
};

struct RegistrationReport {
  SimilarityTransform transform;
  double rms_residual = 0.0;
  double inlier_fraction = 0.0;
  int iterations = 0;
  bool converged = false;
  // Robust objective after each outer iteration (ICP only).
  std::vector<double> objective_history;
};

class RegistrationError : public Error {
 public:
  RegistrationError(const std::string& what, RegistrationReport report)
      : Error(ErrorKind::kRegistrationFailure, what), report_(std::move(report)) {}
  const RegistrationReport& report() const { return report_; }

 private:
  RegistrationReport report_;
};

inline KdTree build_index(const PointCloud& cloud) {
  if (cloud.empty()) throw InvalidArgument("build_index: cloud is empty");
  return KdTree(cloud.points);
}

// PCA normals over the k nearest neighbours (the point itself included),
// flipped to face `viewpoint`.
inline PointCloud estimate_normals(const PointCloud& cloud, int k,
                                   const Vec3& viewpoint = Vec3::Zero()) {
  if (k < 3) throw InvalidArgument("estimate_normals: k must be at least 3");
  if (cloud.size() < static_cast<std::size_t>(k))
    throw InvalidArgument("estimate_normals: k exceeds the cloud size");
  const KdTree tree(cloud.points);
  PointCloud out = cloud;
  out.normals.resize(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto nb = tree.knn(cloud.points[i], static_cast<std::size_t>(k));
    Vec3 mean = Vec3::Zero();
    for (const auto& n : nb) mean += cloud.points[n.index];
    mean /= static_cast<double>(nb.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& n : nb) {
      const Vec3 d = cloud.points[n.index] - mean;
      cov += d * d.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    Vec3 normal = eig.eigenvectors().col(0).normalized();
    if (normal.dot(viewpoint - cloud.points[i]) < 0.0) normal = -normal;
    out.normals[i] = normal;
  }
  return out;
}

namespace detail {

struct PlaneMatch {
  Vec3 src;  // source point (untransformed)
  Vec3 dst;
  Vec3 normal;
};

inline double plane_objective(std::span<const PlaneMatch> matches, const RigidTransform& T,
                              double delta) {
  double sum = 0.0;
  for (const auto& m : matches) sum += huber(m.normal.dot(T.apply(m.src) - m.dst), delta);
  return sum / static_cast<double>(matches.size());
}

}  // namespace detail

struct IcpOptions {
  double delta = 0.01;           // Huber threshold, meters
  int max_iters = 50;
  double max_corr_dist = 0.05;   // meters
  int inner_steps = 5;           // Gauss-Newton steps per correspondence set
};

// Robust point-to-plane ICP. Minimises (1/N) sum huber(n^T (T x - y)) with
// nearest-neighbour correspondences refreshed every outer iteration.
inline RegistrationReport icp_point_to_plane(const PointCloud& src, const PointCloud& dst,
                                             const RigidTransform& init,
                                             const IcpOptions& opts = {}) {
  if (!dst.has_normals()) throw InvalidArgument("icp_point_to_plane: dst has no normals");
  if (src.empty() || dst.empty()) throw InvalidArgument("icp_point_to_plane: empty cloud");
  if (opts.max_iters < 1) throw InvalidArgument("icp_point_to_plane: max_iters must be >= 1");
  if (!(opts.delta > 0.0)) throw InvalidArgument("icp_point_to_plane: delta must be positive");

  const KdTree tree(dst.points);
  RigidTransform T = init;
  RegistrationReport report;
  double prev_rms = std::numeric_limits<double>::infinity();
  std::vector<detail::PlaneMatch> matches;
  matches.reserve(src.size());

  auto gather = [&](const RigidTransform& pose) {
    matches.clear();
    for (const auto& p : src.points) {
      const Neighbor nb = tree.nearest(pose.apply(p));
      if (nb.distance > opts.max_corr_dist) continue;
      matches.push_back({p, dst.points[nb.index], dst.normals[nb.index]});
    }
  };

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    gather(T);
    report.iterations = iter + 1;
    if (matches.empty()) {
      report.transform = SimilarityTransform::from_rigid(T);
      throw RegistrationError("icp_point_to_plane: no valid correspondences at iteration " +
                                  std::to_string(iter),
                              report);
    }

    const RigidTransform T_start = T;
    double objective = detail::plane_objective(matches, T, opts.delta);
    double last_update = 0.0;
    for (int step = 0; step < opts.inner_steps; ++step) {
      Eigen::Matrix<double, 6, 6> H = Eigen::Matrix<double, 6, 6>::Zero();
      Eigen::Matrix<double, 6, 1> g = Eigen::Matrix<double, 6, 1>::Zero();
      for (const auto& m : matches) {
        const Vec3 x = T.apply(m.src);
        const double r = m.normal.dot(x - m.dst);
        const double a = std::abs(r);
        const double w = a <= opts.delta ? 1.0 : opts.delta / a;
        Eigen::Matrix<double, 6, 1> J;
        J.head<3>() = x.cross(m.normal);
        J.tail<3>() = m.normal;
        H += w * J * J.transpose();
        g += w * r * J;
      }
      // Levenberg-style damping keeps the system solvable on symmetric scenes.
      H.diagonal().array() += 1e-12 * (1.0 + H.diagonal().array());
      Eigen::Matrix<double, 6, 1> dx = -H.ldlt().solve(g);
      if (!dx.allFinite()) break;

      double step_scale = 1.0;
      bool accepted = false;
      for (int h = 0; h < 20; ++h) {
        const Eigen::Matrix<double, 6, 1> d = step_scale * dx;
        const RigidTransform inc{Rotation::from_rotation_vector(d.head<3>()), d.tail<3>()};
        const RigidTransform candidate = inc * T;
        const double value = detail::plane_objective(matches, candidate, opts.delta);
        if (value <= objective) {
          T = candidate;
          last_update = d.norm();
          objective = value;
          accepted = true;
          break;
        }
        step_scale *= 0.5;
      }
      if (!accepted) {
        last_update = 0.0;
        break;
      }
      if (last_update < 1e-7) break;
    }

    report.objective_history.push_back(objective);
    const RigidTransform moved = T * T_start.inverse();
    const double update = std::hypot(moved.rotation.rotation_vector().norm(), moved.translation.norm());
    double sq = 0.0;
    for (const auto& m : matches) {
      const double r = m.normal.dot(T.apply(m.src) - m.dst);
      sq += r * r;
    }
    const double rms = std::sqrt(sq / static_cast<double>(matches.size()));
    const bool small_update = update < 1e-7;
    const bool small_change = std::abs(prev_rms - rms) < 1e-9;
    prev_rms = rms;
    if (small_update || small_change) {
      report.converged = true;
      break;
    }
  }

  gather(T);
  report.transform = SimilarityTransform::from_rigid(T);
  if (matches.empty()) {
    throw RegistrationError("icp_point_to_plane: no valid correspondences at the solution", report);
  }
  double sq = 0.0;
  for (const auto& m : matches) {
    const double r = m.normal.dot(T.apply(m.src) - m.dst);
    sq += r * r;
  }
  report.rms_residual = std::sqrt(sq / static_cast<double>(matches.size()));
  report.inlier_fraction = static_cast<double>(matches.size()) / static_cast<double>(src.size());
  return report;
}

// RMS point-to-plane residual of T(src) against nearest neighbours in dst
// (no distance gating). Used to judge registration quality.
inline double point_to_plane_rms(const PointCloud& src, const PointCloud& dst,
                                 const RigidTransform& T) {
  if (!dst.has_normals()) throw InvalidArgument("point_to_plane_rms: dst has no normals");
  const KdTree tree(dst.points);
  double sq = 0.0;
  for (const auto& p : src.points) {
    const Vec3 x = T.apply(p);
    const Neighbor nb = tree.nearest(x);
    const double r = dst.normals[nb.index].dot(x - dst.points[nb.index]);
    sq += r * r;
  }
  return std::sqrt(sq / static_cast<double>(src.size()));
}

struct RansacOptions {
  double inlier_thresh = 0.01;  // meters
  int max_rounds = 512;
  std::uint64_t seed = 0;
  int refit_rounds = 5;
};

// 3-point RANSAC over putative correspondences with a scaled Umeyama model,
// followed by refits on the consensus set. Deterministic for a given seed.
inline RegistrationReport ransac_similarity(const PointCloud& src, const PointCloud& dst,
                                            std::span<const Correspondence> corr,
                                            const RansacOptions& opts = {}) {
  if (corr.size() < 3)
    throw InvalidArgument("ransac_similarity: need at least 3 correspondences");
  if (!(opts.inlier_thresh > 0.0))
    throw InvalidArgument("ransac_similarity: inlier_thresh must be positive");
  if (opts.max_rounds < 1) throw InvalidArgument("ransac_similarity: max_rounds must be >= 1");
  for (const auto& c : corr)
    if (c.src_index >= src.size() || c.dst_index >= dst.size())
      throw InvalidArgument("ransac_similarity: correspondence index out of range");

  const std::size_t n = corr.size();
  std::vector<Vec3> a(n), b(n);
  for (std::size_t i = 0; i < n; ++i) {
    a[i] = src.points[corr[i].src_index];
    b[i] = dst.points[corr[i].dst_index];
  }
  const double thresh2 = opts.inlier_thresh * opts.inlier_thresh;
  auto inliers_of = [&](const SimilarityTransform& T) {
    std::vector<std::size_t> in;
    for (std::size_t i = 0; i < n; ++i)
      if ((T.apply(a[i]) - b[i]).squaredNorm() < thresh2) in.push_back(i);
    return in;
  };
  auto fit = [&](const std::vector<std::size_t>& ids) {
    std::vector<Vec3> sa, sb;
    sa.reserve(ids.size());
    sb.reserve(ids.size());
    for (auto i : ids) {
      sa.push_back(a[i]);
      sb.push_back(b[i]);
    }
    return weighted_umeyama(sa, sb, true);
  };

  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::vector<std::size_t> best_inliers;
  SimilarityTransform best;
  int rounds = 0;
  for (; rounds < opts.max_rounds; ++rounds) {
    std::size_t i0 = pick(rng), i1 = pick(rng), i2 = pick(rng);
    if (i0 == i1 || i0 == i2 || i1 == i2) continue;
    SimilarityTransform T;
    try {
      T = fit({i0, i1, i2});
    } catch (const RankDeficientError&) {
      continue;
    }
    if (!(T.scale > 0.0) || !std::isfinite(T.scale)) continue;
    auto in = inliers_of(T);
    if (in.size() > best_inliers.size()) {
      best_inliers = std::move(in);
      best = T;
      if (best_inliers.size() == n) {
        ++rounds;
        break;
      }
    }
  }

  RegistrationReport report;
  report.iterations = rounds;
  report.transform = best;
  if (best_inliers.size() < 3) {
    report.inlier_fraction = static_cast<double>(best_inliers.size()) / static_cast<double>(n);
    throw RegistrationError("ransac_similarity: fewer than 3 inliers in the best model", report);
  }

  for (int r = 0; r < opts.refit_rounds; ++r) {
    SimilarityTransform refit;
    try {
      refit = fit(best_inliers);
    } catch (const RankDeficientError&) {
      break;
    }
    auto in = inliers_of(refit);
    if (in.size() < best_inliers.size()) break;
    best = refit;
    const bool stable = in == best_inliers;
    best_inliers = std::move(in);
    if (stable) break;
  }

  double sq = 0.0;
  for (auto i : best_inliers) sq += (best.apply(a[i]) - b[i]).squaredNorm();
  report.transform = best;
  report.rms_residual = std::sqrt(sq / static_cast<double>(best_inliers.size()));
  report.inlier_fraction = static_cast<double>(best_inliers.size()) / static_cast<double>(n);
  report.converged = true;
  return report;
}

}  // namespace retarget
