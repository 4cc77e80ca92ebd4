#pragma once

#include <cmath>
#include <future>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "retarget/errors.hpp"
#include "retarget/geometry.hpp"
#include "retarget/hand_model.hpp"
#include "retarget/kdtree.hpp"
#include "retarget/pointcloud.hpp"
#include "retarget/solver.hpp"

namespace retarget {

struct HandAlignment {
  int frame_index = 0;
  double sigma = 1.0;
  RigidTransform correction;
  double icp_residual = 0.0;    // RMS point-to-plane, meters
  double depth_residual = 0.0;  // mean absolute depth difference over the overlap, meters
  bool converged = false;
  int iterations = 0;           // accumulated solver iterations
  double initial_objective = 0.0;
  double final_objective = 0.0;

  // x -> sigma * (R x + t)
  SimilarityTransform similarity() const {
    return {sigma, correction.rotation, sigma * correction.translation};
  }
};

struct AlignConfig {
  double huber_delta = 0.01;
  double lambda_rend = 1.0;
  double lambda_reg = 0.1;
  int outer_iters = 10;
  int inner_iters = 25;
  int splat_footprint = 3;
  int mano_points = 1000;
  std::uint64_t sampling_seed = 0;
  bool visible_only = true;  // drop model samples facing away from the camera
  bool scale_warmup = true;  // solve for the scale alone before the full refinement
  bool independent = false;  // every frame starts from identity; frames run concurrently

  void validate() const {
    if (!(huber_delta > 0.0)) throw ConfigError("align: huber_delta must be > 0");
    if (!(lambda_rend > 0.0)) throw ConfigError("align: lambda_rend must be > 0");
    if (!(lambda_reg > 0.0)) throw ConfigError("align: lambda_reg must be > 0");
    if (outer_iters < 1) throw ConfigError("align: outer_iters must be >= 1");
    if (inner_iters < 1) throw ConfigError("align: inner_iters must be >= 1");
    if (splat_footprint < 1 || splat_footprint % 2 == 0)
      throw ConfigError("align: splat_footprint must be a positive odd integer");
    if (mano_points < 1) throw ConfigError("align: mano_points must be >= 1");
  }
};

// One frame of observed geometry.
struct Observation {
  PointCloud cloud;
  DepthImage depth;
  ImageMask mask;
};

// ---------------------------------------------------------------------------
// Depth calibration

struct CalibrationResult {
  SimilarityTransform transform;
  std::vector<Observation> frames;
};

// Moves a depth image through T: every valid pixel is back-projected at its
// centre, transformed, and re-splatted with a one-pixel footprint. Mask
// pixels follow their depth samples.
inline void transform_depth(const SimilarityTransform& T, const CameraIntrinsics& K,
                            DepthImage& depth, ImageMask& mask) {
  std::vector<Vec3> pts;
  std::vector<char> in_mask;
  for (int v = 0; v < depth.height; ++v)
    for (int u = 0; u < depth.width; ++u) {
      if (!depth.is_valid(u, v)) continue;
      pts.push_back(T.apply(K.backproject(u, v, depth.at(u, v))));
      in_mask.push_back(mask.width == depth.width && mask.height == depth.height ? mask.at(u, v) : 1);
    }
  std::vector<Vec3> front;
  std::vector<char> front_mask;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (pts[i].z() > 0.0) {
      front.push_back(pts[i]);
      front_mask.push_back(in_mask[i]);
    }
  const SplatResult r = splat_depth_indexed(front, K, 1);
  ImageMask out_mask(depth.width, depth.height, 0);
  for (int v = 0; v < depth.height; ++v)
    for (int u = 0; u < depth.width; ++u) {
      const int w = r.winner[depth.index(u, v)];
      if (w >= 0 && front_mask[static_cast<std::size_t>(w)]) out_mask.data[depth.index(u, v)] = 1;
    }
  depth = r.depth;
  mask = std::move(out_mask);
}

// Similarity taking predicted-depth object points onto the true-depth ones,
// applied to every frame. An empty weight list means uniform weights.
inline CalibrationResult calibrate_depth_sequence(const std::vector<Observation>& frames,
                                                  const PointCloud& obj_true,
                                                  const PointCloud& obj_pred,
                                                  std::span<const double> weights,
                                                  bool with_scale, const CameraIntrinsics& K) {
  if (obj_true.size() != obj_pred.size())
    throw InvalidArgument("calibrate_depth_sequence: object clouds differ in size (" +
                          std::to_string(obj_pred.size()) + " vs " +
                          std::to_string(obj_true.size()) + ")");
  std::vector<double> w(weights.begin(), weights.end());
  if (w.empty()) w.assign(obj_true.size(), 1.0);
  CalibrationResult out;
  out.transform = weighted_umeyama(obj_pred.points, obj_true.points, w, with_scale);
  out.frames.reserve(frames.size());
  for (const auto& f : frames) {
    Observation o;
    o.cloud = f.cloud.transformed(out.transform);
    o.depth = f.depth;
    o.mask = f.mask;
    transform_depth(out.transform, K, o.depth, o.mask);
    out.frames.push_back(std::move(o));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss terms

inline Vec3 apply_scaled(double sigma, const RigidTransform& T, const Vec3& x) {
  return sigma * T.apply(x);
}

// Mean Huber point-to-plane residual against the nearest observed point.
inline double icp_alignment_loss(const PointCloud& mano, const PointCloud& observed,
                                 const KdTree& tree, double sigma, const RigidTransform& T,
                                 double delta) {
  if (mano.empty() || observed.empty())
    throw LossUndefinedError("icp_alignment_loss: empty cloud");
  if (!observed.has_normals())
    throw InvalidArgument("icp_alignment_loss: observed cloud needs normals");
  double sum = 0.0;
  for (const auto& x : mano.points) {
    const Vec3 p = apply_scaled(sigma, T, x);
    const Neighbor nb = tree.nearest(p);
    sum += huber(observed.normals[nb.index].dot(p - observed.points[nb.index]), delta);
  }
  return sum / static_cast<double>(mano.size());
}

inline double icp_alignment_loss(const PointCloud& mano, const PointCloud& observed, double sigma,
                                 const RigidTransform& T, double delta) {
  if (observed.empty()) throw LossUndefinedError("icp_alignment_loss: empty cloud");
  return icp_alignment_loss(mano, observed, build_index(observed), sigma, T, delta);
}

inline void check_mask(const DepthImage& depth, const ImageMask& mask) {
  if (mask.width != depth.width || mask.height != depth.height)
    throw InvalidArgument("hand mask is " + std::to_string(mask.width) + "x" +
                          std::to_string(mask.height) + ", depth image is " +
                          std::to_string(depth.width) + "x" + std::to_string(depth.height));
}

// Mean absolute depth difference over pixels valid in both the rendered and
// observed images and inside the hand mask.
inline double depth_consistency_loss(const PointCloud& mano, double sigma, const RigidTransform& T,
                                     const DepthImage& observed, const ImageMask& mask,
                                     const CameraIntrinsics& K, int footprint) {
  check_mask(observed, mask);
  std::vector<Vec3> pts;
  pts.reserve(mano.size());
  for (const auto& x : mano.points) pts.push_back(apply_scaled(sigma, T, x));
  const DepthImage rendered = splat_depth(pts, K, footprint);
  if (rendered.width != observed.width || rendered.height != observed.height)
    throw InvalidArgument("depth_consistency_loss: intrinsics do not match the depth image");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < rendered.values.size(); ++i) {
    if (!rendered.valid[i] || !observed.valid[i] || !mask.data[i]) continue;
    sum += std::abs(static_cast<double>(rendered.values[i]) - static_cast<double>(observed.values[i]));
    ++n;
  }
  if (n == 0) throw LossUndefinedError("depth_consistency_loss: no overlapping hand pixels");
  return sum / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Alignment objective over p = [log sigma, rotation vector (3), translation (3)].

inline SimilarityTransform alignment_from_params(const VecX& p) {
  return {std::exp(p(0)), Rotation::from_rotation_vector(p.segment<3>(1)),
          std::exp(p(0)) * Vec3(p.segment<3>(4))};
}

inline VecX params_from_alignment(double sigma, const RigidTransform& T) {
  VecX p(7);
  p(0) = std::log(sigma);
  p.segment<3>(1) = T.rotation.rotation_vector();
  p.segment<3>(4) = T.translation;
  return p;
}

// Total alignment objective with nearest-neighbour matches, visibility and
// pixel ownership frozen at the last call to freeze(). The frozen objective is
// smooth almost everywhere and has an analytic gradient; the true objective
// is the frozen one after re-freezing at the same point.
class AlignmentObjective {
 public:
  AlignmentObjective(const PointCloud& mano, const PointCloud& observed, const KdTree& tree,
                     const DepthImage& depth, const ImageMask& mask, const CameraIntrinsics& K,
                     const AlignConfig& cfg, std::vector<Capsule> occluders = {})
      : mano_(mano), observed_(observed), tree_(tree), depth_(depth), mask_(mask), K_(K),
        cfg_(cfg), occluders_(std::move(occluders)) {
    check_mask(depth, mask);
    if (!observed.has_normals())
      throw InvalidArgument("alignment: observed cloud needs normals");
  }

  void freeze(const VecX& p) {
    const SimilarityTransform S = alignment_from_params(p);
    active_.clear();
    std::vector<Capsule> occ;
    if (cfg_.visible_only)
      for (const auto& c : occluders_) occ.push_back({S.apply(c.a), S.apply(c.b), S.scale * c.radius});
    std::vector<Vec3> visible;
    for (std::size_t i = 0; i < mano_.size(); ++i) {
      const Vec3 x = S.apply(mano_.points[i]);
      if (cfg_.visible_only && mano_.has_normals() &&
          (S.rotation * mano_.normals[i]).dot(x) >= 0.0)
        continue;
      if (!occ.empty() && occluded(x, occ)) continue;
      active_.push_back(i);
      visible.push_back(x);
    }
    if (active_.empty()) throw LossUndefinedError("alignment: no camera-facing model points");
    targets_.resize(active_.size());
    target_normals_.resize(active_.size());
    for (std::size_t k = 0; k < active_.size(); ++k) {
      const Neighbor nb = tree_.nearest(visible[k]);
      targets_[k] = observed_.points[nb.index];
      target_normals_[k] = observed_.normals[nb.index];
    }
    const SplatResult r = splat_depth_indexed(visible, K_, cfg_.splat_footprint);
    if (r.depth.width != depth_.width || r.depth.height != depth_.height)
      throw InvalidArgument("alignment: intrinsics do not match the depth image");
    pixels_.clear();
    for (std::size_t i = 0; i < r.winner.size(); ++i) {
      if (r.winner[i] < 0 || !depth_.valid[i] || !mask_.data[i]) continue;
      pixels_.push_back({active_[static_cast<std::size_t>(r.winner[i])],
                         static_cast<double>(depth_.values[i])});
    }
    if (pixels_.empty()) throw LossUndefinedError("depth_consistency_loss: no overlapping hand pixels");
  }

  double icp_term(const VecX& p) const {
    const SimilarityTransform S = alignment_from_params(p);
    double sum = 0.0;
    for (std::size_t k = 0; k < active_.size(); ++k)
      sum += huber(target_normals_[k].dot(S.apply(mano_.points[active_[k]]) - targets_[k]),
                   cfg_.huber_delta);
    return sum / static_cast<double>(active_.size());
  }

  double icp_rms(const VecX& p) const {
    const SimilarityTransform S = alignment_from_params(p);
    double sum = 0.0;
    for (std::size_t k = 0; k < active_.size(); ++k) {
      const double r = target_normals_[k].dot(S.apply(mano_.points[active_[k]]) - targets_[k]);
      sum += r * r;
    }
    return std::sqrt(sum / static_cast<double>(active_.size()));
  }

  double depth_term(const VecX& p) const {
    const SimilarityTransform S = alignment_from_params(p);
    double sum = 0.0;
    for (const auto& px : pixels_) sum += std::abs(S.apply(mano_.points[px.point]).z() - px.observed);
    return sum / static_cast<double>(pixels_.size());
  }

  double value(const VecX& p) const {
    return icp_term(p) + cfg_.lambda_rend * depth_term(p) +
           cfg_.lambda_reg * p.segment<6>(1).squaredNorm();
  }

  VecX gradient(const VecX& p) const {
    const double sigma = std::exp(p(0));
    const Vec3 w = p.segment<3>(1);
    const Rotation R = Rotation::from_rotation_vector(w);
    const Mat3 Rm = R.matrix();
    const Mat3 Jl = so3_left_jacobian(w);
    const Vec3 tau = p.segment<3>(4);
    // d x~ / d p as a 3x7 block for model point x.
    auto jac = [&](const Vec3& x, Eigen::Matrix<double, 3, 7>& J) -> Vec3 {
      const Vec3 Rx = Rm * x;
      const Vec3 xt = sigma * (Rx + tau);
      J.col(0) = xt;
      J.block<3, 3>(0, 1) = -sigma * skew(Rx) * Jl;
      J.block<3, 3>(0, 4) = sigma * Mat3::Identity();
      return xt;
    };
    VecX g = VecX::Zero(7);
    Eigen::Matrix<double, 3, 7> J;
    const double n_icp = static_cast<double>(active_.size());
    for (std::size_t k = 0; k < active_.size(); ++k) {
      const Vec3 xt = jac(mano_.points[active_[k]], J);
      const double r = target_normals_[k].dot(xt - targets_[k]);
      g += (huber_derivative(r, cfg_.huber_delta) / n_icp) * (J.transpose() * target_normals_[k]);
    }
    const double scale = cfg_.lambda_rend / static_cast<double>(pixels_.size());
    for (const auto& px : pixels_) {
      const Vec3 xt = jac(mano_.points[px.point], J);
      const double e = xt.z() - px.observed;
      const double sgn = e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0);
      g += (scale * sgn) * J.row(2).transpose();
    }
    g.segment<6>(1) += 2.0 * cfg_.lambda_reg * p.segment<6>(1);
    return g;
  }

  // Re-freezes at p and returns the true objective there.
  double true_value(const VecX& p) {
    freeze(p);
    return value(p);
  }

  BoxProblem problem() const {
    BoxProblem bp;
    bp.lower = VecX(7);
    bp.upper = VecX(7);
    bp.lower << std::log(0.3), -0.5, -0.5, -0.5, -0.5, -0.5, -0.5;
    bp.upper << std::log(3.0), 0.5, 0.5, 0.5, 0.5, 0.5, 0.5;
    bp.objective = [this](const VecX& x) { return value(x); };
    bp.gradient = [this](const VecX& x) { return gradient(x); };
    return bp;
  }

  std::size_t active_points() const { return active_.size(); }
  std::size_t overlap_pixels() const { return pixels_.size(); }

 private:
  struct PixelMatch {
    std::size_t point;
    double observed;
  };

  const PointCloud& mano_;
  const PointCloud& observed_;
  const KdTree& tree_;
  const DepthImage& depth_;
  const ImageMask& mask_;
  CameraIntrinsics K_;
  AlignConfig cfg_;
  std::vector<Capsule> occluders_;
  std::vector<std::size_t> active_;
  std::vector<Vec3> targets_;
  std::vector<Vec3> target_normals_;
  std::vector<PixelMatch> pixels_;
};

inline PointCloud ensure_normals(const PointCloud& cloud) {
  if (cloud.has_normals()) return cloud;
  return estimate_normals(cloud, std::min<int>(10, static_cast<int>(cloud.size())), Vec3::Zero());
}

inline SurfaceSampling model_sampling(const HandFrame& hand, const AlignConfig& cfg) {
  SurfaceSampling s = sampling_for_hand(hand.joints);
  s.num_points = cfg.mano_points;
  s.seed = cfg.sampling_seed;
  return s;
}

inline PointCloud model_cloud(const HandFrame& hand, const AlignConfig& cfg) {
  return sample_hand_surface(hand.joints, model_sampling(hand, cfg));
}

// Per-frame scale and rigid correction. `mano` is expressed in the same
// frame as the observation; `occluders` (same frame) hide model samples that
// lie behind other parts of the hand.
inline HandAlignment align_hand_frame(const PointCloud& mano, const Observation& obs,
                                      const CameraIntrinsics& K, const HandAlignment& init,
                                      const AlignConfig& cfg,
                                      std::vector<Capsule> occluders = {}) {
  cfg.validate();
  if (obs.cloud.empty()) throw AlignmentFailure("observed cloud is empty");
  if (obs.cloud.size() < 3) throw AlignmentFailure("observed cloud has fewer than 3 points");
  if (mano.empty()) throw AlignmentFailure("model cloud is empty");
  const PointCloud observed = ensure_normals(obs.cloud);
  const KdTree tree = build_index(observed);
  AlignmentObjective obj(mano, observed, tree, obs.depth, obs.mask, K, cfg, std::move(occluders));

  const BoxProblem bounds = obj.problem();
  VecX p = bounds.project(params_from_alignment(init.sigma, init.correction));
  double f;
  try {
    f = obj.true_value(p);
  } catch (const LossUndefinedError& e) {
    throw AlignmentFailure(std::string("at initialization: ") + e.what());
  }

  HandAlignment out = init;
  out.initial_objective = f;
  out.iterations = 0;
  out.converged = false;
  SolveOptions sopts;
  sopts.max_iters = cfg.inner_iters;
  // Scaling about the camera centre and translating along the optical axis
  // have nearly the same effect on depth, so the scale is settled first with
  // the twist held fixed, then all seven parameters are refined.
  bool scale_only = cfg.scale_warmup;
  for (int outer = 0; outer < cfg.outer_iters; ++outer) {
    BoxProblem bp = obj.problem();
    if (scale_only) {
      bp.lower.tail<6>() = p.tail<6>();
      bp.upper.tail<6>() = p.tail<6>();
    }
    SolveReport rep;
    try {
      rep = minimize_box(bp, p, sopts);
    } catch (const InvalidStartError& e) {
      throw AlignmentFailure(std::string("solver: ") + e.what());
    }
    out.iterations += rep.iterations;
    double f_new = f;
    bool accepted = false;
    try {
      f_new = obj.true_value(rep.x_star);
      accepted = f_new <= f;
    } catch (const LossUndefinedError&) {
      accepted = false;
    }
    const double step = accepted ? (rep.x_star - p).norm() : 0.0;
    const double gain = accepted ? f - f_new : 0.0;
    if (accepted) {
      p = rep.x_star;
      f = f_new;
    } else {
      obj.freeze(p);
    }
    if (!accepted || step < 1e-7 || gain <= 1e-12 * std::max(1.0, std::abs(f))) {
      if (scale_only) {
        scale_only = false;
        continue;
      }
      out.converged = true;
      break;
    }
  }

  const SimilarityTransform S = alignment_from_params(p);
  out.sigma = S.scale;
  out.correction = {S.rotation, Vec3(p.segment<3>(4))};
  out.final_objective = f;
  out.icp_residual = obj.icp_rms(p);
  out.depth_residual = obj.depth_term(p);
  return out;
}

inline HandAlignment align_hand_frame(const HandFrame& hand, const Observation& obs,
                                      const CameraIntrinsics& K, const HandAlignment& init,
                                      const AlignConfig& cfg) {
  const SurfaceSampling s = model_sampling(hand, cfg);
  HandAlignment a = align_hand_frame(sample_hand_surface(hand.joints, s), obs, K, init, cfg,
                                     hand_capsules(hand.joints, s));
  a.frame_index = hand.frame_index;
  return a;
}

// Sequential alignment warm-started from the previous frame, or concurrent
// independent alignment when cfg.independent is set.
inline std::vector<HandAlignment> align_trajectory(const HandTrajectory& traj,
                                                   const std::vector<Observation>& observations,
                                                   const CameraIntrinsics& K,
                                                   const AlignConfig& cfg) {
  cfg.validate();
  if (observations.size() != traj.frames.size())
    throw InvalidArgument("align_trajectory: " + std::to_string(observations.size()) +
                          " observations for " + std::to_string(traj.frames.size()) + " frames");
  auto run = [&](std::size_t i, const HandAlignment& init) {
    const HandFrame& hand = traj.frames[i];
    try {
      return align_hand_frame(hand, observations[i], K, init, cfg);
    } catch (const Error& e) {
      throw AlignmentFailure("frame " + std::to_string(hand.frame_index) + ": " + e.what());
    }
  };
  std::vector<HandAlignment> out;
  out.reserve(traj.frames.size());
  if (cfg.independent) {
    std::vector<std::future<HandAlignment>> jobs;
    for (std::size_t i = 0; i < traj.frames.size(); ++i)
      jobs.push_back(std::async(std::launch::async, run, i, HandAlignment{}));
    for (auto& j : jobs) out.push_back(j.get());
    return out;
  }
  HandAlignment prev;
  for (std::size_t i = 0; i < traj.frames.size(); ++i) {
    prev = run(i, prev);
    out.push_back(prev);
  }
  return out;
}

}  // namespace retarget
