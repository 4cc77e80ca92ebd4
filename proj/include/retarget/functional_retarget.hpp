#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "retarget/errors.hpp"
#include "retarget/geometry.hpp"
#include "retarget/hand_align.hpp"
#include "retarget/hand_model.hpp"
#include "retarget/robot_model.hpp"
#include "retarget/solver.hpp"

namespace retarget {

struct RetargetConfig {
  double huber_delta = 0.02;
  double lambda_smooth = 1.0;
  double s = 1.0;               // global hand scale
  std::vector<double> weights;  // per vector pair; empty means all ones
  SolveOptions solver;
  RigidTransform mount;         // robot root frame relative to the human wrist frame

  void validate() const {
    if (!(huber_delta > 0.0)) throw ConfigError("retarget: huber_delta must be > 0");
    if (!(lambda_smooth >= 0.0)) throw ConfigError("retarget: lambda_smooth must be >= 0");
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("retarget: s must be > 0");
    for (double w : weights)
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("retarget: weights must be >= 0");
  }
};

struct RobotFrame {
  int frame_index = 0;
  RigidTransform wrist_pose;  // pose of the robot root link
  JointConfig q;
};

struct RobotTrajectory {
  std::string robot_name;
  std::vector<std::string> joint_names;  // layout of q
  std::vector<RobotFrame> frames;

  void validate(const RobotModel& model, double tol = 1e-9) const {
    for (std::size_t i = 0; i < frames.size(); ++i) {
      if (i > 0 && frames[i].frame_index <= frames[i - 1].frame_index)
        throw ValidationError("robot trajectory: frame indices must be strictly increasing");
      model.check_config(frames[i].q, "robot trajectory");
      if (!within_limits(model, frames[i].q, tol))
        throw ValidationError("robot trajectory: frame " + std::to_string(frames[i].frame_index) +
                              " violates joint limits");
    }
  }
};

// ---------------------------------------------------------------------------
// Vector matching

namespace detail {

struct PairLinks {
  int origin;
  int end;
};

inline std::vector<PairLinks> pair_links(const RobotModel& model, const VectorSpec& spec) {
  std::vector<PairLinks> out;
  out.reserve(spec.size());
  for (const auto& p : spec.pairs) {
    if (!model.has_link(p.robot_origin) || !model.has_link(p.robot_end))
      throw InvalidArgument("vector spec references unknown link '" +
                            (model.has_link(p.robot_origin) ? p.robot_end : p.robot_origin) + "'");
    out.push_back({model.link_index(p.robot_origin), model.link_index(p.robot_end)});
  }
  return out;
}

inline std::vector<double> resolve_weights(const RetargetConfig& cfg, std::size_t n) {
  if (cfg.weights.empty()) return std::vector<double>(n, 1.0);
  if (cfg.weights.size() != n)
    throw InvalidArgument("retarget: " + std::to_string(cfg.weights.size()) + " weights for " +
                          std::to_string(n) + " vector pairs");
  return cfg.weights;
}

}  // namespace detail

// Weighted mean Huber penalty on the vector discrepancies. Pairs with zero
// weight are skipped.
class VectorMatching {
 public:
  VectorMatching(const RobotModel& model, const RigidTransform& wrist, std::vector<Vec3> ref,
                 const VectorSpec& spec, const RetargetConfig& cfg)
      : model_(model), wrist_(wrist), ref_(std::move(ref)), links_(detail::pair_links(model, spec)),
        weights_(detail::resolve_weights(cfg, spec.size())), delta_(cfg.huber_delta) {
    if (ref_.size() != spec.size())
      throw InvalidArgument("vector_matching_loss: " + std::to_string(ref_.size()) +
                            " reference vectors for " + std::to_string(spec.size()) + " pairs");
    if (spec.size() == 0) throw InvalidArgument("vector_matching_loss: empty vector spec");
  }

  double value(const JointConfig& q) const {
    const auto poses = model_.link_poses(q, wrist_);
    double sum = 0.0;
    for (std::size_t i = 0; i < links_.size(); ++i) {
      if (weights_[i] == 0.0) continue;
      const Vec3 d = robot_vector(poses, i) - ref_[i];
      sum += weights_[i] * huber(d.norm(), delta_);
    }
    return sum / static_cast<double>(links_.size());
  }

  VecX gradient(const JointConfig& q) const {
    const auto poses = model_.link_poses(q, wrist_);
    VecX g = VecX::Zero(model_.dof());
    std::map<int, Eigen::Matrix<double, 3, Eigen::Dynamic>> jac;
    auto J = [&](int link) -> const Eigen::Matrix<double, 3, Eigen::Dynamic>& {
      auto it = jac.find(link);
      if (it == jac.end()) it = jac.emplace(link, model_.origin_jacobian(poses, link)).first;
      return it->second;
    };
    for (std::size_t i = 0; i < links_.size(); ++i) {
      if (weights_[i] == 0.0) continue;
      const Vec3 d = robot_vector(poses, i) - ref_[i];
      const double r = d.norm();
      // d/dq H(|d|) = H'(r) / r * d^T dd/dq, with H'(r)/r = 1 on the quadratic branch.
      const double c = r <= delta_ ? 1.0 : delta_ / r;
      g += (weights_[i] * c) * ((J(links_[i].end) - J(links_[i].origin)).transpose() * d);
    }
    return g / static_cast<double>(links_.size());
  }

  std::vector<Vec3> robot_vectors(const JointConfig& q) const {
    const auto poses = model_.link_poses(q, wrist_);
    std::vector<Vec3> out;
    for (std::size_t i = 0; i < links_.size(); ++i) out.push_back(robot_vector(poses, i));
    return out;
  }

 private:
  Vec3 robot_vector(const RobotModel::Poses& poses, std::size_t i) const {
    return poses.p[static_cast<std::size_t>(links_[i].end)] -
           poses.p[static_cast<std::size_t>(links_[i].origin)];
  }

  const RobotModel& model_;
  RigidTransform wrist_;
  std::vector<Vec3> ref_;
  std::vector<detail::PairLinks> links_;
  std::vector<double> weights_;
  double delta_;
};

inline double vector_matching_loss(const RobotModel& model, const JointConfig& q,
                                   const RigidTransform& wrist, const std::vector<Vec3>& ref,
                                   const VectorSpec& spec, const RetargetConfig& cfg) {
  cfg.validate();
  model.check_config(q, "vector_matching_loss");
  return VectorMatching(model, wrist, ref, spec, cfg).value(q);
}

inline double smoothness_loss(const JointConfig& q, const JointConfig& q_prev,
                              double lambda_smooth) {
  if (q.size() != q_prev.size())
    throw InvalidArgument("smoothness_loss: configurations differ in length");
  return lambda_smooth * (q.values - q_prev.values).squaredNorm();
}

struct RetargetResult {
  JointConfig q;
  SolveReport report;
};

// L_vector + lambda_smooth * |q - q_prev|^2 over the joint-limit box, with an
// analytic gradient.
inline BoxProblem retarget_problem(const RobotModel& model, const VectorMatching& vm,
                                   const std::optional<JointConfig>& q_prev, double lambda_smooth) {
  BoxProblem bp;
  bp.lower = model.lower_limits();
  bp.upper = model.upper_limits();
  const bool smooth = q_prev.has_value() && lambda_smooth > 0.0;
  const VecX prev = q_prev ? q_prev->values : VecX();
  bp.objective = [&vm, smooth, prev, lambda_smooth](const VecX& x) {
    double f = vm.value(JointConfig(x));
    if (smooth) f += lambda_smooth * (x - prev).squaredNorm();
    return f;
  };
  bp.gradient = [&vm, smooth, prev, lambda_smooth](const VecX& x) {
    VecX g = vm.gradient(JointConfig(x));
    if (smooth) g += 2.0 * lambda_smooth * (x - prev);
    return g;
  };
  return bp;
}

inline RetargetResult retarget_frame(const RobotModel& model, const std::vector<Vec3>& ref,
                                     const VectorSpec& spec, const RigidTransform& wrist,
                                     const std::optional<JointConfig>& q_prev,
                                     const JointConfig& q0, const RetargetConfig& cfg) {
  cfg.validate();
  model.check_config(q0, "retarget_frame");
  if (q_prev) model.check_config(*q_prev, "retarget_frame");
  const VectorMatching vm(model, wrist, ref, spec, cfg);
  const BoxProblem bp = retarget_problem(model, vm, q_prev, cfg.lambda_smooth);
  RetargetResult out;
  try {
    out.report = minimize_box(bp, q0.values, cfg.solver);
  } catch (const InvalidStartError& e) {
    throw RetargetFailure(std::string("solver: ") + e.what());
  }
  out.q = JointConfig(bp.project(out.report.x_star));
  return out;
}

struct RetargetFrameReport {
  int frame_index = 0;
  double loss = 0.0;  // L_vector at the solution
  SolveReport solve;
};

struct RetargetTrajectoryResult {
  RobotTrajectory trajectory;
  std::vector<RetargetFrameReport> reports;
};

// Per-frame retargeting coupled through q_{t-1}. Hands are the raw estimator
// frames; each is mapped through its alignment before vectors are extracted.
inline RetargetTrajectoryResult retarget_trajectory(
    const RobotModel& model, const std::vector<HandFrame>& hands,
    const std::vector<HandAlignment>& alignments, const FingerMapping& mapping,
    const VectorSpec& spec, TaxonomyClass taxonomy, const TaxonomyWeightTable& table,
    const RetargetConfig& cfg) {
  cfg.validate();
  mapping.validate(model);
  spec.validate(model);
  if (hands.size() != alignments.size())
    throw InvalidArgument("retarget_trajectory: " + std::to_string(hands.size()) + " hands and " +
                          std::to_string(alignments.size()) + " alignments");
  RetargetConfig frame_cfg = cfg;
  frame_cfg.weights = taxonomy_weights(taxonomy, spec, table);
  RetargetTrajectoryResult out;
  out.trajectory.robot_name = model.name();
  out.trajectory.joint_names = model.actuated_order();
  std::optional<JointConfig> prev;
  for (std::size_t t = 0; t < hands.size(); ++t) {
    const int idx = hands[t].frame_index;
    try {
      const HandFrame aligned = hands[t].transformed(alignments[t].similarity());
      const auto ref = reference_vectors(aligned, spec, cfg.s);
      const RigidTransform wrist = aligned.wrist_pose * cfg.mount;
      RetargetConfig c = frame_cfg;
      if (!prev) c.lambda_smooth = 0.0;
      const JointConfig q0 = prev ? *prev : model.mid_limits();
      RetargetResult r = retarget_frame(model, ref, spec, wrist, prev, q0, c);
      RetargetFrameReport rep;
      rep.frame_index = idx;
      rep.loss = VectorMatching(model, wrist, ref, spec, c).value(r.q);
      rep.solve = r.report;
      out.reports.push_back(std::move(rep));
      out.trajectory.frames.push_back({idx, wrist, r.q});
      prev = r.q;
    } catch (const Error& e) {
      throw RetargetFailure("frame " + std::to_string(idx) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contact refinement

struct ContactTargets {
  std::set<Digit> active;
  std::map<Digit, Vec3> targets;
  double lambda_init = 0.1;
  int alternations = 3;

  void validate(const FingerMapping& mapping) const {
    if (active.empty()) throw InvalidArgument("contact targets: no active digits");
    if (alternations < 1) throw ConfigError("contact targets: alternations must be >= 1");
    if (!(lambda_init >= 0.0)) throw ConfigError("contact targets: lambda_init must be >= 0");
    for (Digit d : active) {
      if (!targets.count(d))
        throw InvalidArgument(std::string("contact targets: no target for ") + to_string(d));
      if (!mapping.has(d))
        throw InvalidArgument(std::string("contact targets: ") + to_string(d) + " is not mapped");
      if (!targets.at(d).allFinite())
        throw InvalidArgument(std::string("contact targets: target for ") + to_string(d) +
                              " is not finite");
    }
  }
};

class ContactObjective {
 public:
  ContactObjective(const RobotModel& model, const FingerMapping& mapping,
                   const ContactTargets& contacts)
      : model_(model) {
    contacts.validate(mapping);
    for (Digit d : contacts.active) {
      links_.push_back(model.link_index(mapping.digits.at(d).tip));
      targets_.push_back(contacts.targets.at(d));
    }
  }

  std::vector<Vec3> fingertips(const JointConfig& q, const RigidTransform& wrist) const {
    const auto poses = model_.link_poses(q, wrist);
    std::vector<Vec3> out;
    for (int l : links_) out.push_back(poses.p[static_cast<std::size_t>(l)]);
    return out;
  }

  double value(const JointConfig& q, const RigidTransform& wrist) const {
    const auto tips = fingertips(q, wrist);
    double sum = 0.0;
    for (std::size_t i = 0; i < tips.size(); ++i) sum += (tips[i] - targets_[i]).squaredNorm();
    return sum / static_cast<double>(tips.size());
  }

  VecX gradient(const JointConfig& q, const RigidTransform& wrist) const {
    const auto poses = model_.link_poses(q, wrist);
    VecX g = VecX::Zero(model_.dof());
    for (std::size_t i = 0; i < links_.size(); ++i) {
      const Vec3 d = poses.p[static_cast<std::size_t>(links_[i])] - targets_[i];
      g += 2.0 * model_.origin_jacobian(poses, links_[i]).transpose() * d;
    }
    return g / static_cast<double>(links_.size());
  }

  double mean_error(const JointConfig& q, const RigidTransform& wrist) const {
    const auto tips = fingertips(q, wrist);
    double sum = 0.0;
    for (std::size_t i = 0; i < tips.size(); ++i) sum += (tips[i] - targets_[i]).norm();
    return sum / static_cast<double>(tips.size());
  }

  const std::vector<Vec3>& targets() const { return targets_; }
  std::size_t size() const { return links_.size(); }

 private:
  const RobotModel& model_;
  std::vector<int> links_;
  std::vector<Vec3> targets_;
};

inline double contact_loss(const RobotModel& model, const JointConfig& q,
                           const RigidTransform& wrist, const FingerMapping& mapping,
                           const ContactTargets& contacts) {
  model.check_config(q, "contact_loss");
  return ContactObjective(model, mapping, contacts).value(q, wrist);
}

// Rigid correction of the wrist taking the current fingertips onto their
// targets. Needs at least three active digits.
inline RigidTransform wrist_step(const RobotModel& model, const JointConfig& q,
                                 const RigidTransform& wrist, const FingerMapping& mapping,
                                 const ContactTargets& contacts) {
  const ContactObjective obj(model, mapping, contacts);
  if (obj.size() < 3) throw InvalidArgument("wrist_step: needs at least 3 active digits");
  const auto tips = obj.fingertips(q, wrist);
  const SimilarityTransform G = weighted_umeyama(tips, obj.targets(), false);
  return G.rigid_part() * wrist;
}

struct RefineResult {
  JointConfig q;
  RigidTransform wrist;
  std::vector<double> loss_history;  // initial loss, then after every round
  std::vector<std::string> warnings;
  int solver_iterations = 0;
};

inline RefineResult refine_contact(const RobotModel& model, const JointConfig& q_init,
                                   const RigidTransform& wrist_init, const FingerMapping& mapping,
                                   const ContactTargets& contacts, const SolveOptions& opts = {}) {
  model.check_config(q_init, "refine_contact");
  if (!within_limits(model, q_init, 1e-9))
    throw InvalidArgument("refine_contact: q_init violates joint limits");
  const ContactObjective obj(model, mapping, contacts);
  RefineResult out;
  out.q = clamp_to_limits(model, q_init);
  out.wrist = wrist_init;
  double loss = obj.value(out.q, out.wrist);
  out.loss_history.push_back(loss);
  const bool wrist_enabled = obj.size() >= 3;
  if (!wrist_enabled)
    out.warnings.push_back("fewer than 3 active digits; wrist step skipped");

  const VecX anchor = q_init.values;
  const double lambda = contacts.lambda_init;
  for (int round = 0; round < contacts.alternations; ++round) {
    BoxProblem bp;
    bp.lower = model.lower_limits();
    bp.upper = model.upper_limits();
    const RigidTransform wrist = out.wrist;
    bp.objective = [&, wrist](const VecX& x) {
      return obj.value(JointConfig(x), wrist) + lambda * (x - anchor).squaredNorm();
    };
    bp.gradient = [&, wrist](const VecX& x) {
      return VecX(obj.gradient(JointConfig(x), wrist) + 2.0 * lambda * (x - anchor));
    };
    SolveReport rep;
    try {
      rep = minimize_box(bp, out.q.values, opts);
    } catch (const InvalidStartError& e) {
      throw RefineFailure(std::string("joint step: ") + e.what());
    }
    out.solver_iterations += rep.iterations;
    const JointConfig q_new(bp.project(rep.x_star));
    const double joint_loss = obj.value(q_new, out.wrist);
    if (joint_loss <= loss) {
      out.q = q_new;
      loss = joint_loss;
    }

    if (wrist_enabled && loss > 0.0) {
      RigidTransform w_new;
      try {
        w_new = wrist_step(model, out.q, out.wrist, mapping, contacts);
      } catch (const RankDeficientError&) {
        out.warnings.push_back("round " + std::to_string(round) +
                               ": degenerate fingertip geometry; wrist step skipped");
        out.loss_history.push_back(loss);
        continue;
      }
      const double wrist_loss = obj.value(out.q, w_new);
      if (wrist_loss <= loss) {
        out.wrist = w_new;
        loss = wrist_loss;
      }
    }
    out.loss_history.push_back(loss);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Grasp plan assembly

inline constexpr double kBlendCap = 0.12;  // radians per step

// Replaces the contact frame with the refined state. A neighbour whose joint
// step to the contact frame exceeds `cap` is moved to the midpoint between the
// contact frame and the frame beyond it.
inline RobotTrajectory assemble_grasp_plan(const RobotTrajectory& traj, int contact_frame_index,
                                           const JointConfig& q, const RigidTransform& wrist,
                                           double cap = kBlendCap) {
  const auto it = std::find_if(traj.frames.begin(), traj.frames.end(), [&](const RobotFrame& f) {
    return f.frame_index == contact_frame_index;
  });
  if (it == traj.frames.end())
    throw InvalidArgument("assemble_grasp_plan: no frame with index " +
                          std::to_string(contact_frame_index));
  const auto k = static_cast<std::size_t>(it - traj.frames.begin());
  if (q.size() != it->q.size())
    throw InvalidArgument("assemble_grasp_plan: refined configuration has the wrong length");
  RobotTrajectory out = traj;
  out.frames[k].q = q;
  out.frames[k].wrist_pose = wrist;
  const std::size_t n = out.frames.size();
  auto blend = [&](std::size_t nb, std::size_t outer) {
    const RobotFrame& c = out.frames[k];
    RobotFrame& f = out.frames[nb];
    if ((f.q.values - c.q.values).lpNorm<Eigen::Infinity>() <= cap) return;
    const RobotFrame& o = traj.frames[outer];
    f.q = JointConfig(0.5 * (c.q.values + o.q.values));
    const Eigen::Quaterniond qa = c.wrist_pose.rotation.quaternion();
    const Eigen::Quaterniond qb = o.wrist_pose.rotation.quaternion();
    f.wrist_pose = {Rotation::from_quaternion(qa.slerp(0.5, qb)),
                    0.5 * (c.wrist_pose.translation + o.wrist_pose.translation)};
  };
  if (k > 0) blend(k - 1, k >= 2 ? k - 2 : k - 1);
  if (k + 1 < n) blend(k + 1, k + 2 < n ? k + 2 : k + 1);
  return out;
}

}  // namespace retarget
