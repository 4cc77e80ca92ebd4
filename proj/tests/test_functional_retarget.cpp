#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "retarget/functional_retarget.hpp"
#include "retarget/synth.hpp"
#include "test_support.hpp"

using namespace retarget;
using namespace testing_support;

namespace {

// Human frame whose keypoints sit on the robot links used by the mapping at q,
// so that with s = 1 the reference vectors equal the robot vectors at q.
HandFrame hand_from_robot(const RobotModel& model, const FingerMapping& mapping, const JointConfig& q,
                          const RigidTransform& root = {}) {
  const auto f = forward_kinematics(model, q, root);
  HandFrame h;
  const Vec3 palm = f.at(mapping.palm_link).translation;
  for (auto& j : h.joints) j = palm;
  for (const auto& [d, links] : mapping.digits) {
    for (int k = 0; k < 4; ++k) h.joints[static_cast<std::size_t>(digit_keypoint(d, k))] = palm;
    h.joints[static_cast<std::size_t>(tip_keypoint(d))] = f.at(links.tip).translation;
    if (!links.proximal.empty())
      h.joints[static_cast<std::size_t>(proximal_end_keypoint(d))] = f.at(links.proximal).translation;
  }
  h.wrist_pose = root;
  return h;
}

RobotModel arm(double lower, double upper) {
  ChainJoint j;
  j.lower = lower;
  j.upper = upper;
  ChainJoint tip;
  tip.type = "fixed";
  tip.xyz = Vec3(0.1, 0, 0);
  return parse_urdf(chain_urdf({j, tip}));
}

VectorSpec arm_spec() {
  VectorSpec spec;
  spec.pairs.push_back({kWrist, tip_keypoint(Digit::kIndex), "link0", "link2", VectorGroup::kWristToTip});
  return spec;
}

RetargetConfig no_smoothing() {
  RetargetConfig c;
  c.lambda_smooth = 0.0;
  return c;
}

ContactTargets targets_at(const RobotModel& m, const FingerMapping& map, const JointConfig& q,
                          const RigidTransform& wrist, std::initializer_list<Digit> digits) {
  ContactTargets ct;
  const auto f = forward_kinematics(m, q, wrist);
  for (Digit d : digits) {
    ct.active.insert(d);
    ct.targets[d] = f.at(map.digits.at(d).tip).translation;
  }
  return ct;
}

}  // namespace

TEST(VectorLoss, Examples) {
  const RobotModel m = arm(-1, 1);
  const JointConfig q = m.zeros();
  const VectorSpec spec = arm_spec();
  EXPECT_EQ(vector_matching_loss(m, q, {}, {Vec3(0.1, 0, 0)}, spec, RetargetConfig{}), 0.0);
  EXPECT_NEAR(vector_matching_loss(m, q, {}, {Vec3(0.11, 0, 0)}, spec, RetargetConfig{}), 5e-5, 1e-15);
  RetargetConfig zero;
  zero.weights = {0.0};
  EXPECT_EQ(vector_matching_loss(m, q, {}, {Vec3(0.5, 0, 0)}, spec, zero), 0.0);
  // Linear branch of the Huber penalty beyond delta.
  EXPECT_NEAR(vector_matching_loss(m, q, {}, {Vec3(0.15, 0, 0)}, spec, RetargetConfig{}),
              0.02 * (0.05 - 0.01), 1e-15);
  EXPECT_THROW(vector_matching_loss(m, q, {}, {}, spec, RetargetConfig{}), InvalidArgument);
}

TEST(VectorLoss, UniformTableEqualsUnweightedMean) {
  std::mt19937_64 rng(1);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const VectorSpec spec = default_vector_spec(map);
  for (int trial = 0; trial < 5; ++trial) {
    const JointConfig q = random_config(m, rng);
    std::vector<Vec3> ref;
    for (std::size_t i = 0; i < spec.size(); ++i) ref.push_back(random_vec(rng, -0.1, 0.1));
    RetargetConfig uniform;
    uniform.weights = taxonomy_weights(TaxonomyClass::kTripod, spec, TaxonomyWeightTable::uniform());
    const double weighted = vector_matching_loss(m, q, {}, ref, spec, uniform);
    // Independent unweighted mean of Huber(|v_robot - v_ref|).
    const auto f = forward_kinematics(m, q);
    double sum = 0.0;
    for (std::size_t i = 0; i < spec.size(); ++i) {
      const Vec3 v = f.at(spec.pairs[i].robot_end).translation - f.at(spec.pairs[i].robot_origin).translation;
      const double r = (v - ref[i]).norm();
      sum += r <= 0.02 ? 0.5 * r * r : 0.02 * (r - 0.01);
    }
    EXPECT_NEAR(weighted, sum / static_cast<double>(spec.size()), 1e-15);
  }
}

TEST(SmoothnessLoss, Examples) {
  JointConfig a(Eigen::VectorXd::Zero(3)), b = a;
  EXPECT_EQ(smoothness_loss(a, a, 1.0), 0.0);
  b[1] = 0.1;
  EXPECT_NEAR(smoothness_loss(b, a, 1.0), 0.01, 1e-16);
  EXPECT_EQ(smoothness_loss(b, a, 0.0), 0.0);
  EXPECT_THROW(smoothness_loss(a, JointConfig(Eigen::VectorXd::Zero(2)), 1.0), InvalidArgument);
}

TEST(RetargetFrame, FkRoundTrip) {
  std::mt19937_64 rng(2);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const VectorSpec spec = default_vector_spec(map);
  for (int trial = 0; trial < 10; ++trial) {
    const JointConfig qs = random_config(m, rng, 0.05);
    const RigidTransform wrist{random_rotation(rng), random_vec(rng)};
    const auto ref = reference_vectors(hand_from_robot(m, map, qs, wrist), spec, 1.0);
    const auto r = retarget_frame(m, ref, spec, wrist, std::nullopt, m.mid_limits(), no_smoothing());
    EXPECT_LT(vector_matching_loss(m, r.q, wrist, ref, spec, no_smoothing()), 1e-6);
    EXPECT_TRUE(within_limits(m, r.q, 0.0));
  }
}

TEST(RetargetFrame, DominantSmoothnessHoldsPrevious) {
  std::mt19937_64 rng(3);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const VectorSpec spec = default_vector_spec(map);
  const JointConfig target = random_config(m, rng, 0.05);
  const JointConfig prev = random_config(m, rng, 0.05);
  const auto ref = reference_vectors(hand_from_robot(m, map, target), spec, 1.0);
  RetargetConfig c;
  c.lambda_smooth = 1e9;
  const auto r = retarget_frame(m, ref, spec, {}, prev, m.mid_limits(), c);
  EXPECT_LT((r.q.values - prev.values).lpNorm<Eigen::Infinity>(), 1e-4);
}

TEST(RetargetFrame, UpperLimitIsActive) {
  const RobotModel m = arm(-0.5, 0.5);
  const std::vector<Vec3> ref = {0.1 * Vec3(std::cos(1.0), std::sin(1.0), 0.0)};
  const auto r = retarget_frame(m, ref, arm_spec(), {}, std::nullopt, m.zeros(), no_smoothing());
  EXPECT_EQ(r.q[0], 0.5);
  const auto lo = retarget_frame(m, {0.1 * Vec3(std::cos(-1.0), std::sin(-1.0), 0.0)}, arm_spec(), {},
                                 std::nullopt, m.zeros(), no_smoothing());
  EXPECT_EQ(lo.q[0], -0.5);
}

TEST(RetargetFrame, ZeroWeightIndependence) {
  std::mt19937_64 rng(4);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const VectorSpec spec = default_vector_spec(map);
  const auto ref = reference_vectors(hand_from_robot(m, map, random_config(m, rng, 0.05)), spec, 1.0);
  RetargetConfig c = no_smoothing();
  c.weights = taxonomy_weights(TaxonomyClass::kMediumWrap, spec, default_taxonomy_table());
  c.weights[1] = 0.0;
  c.weights[5] = 0.0;
  const auto base = retarget_frame(m, ref, spec, {}, std::nullopt, m.mid_limits(), c);
  for (int trial = 0; trial < 5; ++trial) {
    auto moved = ref;
    moved[1] = random_vec(rng);
    moved[5] = random_vec(rng);
    const auto r = retarget_frame(m, moved, spec, {}, std::nullopt, m.mid_limits(), c);
    EXPECT_EQ(r.q.values, base.q.values);
    EXPECT_EQ(r.report.f_history, base.report.f_history);
  }
}

TEST(RetargetFrame, SmoothnessMonotone) {
  std::mt19937_64 rng(5);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const VectorSpec spec = default_vector_spec(map);
  for (int trial = 0; trial < 5; ++trial) {
    const JointConfig prev = random_config(m, rng, 0.1);
    const auto ref = reference_vectors(hand_from_robot(m, map, random_config(m, rng, 0.1)), spec, 1.0);
    double last = std::numeric_limits<double>::infinity();
    for (double lambda : {0.0, 0.1, 1.0, 10.0, 100.0}) {
      RetargetConfig c;
      c.lambda_smooth = lambda;
      c.solver.max_iters = 1000;
      const auto r = retarget_frame(m, ref, spec, {}, prev, prev, c);
      const double step = (r.q.values - prev.values).norm();
      EXPECT_LE(step, last + 1e-9) << "lambda " << lambda;
      last = step;
    }
  }
}

TEST(RetargetFrame, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const VectorSpec spec = default_vector_spec(map);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ref = reference_vectors(hand_from_robot(m, map, random_config(m, rng)), spec, 1.3);
    RetargetConfig c;
    c.weights = taxonomy_weights(TaxonomyClass::kLateralTripod, spec, default_taxonomy_table());
    const VectorMatching vm(m, {}, ref, spec, c);
    const JointConfig prev = random_config(m, rng);
    const BoxProblem bp = retarget_problem(m, vm, prev, 0.7);
    EXPECT_LT(check_gradient(bp, random_config(m, rng).values), 1e-5);
  }
}

TEST(RetargetFrame, InfeasibleStartIsProjected) {
  const RobotModel m = arm(-0.5, 0.5);
  JointConfig q0 = m.zeros();
  q0[0] = 0.9;
  const auto r = retarget_frame(m, {Vec3(0.1, 0, 0)}, arm_spec(), {}, std::nullopt, q0, no_smoothing());
  EXPECT_NEAR(r.q[0], 0.0, 1e-6);
  EXPECT_TRUE(within_limits(m, r.q, 0.0));
}

TEST(RetargetTrajectory, SingleFrame) {
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  SynthParams p;
  p.n_frames = 1;
  const SynthFixture fx = synth_hand_trajectory(p);
  RetargetConfig c;
  c.s = compute_hand_scale(m, map, fx.trajectory.frames[0]);
  const auto r = retarget_trajectory(m, fx.trajectory.frames, {HandAlignment{}}, map, default_vector_spec(map),
                                     TaxonomyClass::kMediumWrap, default_taxonomy_table(), c);
  EXPECT_EQ(r.trajectory.frames.size(), 1u);
  EXPECT_EQ(r.trajectory.joint_names, m.actuated_order());
  EXPECT_NO_THROW(r.trajectory.validate(m));
}

TEST(RetargetTrajectory, ConstantHandIsStationary) {
  std::mt19937_64 rng(7);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const HandFrame h = hand_from_robot(m, map, random_config(m, rng, 0.1));
  std::vector<HandFrame> hands;
  for (int i = 0; i < 10; ++i) {
    hands.push_back(h);
    hands.back().frame_index = i;
  }
  const auto r = retarget_trajectory(m, hands, std::vector<HandAlignment>(10), map, default_vector_spec(map),
                                     TaxonomyClass::kPowerSphere, default_taxonomy_table(), RetargetConfig{});
  for (const auto& f : r.trajectory.frames)
    EXPECT_LT((f.q.values - r.trajectory.frames[0].q.values).lpNorm<Eigen::Infinity>(), 1e-6);
}

TEST(RetargetTrajectory, ClosingTrajectoryTracks) {
  // Robot-consistent closing motion: q_t moves linearly from an open to a closed config.
  std::mt19937_64 rng(8);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const JointConfig open = random_config(m, rng, 0.1), closed = random_config(m, rng, 0.1);
  const int n = 10;
  std::vector<HandFrame> hands;
  for (int t = 0; t < n; ++t) {
    const double a = static_cast<double>(t) / (n - 1);
    hands.push_back(hand_from_robot(m, map, JointConfig((1 - a) * open.values + a * closed.values)));
    hands.back().frame_index = t;
  }
  const double rate = (closed.values - open.values).lpNorm<Eigen::Infinity>() / (n - 1);
  RetargetConfig c;
  c.lambda_smooth = 1e-4;
  const auto r = retarget_trajectory(m, hands, std::vector<HandAlignment>(n), map, default_vector_spec(map),
                                     TaxonomyClass::kTripod, TaxonomyWeightTable::uniform(), c);
  for (const auto& rep : r.reports) EXPECT_LT(rep.loss, 1e-4) << rep.frame_index;
  for (int t = 1; t < n; ++t) {
    const double step =
        (r.trajectory.frames[t].q.values - r.trajectory.frames[t - 1].q.values).lpNorm<Eigen::Infinity>();
    EXPECT_LE(step, 1.5 * rate) << t;
  }
}

TEST(RetargetTrajectory, GlobalScaleConsistency) {
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  SynthParams p;
  p.n_frames = 2;
  const SynthFixture fx = synth_hand_trajectory(p);
  std::vector<HandFrame> doubled;
  for (const auto& f : fx.trajectory.frames) doubled.push_back(f.transformed({2.0, Rotation(), Vec3::Zero()}));
  RetargetConfig a, b;
  a.s = compute_hand_scale(m, map, fx.trajectory.frames[0]);
  b.s = compute_hand_scale(m, map, doubled[0]);
  EXPECT_NEAR(b.s, a.s / 2, 1e-15);
  const VectorSpec spec = default_vector_spec(map);
  const auto va = reference_vectors(fx.trajectory.frames[1], spec, a.s);
  const auto vb = reference_vectors(doubled[1], spec, b.s);
  for (std::size_t i = 0; i < va.size(); ++i) EXPECT_LT((va[i] - vb[i]).norm(), 1e-15);
  // Wrist placement differs (it follows the hand), joint solutions agree.
  const auto ra = retarget_trajectory(m, fx.trajectory.frames, std::vector<HandAlignment>(2), map, spec,
                                      TaxonomyClass::kMediumWrap, default_taxonomy_table(), a);
  const auto rb = retarget_trajectory(m, doubled, std::vector<HandAlignment>(2), map, spec,
                                      TaxonomyClass::kMediumWrap, default_taxonomy_table(), b);
  for (std::size_t t = 0; t < 2; ++t)
    EXPECT_LT((ra.trajectory.frames[t].q.values - rb.trajectory.frames[t].q.values).norm(), 1e-9);
}

TEST(RetargetTrajectory, LengthMismatch) {
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  EXPECT_THROW(retarget_trajectory(m, {HandFrame{}}, {}, map, default_vector_spec(map), TaxonomyClass::kTripod,
                                   default_taxonomy_table(), RetargetConfig{}),
               InvalidArgument);
}

TEST(ContactLoss, Examples) {
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const JointConfig q = m.mid_limits();
  ContactTargets ct = targets_at(m, map, q, {}, {Digit::kThumb, Digit::kIndex, Digit::kMiddle});
  EXPECT_EQ(contact_loss(m, q, {}, map, ct), 0.0);

  ContactTargets one = targets_at(m, map, q, {}, {Digit::kIndex});
  one.targets[Digit::kIndex] += Vec3(0, 0.03, 0);
  EXPECT_NEAR(contact_loss(m, q, {}, map, one), 9e-4, 1e-15);

  ContactTargets two = targets_at(m, map, q, {}, {Digit::kIndex, Digit::kMiddle});
  two.targets[Digit::kIndex] += Vec3(0.01, 0, 0);
  two.targets[Digit::kMiddle] += Vec3(0, 0, -0.03);
  EXPECT_NEAR(contact_loss(m, q, {}, map, two), 5e-4, 1e-15);

  EXPECT_THROW(contact_loss(m, q, {}, map, ContactTargets{}), InvalidArgument);
  ContactTargets pinky;
  pinky.active.insert(Digit::kPinky);
  pinky.targets[Digit::kPinky] = Vec3::Zero();
  EXPECT_THROW(contact_loss(m, q, {}, map, pinky), InvalidArgument);
}

TEST(RefineContact, ZeroLossStartIsUnchanged) {
  std::mt19937_64 rng(9);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const JointConfig q = random_config(m, rng, 0.1);
  const RigidTransform wrist{random_rotation(rng), random_vec(rng)};
  const ContactTargets ct = targets_at(m, map, q, wrist, {Digit::kThumb, Digit::kIndex, Digit::kMiddle});
  const auto r = refine_contact(m, q, wrist, map, ct);
  EXPECT_LT((r.q.values - q.values).lpNorm<Eigen::Infinity>(), 1e-9);
  EXPECT_LT((r.wrist.matrix() - wrist.matrix()).lpNorm<Eigen::Infinity>(), 1e-9);
}

TEST(RefineContact, ReachablePerturbedTargets) {
  std::mt19937_64 rng(10);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  std::uniform_real_distribution<double> u(-0.26, 0.26);
  for (int trial = 0; trial < 20; ++trial) {
    const JointConfig q0 = random_config(m, rng, 0.15);
    JointConfig qd = q0;
    for (int i = 0; i < m.dof(); ++i) qd[i] += u(rng);
    qd = clamp_to_limits(m, qd);
    ContactTargets ct = targets_at(m, map, qd, {}, {Digit::kThumb, Digit::kIndex, Digit::kMiddle, Digit::kRing});
    ct.lambda_init = 1e-6;
    const auto r = refine_contact(m, q0, {}, map, ct);
    const ContactObjective obj(m, map, ct);
    EXPECT_LT(obj.mean_error(r.q, r.wrist), 1e-3) << trial;
    EXPECT_TRUE(within_limits(m, r.q, 1e-9));
    for (std::size_t k = 1; k < r.loss_history.size(); ++k)
      EXPECT_LE(r.loss_history[k], r.loss_history[k - 1]);
  }
}

TEST(RefineContact, WristStepRecoversRigidDisplacement) {
  std::mt19937_64 rng(11);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  for (int trial = 0; trial < 5; ++trial) {
    const JointConfig q = random_config(m, rng, 0.1);
    const RigidTransform wrist{random_rotation(rng), random_vec(rng, -0.1, 0.1)};
    const RigidTransform G{random_rotation(rng, 0.2), random_vec(rng, -0.03, 0.03)};
    ContactTargets ct = targets_at(m, map, q, G * wrist, {Digit::kThumb, Digit::kIndex, Digit::kMiddle, Digit::kRing});
    const RigidTransform w1 = wrist_step(m, q, wrist, map, ct);
    EXPECT_LT((w1.matrix() - (G * wrist).matrix()).lpNorm<Eigen::Infinity>(), 1e-6);
    EXPECT_LT(contact_loss(m, q, w1, map, ct), 1e-10);
    // Joints pinned by a stiff anchor: refinement moves only the wrist.
    ct.lambda_init = 1e6;
    const auto r = refine_contact(m, q, wrist, map, ct);
    EXPECT_LT((r.wrist.matrix() - (G * wrist).matrix()).lpNorm<Eigen::Infinity>(), 1e-6);
  }
}

TEST(RefineContact, FewDigitsSkipWristStep) {
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  const JointConfig q = m.mid_limits();
  ContactTargets ct = targets_at(m, map, q, {}, {Digit::kThumb, Digit::kIndex});
  ct.targets[Digit::kIndex] += Vec3(0, 0, 0.01);
  const auto r = refine_contact(m, q, {}, map, ct);
  ASSERT_FALSE(r.warnings.empty());
  EXPECT_EQ(r.wrist.matrix(), RigidTransform{}.matrix());
  EXPECT_LT(r.loss_history.back(), r.loss_history.front());
}

TEST(RefineContact, FuzzStaysFeasible) {
  std::mt19937_64 rng(12);
  const RobotModel m = allegro();
  const FingerMapping map = allegro_finger_mapping();
  for (int trial = 0; trial < 50; ++trial) {
    ContactTargets ct;
    for (Digit d : {Digit::kThumb, Digit::kIndex, Digit::kMiddle, Digit::kRing}) {
      ct.active.insert(d);
      ct.targets[d] = random_vec(rng, -0.3, 0.3);
    }
    ct.alternations = 2;
    const auto r = refine_contact(m, random_config(m, rng), {}, map, ct);
    EXPECT_TRUE(within_limits(m, r.q, 1e-9));
  }
}

TEST(AssembleGraspPlan, Examples) {
  const RobotModel m = allegro();
  RobotTrajectory traj;
  for (int i = 0; i < 5; ++i) traj.frames.push_back({i, RigidTransform{}, m.mid_limits()});
  const auto same = assemble_grasp_plan(traj, 2, traj.frames[2].q, traj.frames[2].wrist_pose);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(same.frames[i].q.values, traj.frames[i].q.values);

  JointConfig refined = traj.frames[2].q;
  refined[4] += 0.2;
  for (int k : {0, 2, 4}) {
    const auto out = assemble_grasp_plan(traj, k, refined, RigidTransform{});
    EXPECT_EQ(out.frames[static_cast<std::size_t>(k)].q.values, refined.values);
    for (std::size_t i = 1; i < 5; ++i)
      EXPECT_LE((out.frames[i].q.values - out.frames[i - 1].q.values).lpNorm<Eigen::Infinity>(), 0.12 + 1e-15)
          << "contact " << k << " step " << i;
  }

  RobotTrajectory single;
  single.frames.push_back(traj.frames[0]);
  const auto one = assemble_grasp_plan(single, 0, refined, RigidTransform{});
  EXPECT_EQ(one.frames[0].q.values, refined.values);
  EXPECT_THROW(assemble_grasp_plan(traj, 9, refined, RigidTransform{}), InvalidArgument);
}
