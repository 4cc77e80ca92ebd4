#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "retarget/geometry.hpp"
#include "retarget/pointcloud.hpp"
#include "retarget/robot_model.hpp"

namespace retarget {

// ---------------------------------------------------------------------------
// 21-keypoint skeleton: wrist, then thumb..pinky, each proximal to tip.

inline constexpr int kNumKeypoints = 21;
inline constexpr int kWrist = 0;

enum class Digit { kThumb = 0, kIndex = 1, kMiddle = 2, kRing = 3, kPinky = 4 };
inline constexpr std::array<Digit, 5> kAllDigits = {Digit::kThumb, Digit::kIndex, Digit::kMiddle,
                                                    Digit::kRing, Digit::kPinky};

inline const char* to_string(Digit d) {
  switch (d) {
    case Digit::kThumb: return "thumb";
    case Digit::kIndex: return "index";
    case Digit::kMiddle: return "middle";
    case Digit::kRing: return "ring";
    case Digit::kPinky: return "pinky";
  }
  return "?";
}

inline std::optional<Digit> digit_from_string(std::string_view s) {
  for (Digit d : kAllDigits)
    if (s == to_string(d)) return d;
  return std::nullopt;
}

// Keypoint id of joint k (0 = base, 3 = tip) along a digit.
inline int digit_keypoint(Digit d, int k) { return 1 + 4 * static_cast<int>(d) + k; }
inline int tip_keypoint(Digit d) { return digit_keypoint(d, 3); }
// Distal end of the proximal phalanx: IP for the thumb, PIP for fingers.
inline int proximal_end_keypoint(Digit d) {
  return digit_keypoint(d, d == Digit::kThumb ? 2 : 1);
}

inline std::array<Vec3, kNumKeypoints> zero_joints() {
  std::array<Vec3, kNumKeypoints> j;
  j.fill(Vec3::Zero());
  return j;
}

struct HandFrame {
  std::array<Vec3, kNumKeypoints> joints = zero_joints();
  RigidTransform wrist_pose;
  double confidence = 1.0;
  int frame_index = 0;

  void validate() const {
    for (std::size_t i = 0; i < joints.size(); ++i)
      if (!joints[i].allFinite())
        throw InvalidArgument("frame " + std::to_string(frame_index) + ": joint " +
                              std::to_string(i) + " is not finite");
    if (!(confidence >= 0.0 && confidence <= 1.0))
      throw InvalidArgument("frame " + std::to_string(frame_index) +
                            ": confidence must lie in [0, 1]");
    if ((joints[kWrist] - wrist_pose.translation).norm() > 1e-6)
      throw InvalidArgument("frame " + std::to_string(frame_index) +
                            ": joint 0 does not coincide with the wrist translation");
  }

  HandFrame transformed(const SimilarityTransform& T) const {
    HandFrame out = *this;
    for (auto& j : out.joints) j = T.apply(j);
    out.wrist_pose = {T.rotation * wrist_pose.rotation, T.apply(wrist_pose.translation)};
    return out;
  }
};

struct HandTrajectory {
  std::vector<HandFrame> frames;
  double fps = 30.0;
  // Annotated contact points keyed by frame index, in the observation frame.
  std::map<int, std::map<Digit, Vec3>> contacts;

  void validate() const {
    for (std::size_t i = 0; i < frames.size(); ++i) {
      frames[i].validate();
      if (i > 0 && frames[i].frame_index <= frames[i - 1].frame_index)
        throw InvalidArgument("frame indices must be strictly increasing (frame " +
                              std::to_string(frames[i].frame_index) + ")");
    }
  }
};

// ---------------------------------------------------------------------------
// Finger mapping

struct DigitLinks {
  std::string tip;
  std::string proximal;  // link at the distal end of the proximal segment; may be empty
};

// Human digit -> robot links. palm_link is the robot frame matched to the
// human wrist keypoint.
struct FingerMapping {
  std::string palm_link;
  std::map<Digit, DigitLinks> digits;

  bool has(Digit d) const { return digits.count(d) > 0; }

  void validate(const RobotModel& model) const {
    if (!model.has_link(palm_link))
      throw ConfigError("finger mapping: palm link '" + palm_link + "' does not exist");
    std::set<std::string> tips;
    for (const auto& [d, links] : digits) {
      if (!model.has_link(links.tip))
        throw ConfigError(std::string("finger mapping: ") + to_string(d) + " tip link '" +
                          links.tip + "' does not exist");
      if (!links.proximal.empty() && !model.has_link(links.proximal))
        throw ConfigError(std::string("finger mapping: ") + to_string(d) + " proximal link '" +
                          links.proximal + "' does not exist");
      if (!tips.insert(links.tip).second)
        throw ConfigError("finger mapping: tip link '" + links.tip + "' is mapped twice");
    }
    if (digits.empty()) throw ConfigError("finger mapping: no digits mapped");
  }

  std::vector<Digit> mapped() const {
    std::vector<Digit> out;
    for (const auto& [d, _] : digits) out.push_back(d);
    return out;
  }
};

// Thumb/index/middle/ring mapping for data/allegro_hand.urdf.
inline FingerMapping allegro_finger_mapping() {
  FingerMapping m;
  m.palm_link = "base_link";
  m.digits[Digit::kThumb] = {"link_15.0_tip", "link_15.0"};
  m.digits[Digit::kIndex] = {"link_3.0_tip", "link_2.0"};
  m.digits[Digit::kMiddle] = {"link_7.0_tip", "link_6.0"};
  m.digits[Digit::kRing] = {"link_11.0_tip", "link_10.0"};
  return m;
}

// ---------------------------------------------------------------------------
// Grasp taxonomy

enum class TaxonomyClass {
  kLargeWrap,
  kMediumWrap,
  kSmallWrap,
  kAdductedThumb,
  kPowerSphere,
  kPowerDisk,
  kPrecisionSphere,
  kPrecisionDisk,
  kTripod,
  kLateralTripod,
  kLateralPinch,
  kPrecisionPinch,
};

inline constexpr std::array<TaxonomyClass, 12> kAllTaxonomyClasses = {
    TaxonomyClass::kLargeWrap,       TaxonomyClass::kMediumWrap,    TaxonomyClass::kSmallWrap,
    TaxonomyClass::kAdductedThumb,   TaxonomyClass::kPowerSphere,   TaxonomyClass::kPowerDisk,
    TaxonomyClass::kPrecisionSphere, TaxonomyClass::kPrecisionDisk, TaxonomyClass::kTripod,
    TaxonomyClass::kLateralTripod,   TaxonomyClass::kLateralPinch,  TaxonomyClass::kPrecisionPinch,
};

inline const char* to_string(TaxonomyClass c) {
  switch (c) {
    case TaxonomyClass::kLargeWrap: return "large-wrap";
    case TaxonomyClass::kMediumWrap: return "medium-wrap";
    case TaxonomyClass::kSmallWrap: return "small-wrap";
    case TaxonomyClass::kAdductedThumb: return "adducted-thumb";
    case TaxonomyClass::kPowerSphere: return "power-sphere";
    case TaxonomyClass::kPowerDisk: return "power-disk";
    case TaxonomyClass::kPrecisionSphere: return "precision-sphere";
    case TaxonomyClass::kPrecisionDisk: return "precision-disk";
    case TaxonomyClass::kTripod: return "tripod";
    case TaxonomyClass::kLateralTripod: return "lateral-tripod";
    case TaxonomyClass::kLateralPinch: return "lateral-pinch";
    case TaxonomyClass::kPrecisionPinch: return "precision-pinch";
  }
  return "?";
}

inline std::string taxonomy_names() {
  std::string out;
  for (auto c : kAllTaxonomyClasses) {
    if (!out.empty()) out += ", ";
    out += to_string(c);
  }
  return out;
}

inline TaxonomyClass parse_taxonomy(std::string_view name) {
  for (auto c : kAllTaxonomyClasses)
    if (name == to_string(c)) return c;
  throw ConfigError("unknown taxonomy '" + std::string(name) + "'; valid names: " +
                    taxonomy_names());
}

enum class VectorGroup { kWristToTip = 0, kThumbPair = 1, kInterFinger = 2, kEnclosure = 3 };
inline constexpr std::array<VectorGroup, 4> kAllGroups = {
    VectorGroup::kWristToTip, VectorGroup::kThumbPair, VectorGroup::kInterFinger,
    VectorGroup::kEnclosure};

inline const char* to_string(VectorGroup g) {
  switch (g) {
    case VectorGroup::kWristToTip: return "wrist-to-tip";
    case VectorGroup::kThumbPair: return "thumb-pair";
    case VectorGroup::kInterFinger: return "inter-finger";
    case VectorGroup::kEnclosure: return "enclosure";
  }
  return "?";
}

inline std::optional<VectorGroup> group_from_string(std::string_view s) {
  for (auto g : kAllGroups)
    if (s == to_string(g)) return g;
  return std::nullopt;
}

struct VectorPair {
  int human_origin = 0;
  int human_end = 0;
  std::string robot_origin;
  std::string robot_end;
  VectorGroup group = VectorGroup::kWristToTip;
};

struct VectorSpec {
  std::vector<VectorPair> pairs;

  std::size_t size() const { return pairs.size(); }

  void validate() const {
    if (pairs.empty()) throw InvalidArgument("vector spec: no vector pairs");
    for (const auto& p : pairs)
      if (p.human_origin < 0 || p.human_origin >= kNumKeypoints || p.human_end < 0 ||
          p.human_end >= kNumKeypoints)
        throw InvalidArgument("vector spec: keypoint id out of range [0, 21)");
  }

  void validate(const RobotModel& model) const {
    validate();
    for (const auto& p : pairs)
      if (!model.has_link(p.robot_origin) || !model.has_link(p.robot_end))
        throw InvalidArgument("vector spec: unknown robot link '" +
                              (model.has_link(p.robot_origin) ? p.robot_end : p.robot_origin) +
                              "'");
  }
};

// wrist->tip per mapped digit, thumb tip->other tips, index tip->middle tip,
// wrist->proximal-segment end per digit with a proximal link.
inline VectorSpec default_vector_spec(const FingerMapping& mapping) {
  VectorSpec spec;
  for (const auto& [d, links] : mapping.digits)
    spec.pairs.push_back({kWrist, tip_keypoint(d), mapping.palm_link, links.tip,
                          VectorGroup::kWristToTip});
  if (mapping.has(Digit::kThumb)) {
    const auto& thumb = mapping.digits.at(Digit::kThumb);
    for (const auto& [d, links] : mapping.digits) {
      if (d == Digit::kThumb) continue;
      spec.pairs.push_back({tip_keypoint(Digit::kThumb), tip_keypoint(d), thumb.tip, links.tip,
                            VectorGroup::kThumbPair});
    }
  }
  if (mapping.has(Digit::kIndex) && mapping.has(Digit::kMiddle))
    spec.pairs.push_back({tip_keypoint(Digit::kIndex), tip_keypoint(Digit::kMiddle),
                          mapping.digits.at(Digit::kIndex).tip,
                          mapping.digits.at(Digit::kMiddle).tip, VectorGroup::kInterFinger});
  for (const auto& [d, links] : mapping.digits) {
    if (links.proximal.empty()) continue;
    spec.pairs.push_back({kWrist, proximal_end_keypoint(d), mapping.palm_link, links.proximal,
                          VectorGroup::kEnclosure});
  }
  return spec;
}

// Per-class weight for each vector group.
struct TaxonomyWeightTable {
  std::map<TaxonomyClass, std::array<double, 4>> weights;

  void validate() const {
    for (const auto& [c, w] : weights) {
      bool any_positive = false;
      for (double v : w) {
        if (!std::isfinite(v) || v < 0.0)
          throw ConfigError(std::string("taxonomy table: negative or non-finite weight for ") +
                            to_string(c));
        any_positive = any_positive || v > 0.0;
      }
      if (!any_positive)
        throw ConfigError(std::string("taxonomy table: class ") + to_string(c) +
                          " has no positive weight");
    }
  }

  static TaxonomyWeightTable uniform(double value = 1.0) {
    TaxonomyWeightTable t;
    for (auto c : kAllTaxonomyClasses) t.weights[c] = {value, value, value, value};
    return t;
  }
};

// Emphasised 2.0, neutral 1.0, de-emphasised 0.25. Columns: wrist-to-tip,
// thumb-pair, inter-finger, enclosure. Mirrored by data/taxonomy_weights.json.
inline TaxonomyWeightTable default_taxonomy_table() {
  constexpr double E = 2.0, N = 1.0, D = 0.25;
  TaxonomyWeightTable t;
  t.weights[TaxonomyClass::kLargeWrap] = {N, D, N, E};
  t.weights[TaxonomyClass::kMediumWrap] = {N, D, N, E};
  t.weights[TaxonomyClass::kSmallWrap] = {N, N, N, E};
  t.weights[TaxonomyClass::kAdductedThumb] = {N, D, E, E};
  t.weights[TaxonomyClass::kPowerSphere] = {E, N, N, E};
  t.weights[TaxonomyClass::kPowerDisk] = {E, N, N, N};
  t.weights[TaxonomyClass::kPrecisionSphere] = {E, N, N, D};
  t.weights[TaxonomyClass::kPrecisionDisk] = {E, N, N, D};
  t.weights[TaxonomyClass::kTripod] = {N, E, E, D};
  t.weights[TaxonomyClass::kLateralTripod] = {D, E, E, D};
  t.weights[TaxonomyClass::kLateralPinch] = {D, E, N, D};
  t.weights[TaxonomyClass::kPrecisionPinch] = {N, E, D, D};
  return t;
}

inline std::vector<double> taxonomy_weights(TaxonomyClass c, const VectorSpec& spec,
                                            const TaxonomyWeightTable& table) {
  const auto it = table.weights.find(c);
  if (it == table.weights.end())
    throw ConfigError(std::string("taxonomy table has no entry for class ") + to_string(c));
  std::vector<double> out;
  out.reserve(spec.size());
  for (const auto& p : spec.pairs) out.push_back(it->second[static_cast<std::size_t>(p.group)]);
  return out;
}

// ---------------------------------------------------------------------------
// Reference vectors and global scale

inline std::vector<Vec3> reference_vectors(const HandFrame& hand, const VectorSpec& spec,
                                           double s) {
  spec.validate();
  if (!(s > 0.0) || !std::isfinite(s))
    throw InvalidArgument("reference_vectors: scale must be positive");
  std::vector<Vec3> out;
  out.reserve(spec.size());
  for (const auto& p : spec.pairs)
    out.push_back(s * (hand.joints[static_cast<std::size_t>(p.human_end)] -
                       hand.joints[static_cast<std::size_t>(p.human_origin)]));
  return out;
}

inline double digit_chain_length(const HandFrame& hand, Digit d) {
  double len = (hand.joints[static_cast<std::size_t>(digit_keypoint(d, 0))] - hand.joints[kWrist]).norm();
  for (int k = 0; k < 3; ++k)
    len += (hand.joints[static_cast<std::size_t>(digit_keypoint(d, k + 1))] -
            hand.joints[static_cast<std::size_t>(digit_keypoint(d, k))])
               .norm();
  return len;
}

// Digit used to measure the global scale: middle when mapped, otherwise the
// mapped digit with the longest human chain.
inline Digit scale_reference_digit(const FingerMapping& mapping, const HandFrame& hand) {
  if (mapping.has(Digit::kMiddle)) return Digit::kMiddle;
  if (mapping.digits.empty()) throw InvalidArgument("compute_hand_scale: mapping is empty");
  Digit best = mapping.digits.begin()->first;
  double best_len = -1.0;
  for (const auto& [d, _] : mapping.digits) {
    const double len = digit_chain_length(hand, d);
    if (len > best_len) {
      best_len = len;
      best = d;
    }
  }
  return best;
}

// Robot palm-to-tip distance at q_ref over the human wrist-to-tip distance,
// measured on the same digit.
inline double compute_hand_scale(const RobotModel& model, const FingerMapping& mapping,
                                 const HandFrame& hand,
                                 const std::optional<JointConfig>& q_ref = std::nullopt) {
  mapping.validate(model);
  const Digit d = scale_reference_digit(mapping, hand);
  const JointConfig q = q_ref ? *q_ref : model.mid_limits();
  const auto poses = model.link_poses(q, RigidTransform::identity());
  const double robot =
      (poses.p[static_cast<std::size_t>(model.link_index(mapping.digits.at(d).tip))] -
       poses.p[static_cast<std::size_t>(model.link_index(mapping.palm_link))])
          .norm();
  const double human =
      (hand.joints[static_cast<std::size_t>(tip_keypoint(d))] - hand.joints[kWrist]).norm();
  if (!(human > 0.0))
    throw InvalidArgument("compute_hand_scale: human wrist-to-tip distance is zero");
  return robot / human;
}

// ---------------------------------------------------------------------------
// Surface samples from the skeleton (cylinders around the bones).

inline constexpr std::array<std::pair<int, int>, 20> kHandBones = {{
    {0, 1},   {1, 2},   {2, 3},   {3, 4},     // thumb
    {0, 5},   {5, 6},   {6, 7},   {7, 8},     // index
    {0, 9},   {9, 10},  {10, 11}, {11, 12},   // middle
    {0, 13},  {13, 14}, {14, 15}, {15, 16},   // ring
    {0, 17},  {17, 18}, {18, 19}, {19, 20},   // pinky
}};

struct SurfaceSampling {
  int num_points = 500;
  double finger_radius = 0.008;
  double palm_radius = 0.012;  // metacarpal bones (those starting at the wrist)
  std::uint64_t seed = 0;
};

// Middle-digit chain length (wrist to tip) of the hand the default radii
// were chosen for.
inline constexpr double kReferenceHandLength = 0.193;

// Sampling options with radii scaled to the size of the given skeleton.
inline SurfaceSampling sampling_for_hand(const std::array<Vec3, kNumKeypoints>& joints,
                                         SurfaceSampling base = {}) {
  HandFrame h;
  h.joints = joints;
  const double k = digit_chain_length(h, Digit::kMiddle) / kReferenceHandLength;
  if (k > 0.0 && std::isfinite(k)) {
    base.finger_radius *= k;
    base.palm_radius *= k;
  }
  return base;
}

// Bone capsules used for visibility tests.
struct Capsule {
  Vec3 a;
  Vec3 b;
  double radius = 0.0;
};

inline std::vector<Capsule> hand_capsules(const std::array<Vec3, kNumKeypoints>& joints,
                                          const SurfaceSampling& opts = {}) {
  std::vector<Capsule> out;
  for (const auto& [i, j] : kHandBones)
    out.push_back({joints[static_cast<std::size_t>(i)], joints[static_cast<std::size_t>(j)],
                   i == kWrist ? opts.palm_radius : opts.finger_radius});
  return out;
}

// Squared distance between segments [p0, p1] and [q0, q1].
inline double segment_distance_sq(const Vec3& p0, const Vec3& p1, const Vec3& q0, const Vec3& q1) {
  const Vec3 d1 = p1 - p0, d2 = q1 - q0, r = p0 - q0;
  const double a = d1.squaredNorm(), e = d2.squaredNorm(), f = d2.dot(r);
  double s = 0.0, t = 0.0;
  if (a <= 1e-300 && e <= 1e-300) return r.squaredNorm();
  if (a <= 1e-300) {
    t = std::clamp(f / e, 0.0, 1.0);
  } else {
    const double c = d1.dot(r);
    if (e <= 1e-300) {
      s = std::clamp(-c / a, 0.0, 1.0);
    } else {
      const double b = d1.dot(d2);
      const double denom = a * e - b * b;
      s = denom > 0.0 ? std::clamp((b * f - c * e) / denom, 0.0, 1.0) : 0.0;
      t = (b * s + f) / e;
      if (t < 0.0) {
        t = 0.0;
        s = std::clamp(-c / a, 0.0, 1.0);
      } else if (t > 1.0) {
        t = 1.0;
        s = std::clamp((b - c) / a, 0.0, 1.0);
      }
    }
  }
  return (p0 + s * d1 - (q0 + t * d2)).squaredNorm();
}

// True when the line of sight from the camera centre to x passes through a
// capsule before reaching x. `margin` shortens the ray so that x itself does
// not count as an intersection with its own surface.
inline bool occluded(const Vec3& x, std::span<const Capsule> capsules, double margin = 1e-4) {
  const double len = x.norm();
  if (len <= margin) return false;
  const Vec3 end = x * ((len - margin) / len);
  for (const auto& c : capsules) {
    const double r = c.radius * (1.0 - 1e-6);
    if (segment_distance_sq(Vec3::Zero(), end, c.a, c.b) < r * r) return true;
  }
  return false;
}

// Points and outward normals on cylinders around the 20 bones. Bone choice is
// proportional to lateral area, so density is roughly uniform.
inline PointCloud sample_hand_surface(const std::array<Vec3, kNumKeypoints>& joints,
                                      const SurfaceSampling& opts = {}) {
  if (opts.num_points < 1) throw InvalidArgument("sample_hand_surface: num_points must be >= 1");
  std::array<double, kHandBones.size()> area{};
  double total = 0.0;
  for (std::size_t b = 0; b < kHandBones.size(); ++b) {
    const auto [i, j] = kHandBones[b];
    const double r = i == kWrist ? opts.palm_radius : opts.finger_radius;
    area[b] = r * (joints[static_cast<std::size_t>(j)] - joints[static_cast<std::size_t>(i)]).norm() + 1e-9;
    total += area[b];
  }
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  PointCloud cloud;
  cloud.points.reserve(static_cast<std::size_t>(opts.num_points));
  cloud.normals.reserve(static_cast<std::size_t>(opts.num_points));
  for (int k = 0; k < opts.num_points; ++k) {
    double pick = unit(rng) * total;
    std::size_t b = 0;
    while (b + 1 < kHandBones.size() && pick > area[b]) {
      pick -= area[b];
      ++b;
    }
    const auto [i, j] = kHandBones[b];
    const double r = i == kWrist ? opts.palm_radius : opts.finger_radius;
    const Vec3& a = joints[static_cast<std::size_t>(i)];
    const Vec3& c = joints[static_cast<std::size_t>(j)];
    const double t = unit(rng);
    // Radial direction perpendicular to the bone axis.
    const Vec3 axis = (c - a).normalized();
    Vec3 u(gauss(rng), gauss(rng), gauss(rng));
    u -= u.dot(axis) * axis;
    if (u.norm() < 1e-9) u = axis.unitOrthogonal();
    u.normalize();
    cloud.points.push_back(a + t * (c - a) + r * u);
    cloud.normals.push_back(u);
  }
  return cloud;
}

}  // namespace retarget
