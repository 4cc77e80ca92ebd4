#pragma once

#include <cstdio>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Core>

#include "retarget/geometry.hpp"
#include "retarget/xml.hpp"

namespace retarget {

enum class JointType { kRevolute, kPrismatic, kContinuous, kFixed };

inline const char* to_string(JointType t) {
  switch (t) {
    case JointType::kRevolute: return "revolute";
    case JointType::kPrismatic: return "prismatic";
    case JointType::kContinuous: return "continuous";
    case JointType::kFixed: return "fixed";
  }
  return "?";
}

struct Mimic {
  std::string joint;
  double multiplier = 1.0;
  double offset = 0.0;
};

struct Joint {
  std::string name;
  JointType type = JointType::kFixed;
  std::string parent;
  std::string child;
  RigidTransform origin;
  Vec3 axis = Vec3::UnitX();
  double lower = 0.0;
  double upper = 0.0;
  std::optional<Mimic> mimic;

  bool movable() const { return type != JointType::kFixed; }
};

struct Link {
  std::string name;
};

// Joint values laid out by RobotModel::actuated_order().
struct JointConfig {
  Eigen::VectorXd values;

  JointConfig() = default;
  explicit JointConfig(Eigen::VectorXd v) : values(std::move(v)) {}
  Eigen::Index size() const { return values.size(); }
  double operator[](Eigen::Index i) const { return values(i); }
  double& operator[](Eigen::Index i) { return values(i); }
};

// Link poses in the base frame, indexed like RobotModel::links().
struct FrameSet {
  std::vector<RigidTransform> poses;
  std::shared_ptr<const std::unordered_map<std::string, int>> index;

  const RigidTransform& at(const std::string& link) const {
    const auto it = index->find(link);
    if (it == index->end()) throw InvalidArgument("FrameSet: unknown link '" + link + "'");
    return poses[static_cast<std::size_t>(it->second)];
  }
};

// Kinematic tree parsed from the URDF subset. Immutable after construction.
class RobotModel {
 public:
  static constexpr double kContinuousLimit = 2.0 * std::numbers::pi;

  RobotModel(std::string name, std::vector<Link> links, std::vector<Joint> joints,
             std::vector<std::string> warnings = {})
      : name_(std::move(name)),
        links_(std::move(links)),
        joints_(std::move(joints)),
        warnings_(std::move(warnings)) {
    finalize();
  }

  const std::string& name() const { return name_; }
  const std::vector<Link>& links() const { return links_; }
  const std::vector<Joint>& joints() const { return joints_; }
  const std::vector<std::string>& warnings() const { return warnings_; }
  const std::vector<std::string>& actuated_order() const { return actuated_order_; }
  const std::string& root_link() const { return links_[static_cast<std::size_t>(root_)].name; }
  int dof() const { return static_cast<int>(actuated_order_.size()); }

  bool has_link(const std::string& name) const { return link_index_->count(name) > 0; }
  int link_index(const std::string& name) const {
    const auto it = link_index_->find(name);
    if (it == link_index_->end()) throw InvalidArgument("unknown link '" + name + "'");
    return it->second;
  }
  const std::shared_ptr<const std::unordered_map<std::string, int>>& link_index_map() const {
    return link_index_;
  }

  // Optimiser box; continuous joints use (-2 pi, 2 pi).
  const Eigen::VectorXd& lower_limits() const { return lower_; }
  const Eigen::VectorXd& upper_limits() const { return upper_; }
  bool is_continuous(int dof_index) const { return continuous_[static_cast<std::size_t>(dof_index)]; }

  JointConfig mid_limits() const { return JointConfig((lower_ + upper_) / 2.0); }
  JointConfig zeros() const { return JointConfig(Eigen::VectorXd::Zero(dof())); }

  void check_config(const JointConfig& q, const char* who) const {
    if (q.size() != dof())
      throw InvalidArgument(std::string(who) + ": joint vector has length " +
                            std::to_string(q.size()) + ", model has " + std::to_string(dof()) +
                            " DoF");
  }

  struct Poses {
    std::vector<Mat3> R;
    std::vector<Vec3> p;
  };

  // Link poses as rotation matrices and positions. Hot path for solvers.
  Poses link_poses(const JointConfig& q, const RigidTransform& root_pose) const {
    check_config(q, "forward_kinematics");
    Poses out;
    out.R.resize(links_.size());
    out.p.resize(links_.size());
    out.R[static_cast<std::size_t>(root_)] = root_pose.rotation.matrix();
    out.p[static_cast<std::size_t>(root_)] = root_pose.translation;
    for (const auto& ji : topo_) {
      const Joint& j = joints_[static_cast<std::size_t>(ji.joint)];
      const auto pa = static_cast<std::size_t>(ji.parent);
      const auto ch = static_cast<std::size_t>(ji.child);
      Mat3 R = out.R[pa] * ji.origin_R;
      Vec3 p = out.R[pa] * j.origin.translation + out.p[pa];
      const double v = joint_value(ji, q);
      switch (j.type) {
        case JointType::kRevolute:
        case JointType::kContinuous:
          R = R * Eigen::AngleAxisd(v, j.axis).toRotationMatrix();
          break;
        case JointType::kPrismatic:
          p += R * (j.axis * v);
          break;
        case JointType::kFixed:
          break;
      }
      out.R[ch] = R;
      out.p[ch] = p;
    }
    return out;
  }

  // Analytic 3 x n Jacobian of a link origin with respect to q, from poses
  // computed by link_poses at the same q.
  Eigen::Matrix<double, 3, Eigen::Dynamic> origin_jacobian(const Poses& poses, int link) const {
    Eigen::Matrix<double, 3, Eigen::Dynamic> J =
        Eigen::Matrix<double, 3, Eigen::Dynamic>::Zero(3, dof());
    const Vec3& target = poses.p[static_cast<std::size_t>(link)];
    for (int ti : ancestors_[static_cast<std::size_t>(link)]) {
      const TopoJoint& ji = topo_[static_cast<std::size_t>(ti)];
      const Joint& j = joints_[static_cast<std::size_t>(ji.joint)];
      if (!j.movable() || ji.dof_index < 0) continue;
      const auto ch = static_cast<std::size_t>(ji.child);
      const Vec3 axis_w = poses.R[ch] * j.axis;
      Vec3 col;
      if (j.type == JointType::kPrismatic) {
        col = axis_w;
      } else {
        col = axis_w.cross(target - poses.p[ch]);
      }
      J.col(ji.dof_index) += ji.multiplier * col;
    }
    return J;
  }

 private:
  struct TopoJoint {
    int joint = 0;
    int parent = 0;
    int child = 0;
    int dof_index = -1;       // actuated index, or the source's for mimics
    double multiplier = 1.0;  // mimic scaling (1 for actuated joints)
    double offset = 0.0;
    bool is_mimic = false;
    Mat3 origin_R = Mat3::Identity();
  };

  double joint_value(const TopoJoint& ji, const JointConfig& q) const {
    if (ji.dof_index < 0) return 0.0;
    return ji.multiplier * q.values(ji.dof_index) + ji.offset;
  }

  void finalize() {
    auto index = std::make_shared<std::unordered_map<std::string, int>>();
    for (std::size_t i = 0; i < links_.size(); ++i) {
      if (!index->emplace(links_[i].name, static_cast<int>(i)).second)
        throw StructureError("duplicate link '" + links_[i].name + "'");
    }
    if (links_.empty()) throw StructureError("robot has no links");
    link_index_ = index;

    std::unordered_map<std::string, int> joint_index;
    std::vector<int> parent_joint(links_.size(), -1);
    for (std::size_t i = 0; i < joints_.size(); ++i) {
      const Joint& j = joints_[i];
      if (!joint_index.emplace(j.name, static_cast<int>(i)).second)
        throw StructureError("duplicate joint '" + j.name + "'");
      if (!index->count(j.parent))
        throw StructureError("joint '" + j.name + "': parent link '" + j.parent +
                             "' does not exist");
      if (!index->count(j.child))
        throw StructureError("joint '" + j.name + "': child link '" + j.child +
                             "' does not exist");
      const int c = index->at(j.child);
      if (parent_joint[static_cast<std::size_t>(c)] >= 0)
        throw StructureError("link '" + j.child + "' is the child of more than one joint");
      parent_joint[static_cast<std::size_t>(c)] = static_cast<int>(i);
    }

    int root = -1;
    for (std::size_t i = 0; i < links_.size(); ++i) {
      if (parent_joint[i] >= 0) continue;
      if (root >= 0)
        throw StructureError("links '" + links_[static_cast<std::size_t>(root)].name +
                             "' and '" + links_[i].name +
                             "' both lack a parent joint (orphan link or forest)");
      root = static_cast<int>(i);
    }
    if (root < 0) throw StructureError("kinematic graph has a cycle (no root link)");
    root_ = root;

    // Validation of joint parameters.
    for (auto& j : joints_) {
      if (j.movable()) {
        const double n = j.axis.norm();
        if (!(n > 0.0) || !j.axis.allFinite())
          throw ValidationError("joint '" + j.name + "': axis must be non-zero");
        j.axis /= n;
      }
      if (j.type == JointType::kContinuous) {
        j.lower = -kContinuousLimit;
        j.upper = kContinuousLimit;
      }
      if ((j.type == JointType::kRevolute || j.type == JointType::kPrismatic) &&
          (!std::isfinite(j.lower) || !std::isfinite(j.upper) || j.lower > j.upper))
        throw ValidationError("joint '" + j.name + "': limits must be finite with lower <= upper");
    }

    // Actuated layout: movable non-mimic joints in document order.
    std::unordered_map<std::string, int> dof_of;
    for (const auto& j : joints_) {
      if (!j.movable() || j.mimic) continue;
      dof_of[j.name] = static_cast<int>(actuated_order_.size());
      actuated_order_.push_back(j.name);
      continuous_.push_back(j.type == JointType::kContinuous);
    }
    lower_.resize(static_cast<Eigen::Index>(actuated_order_.size()));
    upper_.resize(lower_.size());
    for (std::size_t k = 0; k < actuated_order_.size(); ++k) {
      const Joint& j = joints_[static_cast<std::size_t>(joint_index.at(actuated_order_[k]))];
      lower_(static_cast<Eigen::Index>(k)) = j.lower;
      upper_(static_cast<Eigen::Index>(k)) = j.upper;
    }
    for (const auto& j : joints_) {
      if (!j.mimic || !j.movable()) continue;
      const auto it = joint_index.find(j.mimic->joint);
      if (it == joint_index.end())
        throw ValidationError("joint '" + j.name + "': mimic source '" + j.mimic->joint +
                              "' does not exist");
      const Joint& src = joints_[static_cast<std::size_t>(it->second)];
      if (src.mimic)
        throw ValidationError("joint '" + j.name + "': mimic source '" + src.name +
                              "' is itself a mimic joint");
      if (!src.movable())
        throw ValidationError("joint '" + j.name + "': mimic source '" + src.name +
                              "' is fixed");
    }

    // Depth-first order from the root; children follow document order.
    std::vector<std::vector<int>> children(links_.size());
    for (std::size_t i = 0; i < joints_.size(); ++i)
      children[static_cast<std::size_t>(index->at(joints_[i].parent))].push_back(static_cast<int>(i));
    ancestors_.assign(links_.size(), {});
    std::vector<char> seen(links_.size(), 0);
    std::vector<int> stack{root_};
    seen[static_cast<std::size_t>(root_)] = 1;
    std::vector<int> order;
    std::vector<int> topo_of_joint(joints_.size(), -1);
    // Recursive lambda keeps parent-before-child order.
    auto visit = [&](auto&& self, int link) -> void {
      for (int ji : children[static_cast<std::size_t>(link)]) {
        const Joint& j = joints_[static_cast<std::size_t>(ji)];
        const int c = index->at(j.child);
        if (seen[static_cast<std::size_t>(c)])
          throw StructureError("kinematic graph has a cycle through link '" + j.child + "'");
        seen[static_cast<std::size_t>(c)] = 1;
        TopoJoint t;
        t.joint = ji;
        t.parent = link;
        t.child = c;
        t.origin_R = j.origin.rotation.matrix();
        if (j.movable()) {
          if (j.mimic) {
            t.dof_index = dof_of.at(j.mimic->joint);
            t.multiplier = j.mimic->multiplier;
            t.offset = j.mimic->offset;
            t.is_mimic = true;
          } else {
            t.dof_index = dof_of.at(j.name);
          }
        }
        const int ti = static_cast<int>(topo_.size());
        topo_.push_back(t);
        ancestors_[static_cast<std::size_t>(c)] = ancestors_[static_cast<std::size_t>(link)];
        ancestors_[static_cast<std::size_t>(c)].push_back(ti);
        self(self, c);
      }
    };
    visit(visit, root_);
    for (std::size_t i = 0; i < links_.size(); ++i)
      if (!seen[i])
        throw StructureError("link '" + links_[i].name + "' is not reachable from root '" +
                             links_[static_cast<std::size_t>(root_)].name + "' (cycle)");
  }

  std::string name_;
  std::vector<Link> links_;
  std::vector<Joint> joints_;
  std::vector<std::string> warnings_;
  std::vector<std::string> actuated_order_;
  std::vector<bool> continuous_;
  Eigen::VectorXd lower_, upper_;
  std::shared_ptr<const std::unordered_map<std::string, int>> link_index_;
  int root_ = 0;
  std::vector<TopoJoint> topo_;
  std::vector<std::vector<int>> ancestors_;
};

// ---------------------------------------------------------------------------
// URDF parsing

namespace detail {

inline double parse_double(std::string_view text, const xml::Element& el, const char* what) {
  const std::string s(text);
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || !std::isfinite(v))
    throw ParseError(std::string("<") + el.name + ">: invalid number for " + what + ": '" + s +
                         "'",
                     el.line, el.column);
  while (*end == ' ' || *end == '\t' || *end == '\n' || *end == '\r') ++end;
  if (*end != '\0')
    throw ParseError(std::string("<") + el.name + ">: trailing characters in " + what, el.line,
                     el.column);
  return v;
}

inline Vec3 parse_triple(const std::string& text, const xml::Element& el, const char* what) {
  std::istringstream in(text);
  std::vector<std::string> tokens;
  for (std::string tok; in >> tok;) tokens.push_back(tok);
  if (tokens.size() != 3)
    throw ParseError(std::string("<") + el.name + ">: " + what + " needs 3 numbers", el.line,
                     el.column);
  return {parse_double(tokens[0], el, what), parse_double(tokens[1], el, what),
          parse_double(tokens[2], el, what)};
}

inline std::string required_attr(const xml::Element& el, const char* key) {
  auto v = el.attribute(key);
  if (!v)
    throw ParseError(std::string("<") + el.name + "> is missing attribute '" + key + "'", el.line,
                     el.column);
  return *v;
}

inline RigidTransform parse_origin(const xml::Element* el) {
  if (!el) return RigidTransform::identity();
  RigidTransform t;
  if (auto xyz = el->attribute("xyz")) t.translation = parse_triple(*xyz, *el, "xyz");
  if (auto rpy = el->attribute("rpy")) {
    const Vec3 a = parse_triple(*rpy, *el, "rpy");
    t.rotation = Rotation::from_rpy(a.x(), a.y(), a.z());
  }
  return t;
}

}  // namespace detail

// Parse the kinematic subset of URDF. Geometry, inertia and transmission
// elements are skipped and reported through RobotModel::warnings().
inline RobotModel parse_urdf(std::string_view text) {
  const xml::Element root = xml::parse(text);
  if (root.name != "robot")
    throw ParseError("root element must be <robot>, found <" + root.name + ">", root.line,
                     root.column);
  const std::string name = root.attribute("name").value_or("");

  std::vector<Link> links;
  std::vector<Joint> joints;
  std::vector<std::string> warnings;

  for (const auto& el : root.children) {
    if (el.name == "link") {
      Link link{detail::required_attr(el, "name")};
      for (const auto& c : el.children)
        warnings.push_back("link '" + link.name + "': ignored <" + c.name + ">");
      links.push_back(std::move(link));
    } else if (el.name == "joint") {
      Joint j;
      j.name = detail::required_attr(el, "name");
      const std::string type = detail::required_attr(el, "type");
      if (type == "revolute") j.type = JointType::kRevolute;
      else if (type == "prismatic") j.type = JointType::kPrismatic;
      else if (type == "continuous") j.type = JointType::kContinuous;
      else if (type == "fixed") j.type = JointType::kFixed;
      else
        throw ValidationError("joint '" + j.name + "': unsupported joint type '" + type + "'");

      const xml::Element* parent = el.child("parent");
      const xml::Element* child = el.child("child");
      if (!parent || !child)
        throw StructureError("joint '" + j.name + "': missing <parent> or <child>");
      j.parent = detail::required_attr(*parent, "link");
      j.child = detail::required_attr(*child, "link");
      j.origin = detail::parse_origin(el.child("origin"));
      if (const xml::Element* axis = el.child("axis")) {
        if (auto xyz = axis->attribute("xyz")) j.axis = detail::parse_triple(*xyz, *axis, "axis");
      }
      const xml::Element* limit = el.child("limit");
      if (j.type == JointType::kRevolute || j.type == JointType::kPrismatic) {
        if (!limit)
          throw ValidationError("joint '" + j.name + "': " + type + " joint requires <limit>");
        j.lower = limit->attribute("lower")
                      ? detail::parse_double(*limit->attribute("lower"), *limit, "lower")
                      : 0.0;
        j.upper = limit->attribute("upper")
                      ? detail::parse_double(*limit->attribute("upper"), *limit, "upper")
                      : 0.0;
      }
      if (const xml::Element* mimic = el.child("mimic")) {
        Mimic m;
        m.joint = detail::required_attr(*mimic, "joint");
        if (auto v = mimic->attribute("multiplier"))
          m.multiplier = detail::parse_double(*v, *mimic, "multiplier");
        if (auto v = mimic->attribute("offset")) m.offset = detail::parse_double(*v, *mimic, "offset");
        j.mimic = m;
      }
      for (const auto& c : el.children) {
        if (c.name == "parent" || c.name == "child" || c.name == "origin" || c.name == "axis" ||
            c.name == "limit" || c.name == "mimic")
          continue;
        warnings.push_back("joint '" + j.name + "': ignored <" + c.name + ">");
      }
      joints.push_back(std::move(j));
    } else {
      warnings.push_back("ignored <" + el.name + ">");
    }
  }
  return RobotModel(name, std::move(links), std::move(joints), std::move(warnings));
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Serialises the kinematic subset back to URDF.
inline std::string serialize_urdf(const RobotModel& model) {
  auto triple = [](const Vec3& v) {
    return format_number(v.x()) + " " + format_number(v.y()) + " " + format_number(v.z());
  };
  std::ostringstream out;
  out << "<?xml version=\"1.0\"?>\n";
  out << "<robot name=\"" << xml::escape(model.name()) << "\">\n";
  for (const auto& l : model.links()) out << "  <link name=\"" << xml::escape(l.name) << "\"/>\n";
  for (const auto& j : model.joints()) {
    out << "  <joint name=\"" << xml::escape(j.name) << "\" type=\"" << to_string(j.type)
        << "\">\n";
    out << "    <parent link=\"" << xml::escape(j.parent) << "\"/>\n";
    out << "    <child link=\"" << xml::escape(j.child) << "\"/>\n";
    out << "    <origin xyz=\"" << triple(j.origin.translation) << "\" rpy=\""
        << triple(j.origin.rotation.rpy()) << "\"/>\n";
    if (j.movable()) out << "    <axis xyz=\"" << triple(j.axis) << "\"/>\n";
    if (j.type == JointType::kRevolute || j.type == JointType::kPrismatic)
      out << "    <limit lower=\"" << format_number(j.lower) << "\" upper=\""
          << format_number(j.upper) << "\"/>\n";
    if (j.mimic)
      out << "    <mimic joint=\"" << xml::escape(j.mimic->joint) << "\" multiplier=\""
          << format_number(j.mimic->multiplier) << "\" offset=\""
          << format_number(j.mimic->offset) << "\"/>\n";
    out << "  </joint>\n";
  }
  out << "</robot>\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Kinematics

inline FrameSet forward_kinematics(const RobotModel& model, const JointConfig& q,
                                   const RigidTransform& root_pose = {}) {
  const auto poses = model.link_poses(q, root_pose);
  FrameSet out;
  out.index = model.link_index_map();
  out.poses.reserve(poses.R.size());
  for (std::size_t i = 0; i < poses.R.size(); ++i)
    out.poses.push_back({Rotation::from_matrix(poses.R[i]), poses.p[i]});
  return out;
}

inline std::vector<Vec3> fingertip_positions(const RobotModel& model, const JointConfig& q,
                                             const RigidTransform& root_pose,
                                             const std::vector<std::string>& tip_links) {
  std::vector<int> ids;
  ids.reserve(tip_links.size());
  for (const auto& name : tip_links) {
    if (!model.has_link(name))
      throw InvalidArgument("fingertip_positions: unknown link '" + name + "'");
    ids.push_back(model.link_index(name));
  }
  const auto poses = model.link_poses(q, root_pose);
  std::vector<Vec3> out;
  out.reserve(ids.size());
  for (int id : ids) out.push_back(poses.p[static_cast<std::size_t>(id)]);
  return out;
}

inline JointConfig clamp_to_limits(const RobotModel& model, const JointConfig& q) {
  model.check_config(q, "clamp_to_limits");
  JointConfig out = q;
  for (int i = 0; i < model.dof(); ++i) {
    if (model.is_continuous(i)) continue;
    out[i] = std::min(std::max(q[i], model.lower_limits()(i)), model.upper_limits()(i));
  }
  return out;
}

inline bool within_limits(const RobotModel& model, const JointConfig& q, double tol = 0.0) {
  model.check_config(q, "within_limits");
  for (int i = 0; i < model.dof(); ++i)
    if (q[i] < model.lower_limits()(i) - tol || q[i] > model.upper_limits()(i) + tol) return false;
  return true;
}

// Central-difference Jacobian of a link origin with respect to q.
inline Eigen::Matrix<double, 3, Eigen::Dynamic> numeric_jacobian(const RobotModel& model,
                                                                 const JointConfig& q,
                                                                 const std::string& target_link,
                                                                 double eps = 1e-6,
                                                                 const RigidTransform& root = {}) {
  if (!(eps > 0.0)) throw InvalidArgument("numeric_jacobian: eps must be positive");
  if (!model.has_link(target_link))
    throw InvalidArgument("numeric_jacobian: unknown link '" + target_link + "'");
  model.check_config(q, "numeric_jacobian");
  const auto id = static_cast<std::size_t>(model.link_index(target_link));
  Eigen::Matrix<double, 3, Eigen::Dynamic> J(3, model.dof());
  JointConfig qp = q;
  for (int i = 0; i < model.dof(); ++i) {
    const double qi = q[i];
    qp[i] = qi + eps;
    const Vec3 fp = model.link_poses(qp, root).p[id];
    qp[i] = qi - eps;
    const Vec3 fm = model.link_poses(qp, root).p[id];
    qp[i] = qi;
    J.col(i) = (fp - fm) / (2.0 * eps);
  }
  return J;
}

}  // namespace retarget
