#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "retarget/errors.hpp"
#include "retarget/functional_retarget.hpp"
#include "retarget/geometry.hpp"
#include "retarget/hand_align.hpp"
#include "retarget/hand_model.hpp"
#include "retarget/pointcloud.hpp"
#include "retarget/robot_model.hpp"

namespace retarget {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Files

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

// Converts a byte offset into a 1-based line/column pair.
inline std::pair<int, int> text_location(std::string_view text, std::size_t offset) {
  int line = 1, col = 1;
  for (std::size_t i = 0; i < offset && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

inline json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = text_location(text, e.byte > 0 ? e.byte - 1 : 0);
    std::string msg = e.what();
    const auto pos = msg.find("syntax error");
    if (pos != std::string::npos) msg = msg.substr(pos);
    throw ParseError(source + ": " + msg, line, col);
  } catch (const json::exception& e) {
    throw ParseError(source + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Typed JSON access with path-qualified errors.

namespace detail {

inline const json& member(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw ParseError(where + ": expected an object");
  const auto it = obj.find(key);
  if (it == obj.end()) throw ParseError(where + ": missing field '" + key + "'");
  return *it;
}

inline double number(const json& v, const std::string& where) {
  if (!v.is_number()) throw ParseError(where + ": expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ParseError(where + ": number is not finite");
  return d;
}

inline Vec3 vec3(const json& v, const std::string& where) {
  if (!v.is_array() || v.size() != 3) throw ParseError(where + ": expected [x, y, z]");
  return {number(v[0], where), number(v[1], where), number(v[2], where)};
}

inline json to_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }

inline json pose_to_json(const RigidTransform& T) {
  const auto& q = T.rotation.quaternion();
  return {{"quat_wxyz", {q.w(), q.x(), q.y(), q.z()}}, {"pos", to_json(T.translation)}};
}

inline RigidTransform pose_from_json(const json& v, const std::string& where) {
  const json& q = member(v, "quat_wxyz", where);
  if (!q.is_array() || q.size() != 4) throw ParseError(where + ".quat_wxyz: expected 4 numbers");
  const double w = number(q[0], where), x = number(q[1], where), y = number(q[2], where),
               z = number(q[3], where);
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  if (std::abs(n - 1.0) > 1e-6)
    throw ParseError(where + ".quat_wxyz: quaternion is not unit length (norm " +
                     std::to_string(n) + ")");
  return {Rotation::from_quaternion(w, x, y, z), vec3(member(v, "pos", where), where + ".pos")};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Hand trajectory JSON

inline HandTrajectory hand_trajectory_from_json(const json& doc) {
  using namespace detail;
  HandTrajectory traj;
  traj.fps = number(member(doc, "fps", "trajectory"), "fps");
  if (!(traj.fps > 0.0)) throw ParseError("fps: must be positive");
  const json& frames = member(doc, "frames", "trajectory");
  if (!frames.is_array()) throw ParseError("frames: expected an array");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string where = "frame " + std::to_string(i);
    const json& f = frames[i];
    if (!f.is_object()) throw ParseError(where + ": expected an object");
    HandFrame h;
    const json& idx = member(f, "index", where);
    if (!idx.is_number_integer()) throw ParseError(where + ": index must be an integer");
    h.frame_index = idx.get<int>();
    h.wrist_pose = pose_from_json(member(f, "wrist", where), where + ": wrist");
    const json& joints = member(f, "joints", where);
    if (!joints.is_array() || joints.size() != static_cast<std::size_t>(kNumKeypoints))
      throw ParseError(where + ": expected 21 joints");
    for (std::size_t j = 0; j < joints.size(); ++j)
      h.joints[j] = vec3(joints[j], where + ": joint " + std::to_string(j));
    h.confidence = f.contains("confidence") ? number(f["confidence"], where + ": confidence") : 1.0;
    if (!(h.confidence >= 0.0 && h.confidence <= 1.0))
      throw ParseError(where + ": confidence must lie in [0, 1]");
    if ((h.joints[kWrist] - h.wrist_pose.translation).norm() > 1e-6)
      throw ParseError(where + ": joint 0 does not coincide with the wrist position");
    if (i > 0 && h.frame_index <= traj.frames.back().frame_index)
      throw ParseError(where + ": frame indices must be strictly increasing");
    if (f.contains("contacts")) {
      const json& c = f["contacts"];
      if (!c.is_object()) throw ParseError(where + ": contacts must be an object");
      for (const auto& [name, val] : c.items()) {
        const auto d = digit_from_string(name);
        if (!d) throw ParseError(where + ": unknown digit '" + name + "' in contacts");
        traj.contacts[h.frame_index][*d] = vec3(val, where + ": contacts." + name);
      }
    }
    traj.frames.push_back(h);
  }
  return traj;
}

inline json hand_trajectory_to_json(const HandTrajectory& traj) {
  json frames = json::array();
  for (const auto& h : traj.frames) {
    json joints = json::array();
    for (const auto& j : h.joints) joints.push_back(detail::to_json(j));
    json f = {{"index", h.frame_index},
              {"wrist", detail::pose_to_json(h.wrist_pose)},
              {"joints", joints},
              {"confidence", h.confidence}};
    const auto it = traj.contacts.find(h.frame_index);
    if (it != traj.contacts.end() && !it->second.empty()) {
      json c = json::object();
      for (const auto& [d, p] : it->second) c[to_string(d)] = detail::to_json(p);
      f["contacts"] = c;
    }
    frames.push_back(f);
  }
  return {{"fps", traj.fps}, {"frames", frames}};
}

inline HandTrajectory read_hand_trajectory(const fs::path& path) {
  const std::string text = read_text_file(path);
  return hand_trajectory_from_json(parse_json(text, path.string()));
}

inline void write_hand_trajectory(const HandTrajectory& traj, const fs::path& path) {
  write_text_file(path, hand_trajectory_to_json(traj).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// ASCII PLY

inline PointCloud parse_ply(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, line)) return false;
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  };
  if (!next() || line != "ply") throw ParseError("PLY: missing 'ply' magic", 1, 1);

  struct Element {
    std::string name;
    std::size_t count = 0;
    std::vector<std::string> props;
  };
  std::vector<Element> elements;
  bool have_format = false;
  while (true) {
    if (!next()) throw ParseError("PLY: header is not terminated by 'end_header'", lineno, 1);
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "end_header") break;
    if (kw == "comment" || kw == "obj_info" || kw.empty()) continue;
    if (kw == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw UnsupportedFormatError("PLY: only ASCII PLY is supported (got '" + fmt + "')");
      have_format = true;
    } else if (kw == "element") {
      Element e;
      long long n = -1;
      ls >> e.name >> n;
      if (!ls || n < 0) throw ParseError("PLY: malformed element line", lineno, 1);
      e.count = static_cast<std::size_t>(n);
      elements.push_back(e);
    } else if (kw == "property") {
      if (elements.empty()) throw ParseError("PLY: property before any element", lineno, 1);
      std::string type, name;
      ls >> type;
      if (type == "list") {
        std::string a, b;
        ls >> a >> b >> name;
      } else {
        ls >> name;
      }
      if (!ls) throw ParseError("PLY: malformed property line", lineno, 1);
      elements.back().props.push_back(type == "list" ? "" : name);
    } else {
      throw ParseError("PLY: unknown header keyword '" + kw + "'", lineno, 1);
    }
  }
  if (!have_format) throw ParseError("PLY: missing format line", lineno, 1);

  PointCloud cloud;
  bool seen_vertex = false;
  for (const auto& e : elements) {
    if (e.name != "vertex") {
      for (std::size_t i = 0; i < e.count; ++i)
        if (!next()) throw ParseError("PLY: element '" + e.name + "' has fewer rows than declared", lineno + 1, 1);
      continue;
    }
    seen_vertex = true;
    auto find = [&](const char* n) -> int {
      for (std::size_t i = 0; i < e.props.size(); ++i)
        if (e.props[i] == n) return static_cast<int>(i);
      return -1;
    };
    const int ix = find("x"), iy = find("y"), iz = find("z");
    if (ix < 0 || iy < 0 || iz < 0) throw UnsupportedFormatError("PLY: vertex element lacks x, y, z");
    const int inx = find("nx"), iny = find("ny"), inz = find("nz");
    const bool normals = inx >= 0 && iny >= 0 && inz >= 0;
    cloud.points.reserve(std::min(e.count, text.size()));
    std::vector<double> vals(e.props.size());
    for (std::size_t i = 0; i < e.count; ++i) {
      if (!next())
        throw ParseError("PLY: expected " + std::to_string(e.count) + " vertices, found " +
                             std::to_string(i),
                         lineno + 1, 1);
      std::istringstream ls(line);
      for (std::size_t k = 0; k < vals.size(); ++k) {
        std::string tok;
        if (!(ls >> tok)) throw ParseError("PLY: vertex row has too few values", lineno, 1);
        char* end = nullptr;
        vals[k] = std::strtod(tok.c_str(), &end);
        if (end == tok.c_str() || *end != '\0' || !std::isfinite(vals[k]))
          throw ParseError("PLY: invalid number '" + tok + "'", lineno, 1);
      }
      std::string extra;
      if (ls >> extra) throw ParseError("PLY: vertex row has too many values", lineno, 1);
      cloud.points.emplace_back(vals[static_cast<std::size_t>(ix)], vals[static_cast<std::size_t>(iy)],
                                vals[static_cast<std::size_t>(iz)]);
      if (normals)
        cloud.normals.emplace_back(vals[static_cast<std::size_t>(inx)],
                                   vals[static_cast<std::size_t>(iny)],
                                   vals[static_cast<std::size_t>(inz)]);
    }
  }
  if (!seen_vertex) throw UnsupportedFormatError("PLY: no vertex element");
  while (next()) {
    if (line.find_first_not_of(" \t") != std::string::npos)
      throw ParseError("PLY: more data rows than declared", lineno, 1);
  }
  return cloud;
}

inline std::string format_ply(const PointCloud& cloud) {
  std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(cloud.size()) +
                    "\nproperty double x\nproperty double y\nproperty double z\n";
  if (cloud.has_normals())
    out += "property double nx\nproperty double ny\nproperty double nz\n";
  out += "end_header\n";
  char buf[128];
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3& p = cloud.points[i];
    std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g", p.x(), p.y(), p.z());
    out += buf;
    if (cloud.has_normals()) {
      const Vec3& n = cloud.normals[i];
      std::snprintf(buf, sizeof buf, " %.9g %.9g %.9g", n.x(), n.y(), n.z());
      out += buf;
    }
    out += '\n';
  }
  return out;
}

inline PointCloud read_ply(const fs::path& path) { return parse_ply(read_text_file(path)); }
inline void write_ply(const PointCloud& cloud, const fs::path& path) {
  write_text_file(path, format_ply(cloud));
}

// ---------------------------------------------------------------------------
// PFM depth (grayscale, rows stored bottom to top)

namespace detail {

// Reads a whitespace-delimited header token; returns the offset after the
// single whitespace byte that terminates it.
inline std::string header_token(const std::string& data, std::size_t& pos, const char* what) {
  while (pos < data.size() && std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
  const std::size_t start = pos;
  while (pos < data.size() && !std::isspace(static_cast<unsigned char>(data[pos]))) ++pos;
  if (start == pos || pos >= data.size())
    throw ParseError(std::string(what) + ": truncated header");
  std::string tok = data.substr(start, pos - start);
  ++pos;
  return tok;
}

inline long long header_int(const std::string& data, std::size_t& pos, const char* what) {
  const std::string tok = header_token(data, pos, what);
  char* end = nullptr;
  const long long v = std::strtoll(tok.c_str(), &end, 10);
  if (*end != '\0' || v <= 0 || v > (1 << 20))
    throw ParseError(std::string(what) + ": invalid dimension '" + tok + "'");
  return v;
}

}  // namespace detail

inline DepthImage parse_pfm(const std::string& data) {
  std::size_t pos = 0;
  const std::string magic = detail::header_token(data, pos, "PFM");
  if (magic == "PF") throw UnsupportedFormatError("PFM: color images are not supported");
  if (magic != "Pf") throw ParseError("PFM: bad magic '" + magic + "'");
  const int w = static_cast<int>(detail::header_int(data, pos, "PFM"));
  const int h = static_cast<int>(detail::header_int(data, pos, "PFM"));
  const std::string scale_tok = detail::header_token(data, pos, "PFM");
  char* end = nullptr;
  const double scale = std::strtod(scale_tok.c_str(), &end);
  if (*end != '\0' || scale == 0.0 || !std::isfinite(scale))
    throw ParseError("PFM: invalid scale '" + scale_tok + "'");
  const bool little = scale < 0.0;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (data.size() - pos < n * 4)
    throw ParseError("PFM: expected " + std::to_string(n * 4) + " bytes of pixel data, found " +
                     std::to_string(data.size() - pos));
  DepthImage img(w, h);
  const bool host_little = std::endian::native == std::endian::little;
  for (int row = 0; row < h; ++row) {
    const int v = h - 1 - row;
    for (int u = 0; u < w; ++u) {
      unsigned char b[4];
      std::memcpy(b, data.data() + pos + (static_cast<std::size_t>(row) * w + u) * 4, 4);
      if (little != host_little) {
        std::swap(b[0], b[3]);
        std::swap(b[1], b[2]);
      }
      float f;
      std::memcpy(&f, b, 4);
      if (std::isfinite(f) && f > 0.0f) img.set(u, v, f);
    }
  }
  return img;
}

inline std::string format_pfm(const DepthImage& img) {
  std::string out = "Pf\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + img.values.size() * 4);
  const bool host_little = std::endian::native == std::endian::little;
  for (int row = 0; row < img.height; ++row) {
    const int v = img.height - 1 - row;
    for (int u = 0; u < img.width; ++u) {
      const float f = img.is_valid(u, v) ? img.at(u, v) : 0.0f;
      unsigned char b[4];
      std::memcpy(b, &f, 4);
      if (!host_little) {
        std::swap(b[0], b[3]);
        std::swap(b[1], b[2]);
      }
      std::memcpy(out.data() + header + (static_cast<std::size_t>(row) * img.width + u) * 4, b, 4);
    }
  }
  return out;
}

inline DepthImage read_pfm_depth(const fs::path& path) { return parse_pfm(read_text_file(path)); }
inline void write_pfm_depth(const DepthImage& img, const fs::path& path) {
  write_text_file(path, format_pfm(img));
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) hand masks; any non-zero pixel is inside the mask.

inline ImageMask parse_pgm_mask(const std::string& data) {
  std::size_t pos = 0;
  const std::string magic = detail::header_token(data, pos, "PGM");
  if (magic != "P5") throw UnsupportedFormatError("PGM: only binary P5 masks are supported");
  const int w = static_cast<int>(detail::header_int(data, pos, "PGM"));
  const int h = static_cast<int>(detail::header_int(data, pos, "PGM"));
  const long long maxval = detail::header_int(data, pos, "PGM");
  if (maxval > 255) throw UnsupportedFormatError("PGM: 16-bit masks are not supported");
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (data.size() - pos < n)
    throw ParseError("PGM: expected " + std::to_string(n) + " bytes of pixel data");
  ImageMask m(w, h);
  for (std::size_t i = 0; i < n; ++i) m.data[i] = data[pos + i] != 0 ? 1 : 0;
  return m;
}

inline std::string format_pgm_mask(const ImageMask& m) {
  std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
  for (auto b : m.data) out.push_back(static_cast<char>(b ? 255 : 0));
  return out;
}

inline ImageMask read_pgm_mask(const fs::path& path) { return parse_pgm_mask(read_text_file(path)); }
inline void write_pgm_mask(const ImageMask& m, const fs::path& path) {
  write_text_file(path, format_pgm_mask(m));
}

// ---------------------------------------------------------------------------
// Camera intrinsics sidecar

inline CameraIntrinsics intrinsics_from_json(const json& doc) {
  using namespace detail;
  CameraIntrinsics K;
  K.fx = number(member(doc, "fx", "intrinsics"), "intrinsics.fx");
  K.fy = number(member(doc, "fy", "intrinsics"), "intrinsics.fy");
  K.cx = number(member(doc, "cx", "intrinsics"), "intrinsics.cx");
  K.cy = number(member(doc, "cy", "intrinsics"), "intrinsics.cy");
  const json& w = member(doc, "width", "intrinsics");
  const json& h = member(doc, "height", "intrinsics");
  if (!w.is_number_integer() || !h.is_number_integer())
    throw ParseError("intrinsics: width and height must be integers");
  K.width = w.get<int>();
  K.height = h.get<int>();
  try {
    K.validate();
  } catch (const InvalidArgument& e) {
    throw ValidationError(e.what());
  }
  return K;
}

inline json intrinsics_to_json(const CameraIntrinsics& K) {
  return {{"fx", K.fx}, {"fy", K.fy}, {"cx", K.cx}, {"cy", K.cy},
          {"width", K.width}, {"height", K.height}};
}

inline CameraIntrinsics read_intrinsics(const fs::path& path) {
  return intrinsics_from_json(parse_json(read_text_file(path), path.string()));
}
inline void write_intrinsics(const CameraIntrinsics& K, const fs::path& path) {
  write_text_file(path, intrinsics_to_json(K).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Observation directory: frame_NNNN.ply, frame_NNNN_depth.pfm,
// frame_NNNN_mask.pgm, intrinsics.json, object_true.ply, object_pred.ply.

inline std::string frame_stem(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d", index);
  return buf;
}

struct ObservationSet {
  CameraIntrinsics intrinsics;
  std::vector<Observation> frames;
  PointCloud object_true;
  PointCloud object_pred;
};

inline ObservationSet read_observations(const fs::path& dir, const std::vector<int>& frame_indices) {
  ObservationSet set;
  set.intrinsics = read_intrinsics(dir / "intrinsics.json");
  for (int idx : frame_indices) {
    const std::string stem = frame_stem(idx);
    Observation o;
    o.cloud = read_ply(dir / (stem + ".ply"));
    o.depth = read_pfm_depth(dir / (stem + "_depth.pfm"));
    const fs::path mask = dir / (stem + "_mask.pgm");
    o.mask = fs::exists(mask) ? read_pgm_mask(mask) : ImageMask::from_valid(o.depth);
    if (o.depth.width != set.intrinsics.width || o.depth.height != set.intrinsics.height)
      throw ValidationError(stem + ": depth image size does not match the intrinsics");
    set.frames.push_back(std::move(o));
  }
  set.object_true = read_ply(dir / "object_true.ply");
  set.object_pred = read_ply(dir / "object_pred.ply");
  return set;
}

inline void write_observations(const ObservationSet& set, const std::vector<int>& frame_indices,
                               const fs::path& dir) {
  if (frame_indices.size() != set.frames.size())
    throw InvalidArgument("write_observations: index count does not match frame count");
  write_intrinsics(set.intrinsics, dir / "intrinsics.json");
  for (std::size_t i = 0; i < set.frames.size(); ++i) {
    const std::string stem = frame_stem(frame_indices[i]);
    write_ply(set.frames[i].cloud, dir / (stem + ".ply"));
    write_pfm_depth(set.frames[i].depth, dir / (stem + "_depth.pfm"));
    write_pgm_mask(set.frames[i].mask, dir / (stem + "_mask.pgm"));
  }
  write_ply(set.object_true, dir / "object_true.ply");
  write_ply(set.object_pred, dir / "object_pred.ply");
}

// ---------------------------------------------------------------------------
// Taxonomy weight table

inline TaxonomyWeightTable weight_table_from_json(const json& doc) {
  TaxonomyWeightTable t;
  const json& classes = detail::member(doc, "classes", "weight table");
  if (!classes.is_object()) throw ParseError("weight table: 'classes' must be an object");
  for (const auto& [name, groups] : classes.items()) {
    TaxonomyClass c;
    try {
      c = parse_taxonomy(name);
    } catch (const ConfigError& e) {
      throw ParseError(std::string("weight table: ") + e.what());
    }
    std::array<double, 4> w{};
    for (VectorGroup g : kAllGroups) {
      const std::string where = "weight table: " + name + "." + to_string(g);
      w[static_cast<std::size_t>(g)] = detail::number(detail::member(groups, to_string(g), where), where);
    }
    for (const auto& [gname, _] : groups.items())
      if (!group_from_string(gname))
        throw ParseError("weight table: " + name + ": unknown group '" + gname + "'");
    t.weights[c] = w;
  }
  try {
    t.validate();
  } catch (const ConfigError& e) {
    throw ValidationError(e.what());
  }
  return t;
}

inline json weight_table_to_json(const TaxonomyWeightTable& t) {
  json classes = json::object();
  for (const auto& [c, w] : t.weights) {
    json g = json::object();
    for (VectorGroup grp : kAllGroups) g[to_string(grp)] = w[static_cast<std::size_t>(grp)];
    classes[to_string(c)] = g;
  }
  return {{"classes", classes}};
}

inline TaxonomyWeightTable read_weight_table(const fs::path& path) {
  return weight_table_from_json(parse_json(read_text_file(path), path.string()));
}

// ---------------------------------------------------------------------------
// Robot trajectory output

inline json robot_trajectory_to_json(const RobotTrajectory& traj) {
  json frames = json::array();
  for (const auto& f : traj.frames) {
    json q = json::array();
    for (Eigen::Index i = 0; i < f.q.size(); ++i) q.push_back(f.q[i]);
    frames.push_back({{"index", f.frame_index}, {"wrist", detail::pose_to_json(f.wrist_pose)}, {"q", q}});
  }
  return {{"robot", traj.robot_name}, {"joint_names", traj.joint_names}, {"frames", frames}};
}

inline RobotTrajectory robot_trajectory_from_json(const json& doc) {
  using namespace detail;
  RobotTrajectory t;
  const json& robot = member(doc, "robot", "robot trajectory");
  if (!robot.is_string()) throw ParseError("robot trajectory: 'robot' must be a string");
  t.robot_name = robot.get<std::string>();
  const json& names = member(doc, "joint_names", "robot trajectory");
  if (!names.is_array()) throw ParseError("robot trajectory: 'joint_names' must be an array");
  for (const auto& n : names) {
    if (!n.is_string()) throw ParseError("robot trajectory: joint names must be strings");
    t.joint_names.push_back(n.get<std::string>());
  }
  const json& frames = member(doc, "frames", "robot trajectory");
  if (!frames.is_array()) throw ParseError("robot trajectory: 'frames' must be an array");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string where = "frame " + std::to_string(i);
    RobotFrame f;
    const json& idx = member(frames[i], "index", where);
    if (!idx.is_number_integer()) throw ParseError(where + ": index must be an integer");
    f.frame_index = idx.get<int>();
    f.wrist_pose = pose_from_json(member(frames[i], "wrist", where), where + ": wrist");
    const json& q = member(frames[i], "q", where);
    if (!q.is_array() || q.size() != t.joint_names.size())
      throw ParseError(where + ": expected " + std::to_string(t.joint_names.size()) + " joint values");
    f.q.values.resize(static_cast<Eigen::Index>(q.size()));
    for (std::size_t k = 0; k < q.size(); ++k)
      f.q.values(static_cast<Eigen::Index>(k)) = number(q[k], where + ": q");
    t.frames.push_back(std::move(f));
  }
  return t;
}

inline void write_robot_trajectory(const RobotTrajectory& traj, const fs::path& path) {
  write_text_file(path, robot_trajectory_to_json(traj).dump(2) + "\n");
}

inline RobotTrajectory read_robot_trajectory(const fs::path& path) {
  return robot_trajectory_from_json(parse_json(read_text_file(path), path.string()));
}

// ---------------------------------------------------------------------------
// Alignment report

inline json alignments_to_json(const std::vector<HandAlignment>& as) {
  json frames = json::array();
  for (const auto& a : as)
    frames.push_back({{"index", a.frame_index},
                      {"sigma", a.sigma},
                      {"correction", detail::pose_to_json(a.correction)},
                      {"icp_residual", a.icp_residual},
                      {"depth_residual", a.depth_residual},
                      {"converged", a.converged},
                      {"iterations", a.iterations},
                      {"initial_objective", a.initial_objective},
                      {"final_objective", a.final_objective}});
  return {{"frames", frames}};
}

inline std::vector<HandAlignment> alignments_from_json(const json& doc) {
  using namespace detail;
  std::vector<HandAlignment> out;
  const json& frames = member(doc, "frames", "alignments");
  if (!frames.is_array()) throw ParseError("alignments: 'frames' must be an array");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const std::string where = "alignment " + std::to_string(i);
    const json& f = frames[i];
    HandAlignment a;
    const json& idx = member(f, "index", where);
    if (!idx.is_number_integer()) throw ParseError(where + ": index must be an integer");
    a.frame_index = idx.get<int>();
    a.sigma = number(member(f, "sigma", where), where + ": sigma");
    if (!(a.sigma > 0.0)) throw ParseError(where + ": sigma must be positive");
    a.correction = pose_from_json(member(f, "correction", where), where + ": correction");
    if (f.contains("icp_residual")) a.icp_residual = number(f["icp_residual"], where);
    if (f.contains("depth_residual")) a.depth_residual = number(f["depth_residual"], where);
    if (f.contains("converged")) a.converged = f["converged"].is_boolean() && f["converged"].get<bool>();
    out.push_back(a);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline configuration

struct RefineSettings {
  double lambda_init = 0.1;
  int alternations = 3;
  std::optional<double> max_residual;  // mean fingertip error bound, meters
};

struct CalibrationSettings {
  bool with_scale = true;
  std::vector<double> weights;  // empty: uniform
};

struct PipelineConfig {
  fs::path urdf;
  fs::path hand_trajectory;
  fs::path observations_dir;
  fs::path output;
  fs::path report;  // empty: <output stem>.report.json
  std::optional<fs::path> weight_table;
  TaxonomyClass taxonomy = TaxonomyClass::kMediumWrap;
  std::optional<FingerMapping> finger_mapping;  // empty: Allegro default
  AlignConfig align;
  RetargetConfig retarget;
  std::optional<double> hand_scale;  // empty: computed from the first aligned frame
  RefineSettings refine;
  CalibrationSettings calibration;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;
};

namespace detail {

class KeyChecker {
 public:
  KeyChecker(bool lenient, std::vector<std::string>& warnings)
      : lenient_(lenient), warnings_(warnings) {}

  void check(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError(where + ": expected an object");
    for (const auto& [key, _] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (ok) continue;
      const std::string msg = where + ": unknown key '" + key + "'";
      if (!lenient_) throw ConfigError(msg);
      warnings_.push_back(msg);
    }
  }

 private:
  bool lenient_;
  std::vector<std::string>& warnings_;
};

inline double cfg_number(const json& obj, const char* key, double fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj[key];
  if (!v.is_number() || !std::isfinite(v.get<double>()))
    throw ConfigError(where + "." + key + ": expected a number");
  return v.get<double>();
}

inline int cfg_int(const json& obj, const char* key, int fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj[key];
  if (!v.is_number_integer()) throw ConfigError(where + "." + key + ": expected an integer");
  return v.get<int>();
}

inline bool cfg_bool(const json& obj, const char* key, bool fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj[key];
  if (!v.is_boolean()) throw ConfigError(where + "." + key + ": expected true or false");
  return v.get<bool>();
}

inline std::string cfg_string(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ConfigError(where + ": missing required field '" + key + "'");
  const json& v = obj[key];
  if (!v.is_string()) throw ConfigError(where + "." + key + ": expected a string");
  return v.get<std::string>();
}

inline SolveOptions solver_from_json(const json& obj, const std::string& where, KeyChecker& keys) {
  keys.check(obj, where, {"grad_tol", "step_tol", "max_iters", "fd_eps", "memory"});
  SolveOptions o;
  o.grad_tol = cfg_number(obj, "grad_tol", o.grad_tol, where);
  o.step_tol = cfg_number(obj, "step_tol", o.step_tol, where);
  o.max_iters = cfg_int(obj, "max_iters", o.max_iters, where);
  o.fd_eps = cfg_number(obj, "fd_eps", o.fd_eps, where);
  o.memory = cfg_int(obj, "memory", o.memory, where);
  if (!(o.grad_tol > 0.0) || !(o.step_tol > 0.0) || o.max_iters < 1 || !(o.fd_eps > 0.0) || o.memory < 1)
    throw ConfigError(where + ": tolerances, fd_eps, max_iters and memory must be positive");
  return o;
}

}  // namespace detail

inline FingerMapping finger_mapping_from_json(const json& obj, detail::KeyChecker& keys) {
  keys.check(obj, "finger_mapping", {"palm_link", "digits"});
  FingerMapping m;
  m.palm_link = detail::cfg_string(obj, "palm_link", "finger_mapping");
  if (!obj.contains("digits") || !obj["digits"].is_object())
    throw ConfigError("finger_mapping: missing object 'digits'");
  for (const auto& [name, v] : obj["digits"].items()) {
    const auto d = digit_from_string(name);
    if (!d) throw ConfigError("finger_mapping: unknown digit '" + name + "'");
    const std::string where = "finger_mapping.digits." + name;
    DigitLinks links;
    if (v.is_string()) {
      links.tip = v.get<std::string>();
    } else {
      keys.check(v, where, {"tip", "proximal"});
      links.tip = detail::cfg_string(v, "tip", where);
      if (v.contains("proximal")) links.proximal = detail::cfg_string(v, "proximal", where);
    }
    m.digits[*d] = links;
  }
  return m;
}

inline json finger_mapping_to_json(const FingerMapping& m) {
  json digits = json::object();
  for (const auto& [d, l] : m.digits) {
    json e = {{"tip", l.tip}};
    if (!l.proximal.empty()) e["proximal"] = l.proximal;
    digits[to_string(d)] = e;
  }
  return {{"palm_link", m.palm_link}, {"digits", digits}};
}

// Relative paths resolve against base_dir (the directory holding the file).
inline PipelineConfig config_from_json(const json& doc, const fs::path& base_dir, bool lenient = false) {
  PipelineConfig c;
  detail::KeyChecker keys(lenient, c.warnings);
  keys.check(doc, "config",
             {"urdf", "hand_trajectory", "observations_dir", "output", "report", "taxonomy",
              "finger_mapping", "weight_table", "align", "retarget", "refine", "calibration", "seed"});
  auto path = [&](const char* key, bool must_exist) {
    fs::path p = detail::cfg_string(doc, key, "config");
    if (p.is_relative()) p = base_dir / p;
    if (must_exist && !fs::exists(p))
      throw ConfigError(std::string("config.") + key + ": '" + p.string() + "' does not exist");
    return p.lexically_normal();
  };
  c.urdf = path("urdf", true);
  c.hand_trajectory = path("hand_trajectory", true);
  c.observations_dir = path("observations_dir", true);
  c.output = path("output", false);
  if (doc.contains("report")) c.report = path("report", false);
  else c.report = fs::path(c.output).replace_extension(".report.json");
  if (doc.contains("weight_table")) c.weight_table = path("weight_table", true);
  c.taxonomy = parse_taxonomy(detail::cfg_string(doc, "taxonomy", "config"));
  if (doc.contains("finger_mapping")) c.finger_mapping = finger_mapping_from_json(doc["finger_mapping"], keys);
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned() && !doc["seed"].is_number_integer())
      throw ConfigError("config.seed: expected a non-negative integer");
    if (doc["seed"].is_number_integer() && doc["seed"].get<long long>() < 0)
      throw ConfigError("config.seed: expected a non-negative integer");
    c.seed = doc["seed"].get<std::uint64_t>();
  }
  c.align.sampling_seed = c.seed;

  if (doc.contains("align")) {
    const json& a = doc["align"];
    const std::string w = "config.align";
    keys.check(a, w, {"huber_delta", "lambda_rend", "lambda_reg", "outer_iters", "inner_iters",
                      "splat_footprint", "mano_points", "visible_only", "scale_warmup", "independent"});
    c.align.huber_delta = detail::cfg_number(a, "huber_delta", c.align.huber_delta, w);
    c.align.lambda_rend = detail::cfg_number(a, "lambda_rend", c.align.lambda_rend, w);
    c.align.lambda_reg = detail::cfg_number(a, "lambda_reg", c.align.lambda_reg, w);
    c.align.outer_iters = detail::cfg_int(a, "outer_iters", c.align.outer_iters, w);
    c.align.inner_iters = detail::cfg_int(a, "inner_iters", c.align.inner_iters, w);
    c.align.splat_footprint = detail::cfg_int(a, "splat_footprint", c.align.splat_footprint, w);
    c.align.mano_points = detail::cfg_int(a, "mano_points", c.align.mano_points, w);
    c.align.visible_only = detail::cfg_bool(a, "visible_only", c.align.visible_only, w);
    c.align.scale_warmup = detail::cfg_bool(a, "scale_warmup", c.align.scale_warmup, w);
    c.align.independent = detail::cfg_bool(a, "independent", c.align.independent, w);
  }
  c.align.validate();

  if (doc.contains("retarget")) {
    const json& r = doc["retarget"];
    const std::string w = "config.retarget";
    keys.check(r, w, {"huber_delta", "lambda_smooth", "hand_scale", "solver", "mount"});
    c.retarget.huber_delta = detail::cfg_number(r, "huber_delta", c.retarget.huber_delta, w);
    c.retarget.lambda_smooth = detail::cfg_number(r, "lambda_smooth", c.retarget.lambda_smooth, w);
    if (r.contains("hand_scale")) c.hand_scale = detail::cfg_number(r, "hand_scale", 1.0, w);
    if (r.contains("solver")) c.retarget.solver = detail::solver_from_json(r["solver"], w + ".solver", keys);
    if (r.contains("mount")) {
      try {
        c.retarget.mount = detail::pose_from_json(r["mount"], w + ".mount");
      } catch (const ParseError& e) {
        throw ConfigError(e.what());
      }
    }
  }
  if (c.hand_scale && !(*c.hand_scale > 0.0)) throw ConfigError("config.retarget.hand_scale must be > 0");
  c.retarget.validate();

  if (doc.contains("refine")) {
    const json& r = doc["refine"];
    const std::string w = "config.refine";
    keys.check(r, w, {"lambda_init", "alternations", "max_residual"});
    c.refine.lambda_init = detail::cfg_number(r, "lambda_init", c.refine.lambda_init, w);
    c.refine.alternations = detail::cfg_int(r, "alternations", c.refine.alternations, w);
    if (r.contains("max_residual")) c.refine.max_residual = detail::cfg_number(r, "max_residual", 0.0, w);
  }
  if (!(c.refine.lambda_init >= 0.0) || c.refine.alternations < 1)
    throw ConfigError("config.refine: lambda_init must be >= 0 and alternations >= 1");
  if (c.refine.max_residual && !(*c.refine.max_residual >= 0.0))
    throw ConfigError("config.refine.max_residual must be >= 0");

  if (doc.contains("calibration")) {
    const json& k = doc["calibration"];
    const std::string w = "config.calibration";
    keys.check(k, w, {"with_scale", "weights"});
    c.calibration.with_scale = detail::cfg_bool(k, "with_scale", true, w);
    if (k.contains("weights")) {
      if (!k["weights"].is_array()) throw ConfigError(w + ".weights: expected an array");
      for (const auto& v : k["weights"]) {
        if (!v.is_number() || v.get<double>() < 0.0)
          throw ConfigError(w + ".weights: expected non-negative numbers");
        c.calibration.weights.push_back(v.get<double>());
      }
    }
  }
  return c;
}

inline PipelineConfig load_config(const fs::path& path, bool lenient = false) {
  if (!fs::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  json doc;
  try {
    doc = parse_json(text, path.string());
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  fs::path base = path.parent_path();
  if (base.empty()) base = ".";
  return config_from_json(doc, base, lenient);
}

}  // namespace retarget
