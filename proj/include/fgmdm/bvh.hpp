#pragma once

// BVH motion-capture text format: export of skeleton+motion, and a parser
// good enough to round-trip our own output (plus reasonably formatted files
// from elsewhere).
//
// Root carries 6 channels (Xposition Yposition Zposition Zrotation Yrotation
// Xrotation), all other joints 3 rotation channels in ZYX order. Rotations
// are written in degrees; the column order of MOTION lines follows the
// depth-first order of the HIERARCHY section.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fgmdm/common.hpp"
#include "fgmdm/skeleton.hpp"

namespace fgmdm {

namespace detail {

constexpr double kRadToDeg = 57.29577951308232;
constexpr double kDegToRad = 0.017453292519943295;

/// %.6f with negative zero snapped to plain zero.
inline std::string fmt6(double v) {
  if (std::fabs(v) < 5e-7) v = 0.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

inline std::vector<std::vector<int>> children_of(const Skeleton& skel) {
  std::vector<std::vector<int>> ch(skel.joint_count());
  for (int j = 1; j < skel.joint_count(); ++j)
    ch[skel.joints[j].parent].push_back(j);
  return ch;
}

/// Joint visitation order of the exported hierarchy (depth first, children
/// in skeleton order). MOTION columns follow this order.
inline std::vector<int> dfs_order(const Skeleton& skel) {
  const auto ch = children_of(skel);
  std::vector<int> order;
  order.reserve(skel.joint_count());
  std::vector<int> stack = {0};
  while (!stack.empty()) {
    const int j = stack.back();
    stack.pop_back();
    order.push_back(j);
    for (auto it = ch[j].rbegin(); it != ch[j].rend(); ++it)
      stack.push_back(*it);
  }
  return order;
}

inline void write_joint(std::ostream& os, const Skeleton& skel,
                        const std::vector<std::vector<int>>& ch, int j,
                        int depth) {
  const std::string ind(static_cast<std::size_t>(depth) * 2, ' ');
  const Joint& joint = skel.joints[j];
  if (j == 0)
    os << ind << "ROOT " << joint.name << "\n";
  else
    os << ind << "JOINT " << joint.name << "\n";
  os << ind << "{\n";
  os << ind << "  OFFSET " << fmt6(joint.offset[0]) << " "
     << fmt6(joint.offset[1]) << " " << fmt6(joint.offset[2]) << "\n";
  if (j == 0)
    os << ind
       << "  CHANNELS 6 Xposition Yposition Zposition Zrotation Yrotation "
          "Xrotation\n";
  else
    os << ind << "  CHANNELS 3 Zrotation Yrotation Xrotation\n";
  if (ch[j].empty()) {
    os << ind << "  End Site\n";
    os << ind << "  {\n";
    os << ind << "    OFFSET " << fmt6(joint.end_site[0]) << " "
       << fmt6(joint.end_site[1]) << " " << fmt6(joint.end_site[2]) << "\n";
    os << ind << "  }\n";
  } else {
    for (int c : ch[j]) write_joint(os, skel, ch, c, depth + 1);
  }
  os << ind << "}\n";
}

}  // namespace detail

inline void write_bvh(std::ostream& os, const Skeleton& skel,
                      const Motion& motion) {
  if (motion.frames() == 0) throw ContractError("write_bvh: empty motion");
  if (motion.joint_count() != skel.joint_count())
    throw ContractError("write_bvh: joint count mismatch");
  const auto ch = detail::children_of(skel);
  const auto order = detail::dfs_order(skel);

  os << "HIERARCHY\n";
  detail::write_joint(os, skel, ch, 0, 0);
  os << "MOTION\n";
  os << "Frames: " << motion.frames() << "\n";
  os << "Frame Time: " << detail::fmt6(1.0 / motion.fps) << "\n";
  for (int i = 0; i < motion.frames(); ++i) {
    std::string line;
    bool first = true;
    auto emit = [&](double v) {
      if (!first) line += " ";
      line += detail::fmt6(v);
      first = false;
    };
    for (int j : order) {
      const auto e = matrix_to_euler_zyx(quat_to_matrix(motion.quats[i][j]));
      if (j == 0) {
        emit(motion.root[i][0]);
        emit(motion.root[i][1]);
        emit(motion.root[i][2]);
      }
      emit(e[0] * detail::kRadToDeg);
      emit(e[1] * detail::kRadToDeg);
      emit(e[2] * detail::kRadToDeg);
    }
    os << line << "\n";
  }
}

inline std::string bvh_string(const Skeleton& skel, const Motion& motion) {
  std::ostringstream os;
  write_bvh(os, skel, motion);
  return os.str();
}

inline void save_bvh(const std::string& path, const Skeleton& skel,
                     const Motion& motion) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  write_bvh(f, skel, motion);
  if (!f.good()) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Import
// ---------------------------------------------------------------------------

struct BvhFile {
  Skeleton skeleton;  // joints in hierarchy (depth-first) order
  Motion motion;
};

namespace detail {

struct BvhTokenizer {
  std::istringstream in;
  int line = 1;
  explicit BvhTokenizer(const std::string& text) : in(text) {}

  /// Next whitespace-delimited token; empty string at end of input.
  std::string next() {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
      if (c == '\n') {
        ++line;
        if (!tok.empty()) return tok;
      } else if (c == ' ' || c == '\t' || c == '\r') {
        if (!tok.empty()) return tok;
      } else {
        tok.push_back(static_cast<char>(c));
      }
    }
    return tok;
  }

  std::string expect_token(const char* what) {
    std::string tok = next();
    if (tok.empty())
      throw ParseError(std::string("unexpected end of file, expected ") + what,
                       line);
    return tok;
  }

  void expect(const std::string& want) {
    const std::string got = expect_token(want.c_str());
    if (got != want)
      throw ParseError("expected '" + want + "', got '" + got + "'", line);
  }

  double number(const char* what) {
    const std::string tok = expect_token(what);
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      throw ParseError(std::string("expected a number for ") + what +
                           ", got '" + tok + "'",
                       line);
    }
  }
};

}  // namespace detail

/// Parses BVH text. Channel layouts are restricted to the ones this library
/// writes: 6 on the root (positions then ZYX rotations) and ZYX rotations
/// elsewhere.
inline BvhFile parse_bvh(const std::string& text) {
  detail::BvhTokenizer tz(text);
  BvhFile out;

  tz.expect("HIERARCHY");
  std::string tok = tz.expect_token("ROOT");
  if (tok != "ROOT") throw ParseError("expected 'ROOT', got '" + tok + "'", tz.line);

  // stack of joint indices currently open; -2 marks an End Site block
  std::vector<int> stack;
  int pending_parent = -1;
  bool root_seen = false;

  auto open_joint = [&](const std::string& name) {
    Joint j;
    j.name = name;
    j.parent = pending_parent;
    out.skeleton.joints.push_back(j);
    const int idx = static_cast<int>(out.skeleton.joints.size()) - 1;
    tz.expect("{");
    tz.expect("OFFSET");
    out.skeleton.joints[idx].offset = {tz.number("OFFSET x"),
                                       tz.number("OFFSET y"),
                                       tz.number("OFFSET z")};
    tz.expect("CHANNELS");
    const double cn = tz.number("channel count");
    if (idx == 0) {
      if (cn != 6) throw ParseError("root must have 6 channels", tz.line);
      for (const char* want : {"Xposition", "Yposition", "Zposition",
                               "Zrotation", "Yrotation", "Xrotation"})
        tz.expect(want);
    } else {
      if (cn != 3) throw ParseError("joint must have 3 channels", tz.line);
      for (const char* want : {"Zrotation", "Yrotation", "Xrotation"})
        tz.expect(want);
    }
    stack.push_back(idx);
    pending_parent = idx;
  };

  open_joint(tz.expect_token("root name"));
  root_seen = true;

  while (true) {
    tok = tz.expect_token("hierarchy element");
    if (tok == "JOINT") {
      open_joint(tz.expect_token("joint name"));
    } else if (tok == "End") {
      tz.expect("Site");
      tz.expect("{");
      tz.expect("OFFSET");
      const Vec3 tip = {tz.number("OFFSET x"), tz.number("OFFSET y"),
                        tz.number("OFFSET z")};
      out.skeleton.joints[static_cast<std::size_t>(stack.back())].end_site =
          tip;
      tz.expect("}");
    } else if (tok == "}") {
      if (stack.empty()) throw ParseError("unbalanced '}'", tz.line);
      stack.pop_back();
      pending_parent = stack.empty() ? -1 : stack.back();
      if (stack.empty()) break;  // hierarchy closed
    } else {
      throw ParseError("unexpected token '" + tok + "' in hierarchy", tz.line);
    }
  }
  if (!root_seen || out.skeleton.joints.empty())
    throw ParseError("no root joint", tz.line);
  out.skeleton.validate();

  tz.expect("MOTION");
  tz.expect("Frames:");
  const int frames = static_cast<int>(tz.number("frame count"));
  if (frames <= 0) throw ParseError("frame count must be positive", tz.line);
  tz.expect("Frame");
  tz.expect("Time:");
  const double frame_time = tz.number("frame time");
  if (frame_time <= 0) throw ParseError("frame time must be positive", tz.line);

  const int J = out.skeleton.joint_count();
  out.motion.fps = 1.0 / frame_time;
  out.motion.root.resize(frames);
  out.motion.quats.assign(frames, std::vector<Quat>(J));
  for (int i = 0; i < frames; ++i) {
    for (int j = 0; j < J; ++j) {
      if (j == 0)
        out.motion.root[i] = {tz.number("root position"),
                              tz.number("root position"),
                              tz.number("root position")};
      const double z = tz.number("rotation") * detail::kDegToRad;
      const double y = tz.number("rotation") * detail::kDegToRad;
      const double x = tz.number("rotation") * detail::kDegToRad;
      out.motion.quats[i][j] = matrix_to_quat(euler_zyx_to_matrix(z, y, x));
    }
  }
  return out;
}

inline BvhFile load_bvh(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open: " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_bvh(buf.str());
}

}  // namespace fgmdm
