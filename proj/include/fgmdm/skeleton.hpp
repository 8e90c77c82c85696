#pragma once

// Rigid skeleton, quaternion math, forward kinematics (plain and
// differentiable), flattened motion features, and foot-contact detection.
//
// Conventions: right-handed, Y up, meters. Quaternions are (w, x, y, z),
// expressed in the parent frame, and rotate column vectors; a +90 degree
// rotation about Y maps (1,0,0) to (0,0,-1).

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fgmdm/autograd.hpp"
#include "fgmdm/common.hpp"
#include "fgmdm/parts.hpp"
#include "fgmdm/tensor.hpp"

namespace fgmdm {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 vadd(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
inline Vec3 vsub(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
inline double vnorm(const Vec3& a) {
  return std::sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2]);
}
inline Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
          m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}
inline Mat3 mat_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      c[i * 3 + j] = s;
    }
  return c;
}
inline Mat3 mat_transpose(const Mat3& m) {
  return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}
inline Mat3 mat_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

// ---------------------------------------------------------------------------
// Quaternions
// ---------------------------------------------------------------------------

struct Quat {
  double w = 1, x = 0, y = 0, z = 0;
};

inline Quat quat_mul(const Quat& a, const Quat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

inline Quat quat_conjugate(const Quat& q) { return {q.w, -q.x, -q.y, -q.z}; }

inline double quat_norm(const Quat& q) {
  return std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
}

/// Exact normalization; a (near-)zero quaternion falls back to the identity
/// rotation. (The differentiable FK path uses its own smooth floor instead,
/// because it must stay differentiable through zero.)
inline Quat quat_normalize(const Quat& q) {
  const double n = quat_norm(q);
  if (n < 1e-12) return {1, 0, 0, 0};
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

inline Quat quat_from_axis_angle(const Vec3& axis, double angle) {
  const double n = vnorm(axis);
  if (n < 1e-12) return {1, 0, 0, 0};
  const double h = 0.5 * angle;
  const double s = std::sin(h) / n;
  return {std::cos(h), axis[0] * s, axis[1] * s, axis[2] * s};
}

/// Rotation matrix from a quaternion assumed to be unit length.
template <typename T>
inline void quat_to_matrix_unit(T w, T x, T y, T z, T* r) {
  const T xx = x * x, yy = y * y, zz = z * z;
  const T xy = x * y, xz = x * z, yz = y * z;
  const T wx = w * x, wy = w * y, wz = w * z;
  r[0] = T(1) - T(2) * (yy + zz);
  r[1] = T(2) * (xy - wz);
  r[2] = T(2) * (xz + wy);
  r[3] = T(2) * (xy + wz);
  r[4] = T(1) - T(2) * (xx + zz);
  r[5] = T(2) * (yz - wx);
  r[6] = T(2) * (xz - wy);
  r[7] = T(2) * (yz + wx);
  r[8] = T(1) - T(2) * (xx + yy);
}

inline Mat3 quat_to_matrix(const Quat& q) {
  const Quat u = quat_normalize(q);
  Mat3 m;
  quat_to_matrix_unit(u.w, u.x, u.y, u.z, m.data());
  return m;
}

/// Robust rotation-matrix-to-quaternion conversion (largest-pivot branch).
inline Quat matrix_to_quat(const Mat3& m) {
  const double tr = m[0] + m[4] + m[8];
  Quat q;
  if (tr > 0) {
    const double s = std::sqrt(tr + 1.0) * 2.0;
    q.w = 0.25 * s;
    q.x = (m[7] - m[5]) / s;
    q.y = (m[2] - m[6]) / s;
    q.z = (m[3] - m[1]) / s;
  } else if (m[0] > m[4] && m[0] > m[8]) {
    const double s = std::sqrt(1.0 + m[0] - m[4] - m[8]) * 2.0;
    q.w = (m[7] - m[5]) / s;
    q.x = 0.25 * s;
    q.y = (m[1] + m[3]) / s;
    q.z = (m[2] + m[6]) / s;
  } else if (m[4] > m[8]) {
    const double s = std::sqrt(1.0 + m[4] - m[0] - m[8]) * 2.0;
    q.w = (m[2] - m[6]) / s;
    q.x = (m[1] + m[3]) / s;
    q.y = 0.25 * s;
    q.z = (m[5] + m[7]) / s;
  } else {
    const double s = std::sqrt(1.0 + m[8] - m[0] - m[4]) * 2.0;
    q.w = (m[3] - m[1]) / s;
    q.x = (m[2] + m[6]) / s;
    q.y = (m[5] + m[7]) / s;
    q.z = 0.25 * s;
  }
  const double n = quat_norm(q);
  return {q.w / n, q.x / n, q.y / n, q.z / n};
}

/// Geodesic rotation angle between two quaternions, in [0, pi].
inline double quat_geodesic_angle(const Quat& a, const Quat& b) {
  const Quat ua = quat_normalize(a), ub = quat_normalize(b);
  double dot = ua.w * ub.w + ua.x * ub.x + ua.y * ub.y + ua.z * ub.z;
  dot = std::min(1.0, std::max(-1.0, std::fabs(dot)));
  return 2.0 * std::acos(dot);
}

// ---------------------------------------------------------------------------
// Euler (Z then Y then X applied to column vectors: R = Rz * Ry * Rx)
// ---------------------------------------------------------------------------

inline Mat3 euler_zyx_to_matrix(double z, double y, double x) {
  const double cz = std::cos(z), sz = std::sin(z);
  const double cy = std::cos(y), sy = std::sin(y);
  const double cx = std::cos(x), sx = std::sin(x);
  return {cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
          sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
          -sy,     cy * sx,                cy * cx};
}

/// Inverse of euler_zyx_to_matrix; returns {z, y, x} in radians.
inline std::array<double, 3> matrix_to_euler_zyx(const Mat3& m) {
  const double sy = -m[6];
  if (std::fabs(sy) > 0.999999) {
    // gimbal lock: fold x into z
    const double y = sy > 0 ? 1.5707963267948966 : -1.5707963267948966;
    const double z = std::atan2(-m[1], m[4]);
    return {z, y, 0.0};
  }
  const double y = std::asin(sy);
  const double z = std::atan2(m[3], m[0]);
  const double x = std::atan2(m[7], m[8]);
  return {z, y, x};
}

// ---------------------------------------------------------------------------
// Skeleton
// ---------------------------------------------------------------------------

struct Joint {
  std::string name;
  int parent = -1;             // -1 for the root; parents precede children
  Vec3 offset{0, 0, 0};        // rest offset from the parent, meters
  Vec3 end_site{0, 0.08, 0};   // tip offset, only used when the joint is a leaf
};

struct Skeleton {
  std::vector<Joint> joints;
  std::vector<int> foot_joints;
  std::array<std::vector<int>, kPartCount> part_joints;  // part_names() order

  int joint_count() const { return static_cast<int>(joints.size()); }

  int find(const std::string& name) const {
    for (int j = 0; j < joint_count(); ++j)
      if (joints[j].name == name) return j;
    return -1;
  }

  void validate() const {
    for (int j = 0; j < joint_count(); ++j) {
      const int p = joints[j].parent;
      if (j == 0 ? p != -1 : (p < 0 || p >= j))
        throw ValidationError("skeleton: joint " + joints[j].name +
                              " parent must precede it");
    }
    for (int f : foot_joints)
      if (f < 0 || f >= joint_count())
        throw ValidationError("skeleton: foot joint index out of range");
  }
};

/// 16-joint humanoid. Feet rest slightly above the ground plane so standing
/// contact detection has margin on both sides of its thresholds.
inline Skeleton default_skeleton() {
  Skeleton s;
  auto add = [&](const std::string& name, int parent, Vec3 off, Vec3 tip) {
    Joint j;
    j.name = name;
    j.parent = parent;
    j.offset = off;
    j.end_site = tip;
    s.joints.push_back(j);
  };
  //             name          parent offset                 end site
  add("pelvis",      -1, {0, 0, 0},        {0, 0.05, 0});       // 0
  add("waist",        0, {0, 0.10, 0},     {0, 0.05, 0});       // 1
  add("torso",        1, {0, 0.18, 0},     {0, 0.05, 0});       // 2
  add("neck",         2, {0, 0.22, 0},     {0, 0.12, 0});       // 3 (tip = head)
  add("l_shoulder",   2, {0.18, 0.12, 0},  {0.05, 0, 0});       // 4
  add("l_elbow",      4, {0.28, 0, 0},     {0.05, 0, 0});       // 5
  add("l_wrist",      5, {0.25, 0, 0},     {0.08, 0, 0});       // 6
  add("r_shoulder",   2, {-0.18, 0.12, 0}, {-0.05, 0, 0});      // 7
  add("r_elbow",      7, {-0.28, 0, 0},    {-0.05, 0, 0});      // 8
  add("r_wrist",      8, {-0.25, 0, 0},    {-0.08, 0, 0});      // 9
  add("l_hip",        0, {0.09, -0.06, 0}, {0, -0.05, 0});      // 10
  add("l_knee",      10, {0, -0.42, 0},    {0, -0.05, 0});      // 11
  add("l_ankle",     11, {0, -0.43, 0},    {0, -0.04, 0.12});   // 12
  add("r_hip",        0, {-0.09, -0.06, 0}, {0, -0.05, 0});     // 13
  add("r_knee",      13, {0, -0.42, 0},    {0, -0.05, 0});      // 14
  add("r_ankle",     14, {0, -0.43, 0},    {0, -0.04, 0.12});   // 15
  s.foot_joints = {12, 15};
  s.part_joints = {{
      {4, 5, 6, 7, 8, 9},      // arms
      {10, 11, 12, 13, 14, 15},// legs
      {2},                     // torso
      {3},                     // neck
      {0},                     // buttocks
      {1},                     // waist
  }};
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Motion
// ---------------------------------------------------------------------------

/// A clip: per-frame root translation plus one parent-relative quaternion per
/// joint. Default pelvis height puts the feet just above the ground.
struct Motion {
  double fps = 20.0;
  std::vector<Vec3> root;                // [n]
  std::vector<std::vector<Quat>> quats;  // [n][J]

  int frames() const { return static_cast<int>(root.size()); }
  int joint_count() const {
    return root.empty() ? 0 : static_cast<int>(quats[0].size());
  }
};

/// Rest pelvis height for the default skeleton (feet at 0.04 m).
inline constexpr double kRestRootHeight = 0.95;

inline Motion make_rest_motion(int frames, int joints, double fps = 20.0) {
  Motion m;
  m.fps = fps;
  m.root.assign(frames, Vec3{0, kRestRootHeight, 0});
  m.quats.assign(frames, std::vector<Quat>(joints));
  return m;
}

/// Feature width of a flattened frame: root xyz followed by (w,x,y,z) per
/// joint.
inline int flat_width(int joints) { return 3 + 4 * joints; }

template <typename T>
TensorT<T> motion_to_flat(const Motion& m) {
  const int n = m.frames(), J = m.joint_count();
  TensorT<T> out = TensorT<T>::zeros({n, flat_width(J)});
  for (int i = 0; i < n; ++i) {
    T* row = out.data.data() + static_cast<std::size_t>(i) * out.cols();
    row[0] = static_cast<T>(m.root[i][0]);
    row[1] = static_cast<T>(m.root[i][1]);
    row[2] = static_cast<T>(m.root[i][2]);
    for (int j = 0; j < J; ++j) {
      const Quat& q = m.quats[i][j];
      row[3 + 4 * j + 0] = static_cast<T>(q.w);
      row[3 + 4 * j + 1] = static_cast<T>(q.x);
      row[3 + 4 * j + 2] = static_cast<T>(q.y);
      row[3 + 4 * j + 3] = static_cast<T>(q.z);
    }
  }
  return out;
}

template <typename T>
Motion flat_to_motion(const TensorT<T>& flat, double fps) {
  const int n = flat.rows();
  const int width = flat.cols();
  if ((width - 3) % 4 != 0 || width < 7)
    throw ContractError("flat motion: width must be 3 + 4*joints");
  const int J = (width - 3) / 4;
  Motion m;
  m.fps = fps;
  m.root.resize(n);
  m.quats.assign(n, std::vector<Quat>(J));
  for (int i = 0; i < n; ++i) {
    const T* row = flat.data.data() + static_cast<std::size_t>(i) * width;
    m.root[i] = {double(row[0]), double(row[1]), double(row[2])};
    for (int j = 0; j < J; ++j) {
      m.quats[i][j] = {double(row[3 + 4 * j + 0]), double(row[3 + 4 * j + 1]),
                       double(row[3 + 4 * j + 2]), double(row[3 + 4 * j + 3])};
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward kinematics
// ---------------------------------------------------------------------------

/// World positions for one frame. Quaternions are normalized internally.
inline std::vector<Vec3> fk_frame(const Skeleton& skel, const Vec3& root,
                                  const std::vector<Quat>& quats) {
  const int J = skel.joint_count();
  if (static_cast<int>(quats.size()) != J)
    throw ContractError("fk_frame: quaternion count != joint count");
  std::vector<Vec3> pos(J);
  std::vector<Mat3> world(J);
  for (int j = 0; j < J; ++j) {
    const Mat3 r = quat_to_matrix(quats[j]);
    const int p = skel.joints[j].parent;
    if (p < 0) {
      pos[j] = root;
      world[j] = r;
    } else {
      pos[j] = vadd(pos[p], mat_vec(world[p], skel.joints[j].offset));
      world[j] = mat_mul(world[p], r);
    }
  }
  return pos;
}

/// [n][J] world positions.
inline std::vector<std::vector<Vec3>> fk_motion(const Skeleton& skel,
                                                const Motion& m) {
  std::vector<std::vector<Vec3>> out(m.frames());
  for (int i = 0; i < m.frames(); ++i)
    out[i] = fk_frame(skel, m.root[i], m.quats[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Differentiable forward kinematics
// ---------------------------------------------------------------------------

/// Tape op mapping flattened motion features [n, 3+4J] to world joint
/// positions [n, 3J]. The backward pass runs the adjoint of the kinematic
/// recurrence followed by the quaternion-normalization jacobian.
template <typename T>
typename TapeT<T>::Var fk_positions(TapeT<T>& tape,
                                    typename TapeT<T>::Var flat,
                                    const Skeleton& skel) {
  using Var = typename TapeT<T>::Var;
  const TensorT<T>& x = tape.value(flat);
  const int J = skel.joint_count();
  const int width = flat_width(J);
  if (x.cols() != width)
    throw ContractError("fk_positions: feature width mismatch");
  const int n = x.rows();
  const T qeps = T(1e-8);

  struct Saved {
    // per frame, per joint
    std::vector<T> qn;     // normalized quats [n*J*4]
    std::vector<T> inv_s;  // 1/sqrt(|q|^2+eps) [n*J]
    std::vector<T> rot;    // local rotations [n*J*9]
    std::vector<T> world;  // world rotations [n*J*9]
  };
  auto sv = std::make_shared<Saved>();
  sv->qn.resize(std::size_t(n) * J * 4);
  sv->inv_s.resize(std::size_t(n) * J);
  sv->rot.resize(std::size_t(n) * J * 9);
  sv->world.resize(std::size_t(n) * J * 9);

  TensorT<T> out = TensorT<T>::zeros({n, 3 * J});
  for (int i = 0; i < n; ++i) {
    const T* row = x.data.data() + std::size_t(i) * width;
    T* prow = out.data.data() + std::size_t(i) * 3 * J;
    for (int j = 0; j < J; ++j) {
      const T* q = row + 3 + 4 * j;
      const T s2 = q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3];
      const T inv_s = T(1) / std::sqrt(s2 + qeps);
      sv->inv_s[std::size_t(i) * J + j] = inv_s;
      T* qn = sv->qn.data() + (std::size_t(i) * J + j) * 4;
      for (int k = 0; k < 4; ++k) qn[k] = q[k] * inv_s;
      T* r = sv->rot.data() + (std::size_t(i) * J + j) * 9;
      quat_to_matrix_unit(qn[0], qn[1], qn[2], qn[3], r);
      T* w = sv->world.data() + (std::size_t(i) * J + j) * 9;
      const int p = skel.joints[j].parent;
      if (p < 0) {
        for (int k = 0; k < 9; ++k) w[k] = r[k];
        prow[0] = row[0];
        prow[1] = row[1];
        prow[2] = row[2];
      } else {
        const T* wp = sv->world.data() + (std::size_t(i) * J + p) * 9;
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) {
            T acc = T(0);
            for (int k = 0; k < 3; ++k) acc += wp[a * 3 + k] * r[k * 3 + b];
            w[a * 3 + b] = acc;
          }
        const Vec3& off = skel.joints[j].offset;
        const T ox = T(off[0]), oy = T(off[1]), oz = T(off[2]);
        for (int a = 0; a < 3; ++a)
          prow[3 * j + a] = prow[3 * p + a] + wp[a * 3 + 0] * ox +
                            wp[a * 3 + 1] * oy + wp[a * 3 + 2] * oz;
      }
    }
  }

  Skeleton skel_copy = skel;
  return tape.make_node(
      std::move(out), {flat},
      [flat, skel_copy, sv, n, J, width](TapeT<T>& t, Var self) {
        const TensorT<T>& g = t.grad_acc(self);
        TensorT<T>& gx = t.grad_acc(flat);
        std::vector<T> dP(std::size_t(J) * 3);
        std::vector<T> dW(std::size_t(J) * 9);
        for (int i = 0; i < n; ++i) {
          const T* grow = g.data.data() + std::size_t(i) * 3 * J;
          T* gxrow = gx.data.data() + std::size_t(i) * width;
          for (int j = 0; j < 3 * J; ++j) dP[j] = grow[j];
          std::fill(dW.begin(), dW.end(), T(0));
          // children have larger indices, so one reverse sweep suffices
          for (int j = J - 1; j >= 0; --j) {
            const int p = skel_copy.joints[j].parent;
            const T* r = sv->rot.data() + (std::size_t(i) * J + j) * 9;
            T dR[9];
            if (p >= 0) {
              const Vec3& off = skel_copy.joints[j].offset;
              const T o[3] = {T(off[0]), T(off[1]), T(off[2])};
              // position: P_j = P_p + W_p o_j
              for (int a = 0; a < 3; ++a) {
                dP[3 * p + a] += dP[3 * j + a];
                for (int b = 0; b < 3; ++b)
                  dW[std::size_t(p) * 9 + a * 3 + b] += dP[3 * j + a] * o[b];
              }
              // orientation: W_j = W_p R_j
              const T* dWj = dW.data() + std::size_t(j) * 9;
              T* dWp = dW.data() + std::size_t(p) * 9;
              for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) {
                  T acc = T(0);
                  for (int k = 0; k < 3; ++k) acc += dWj[a * 3 + k] * r[b * 3 + k];
                  dWp[a * 3 + b] += acc;
                }
              const T* wp = sv->world.data() + (std::size_t(i) * J + p) * 9;
              for (int a = 0; a < 3; ++a)
                for (int b = 0; b < 3; ++b) {
                  T acc = T(0);
                  for (int k = 0; k < 3; ++k) acc += wp[k * 3 + a] * dWj[k * 3 + b];
                  dR[a * 3 + b] = acc;
                }
            } else {
              // root: translation feeds straight through, W_0 = R_0
              for (int a = 0; a < 3; ++a) gxrow[a] += dP[a];
              const T* dWj = dW.data() + std::size_t(j) * 9;
              for (int k = 0; k < 9; ++k) dR[k] = dWj[k];
            }
            // rotation matrix -> normalized quaternion
            const T* qn = sv->qn.data() + (std::size_t(i) * J + j) * 4;
            const T w = qn[0], qx = qn[1], qy = qn[2], qz = qn[3];
            T dqn[4];
            dqn[0] = T(2) * (-qz * dR[1] + qy * dR[2] + qz * dR[3] -
                             qx * dR[5] - qy * dR[6] + qx * dR[7]);
            dqn[1] = T(2) * (qy * dR[1] + qz * dR[2] + qy * dR[3] -
                             T(2) * qx * dR[4] - w * dR[5] + qz * dR[6] +
                             w * dR[7] - T(2) * qx * dR[8]);
            dqn[2] = T(2) * (-T(2) * qy * dR[0] + qx * dR[1] + w * dR[2] +
                             qx * dR[3] + qz * dR[5] - w * dR[6] +
                             qz * dR[7] - T(2) * qy * dR[8]);
            dqn[3] = T(2) * (-T(2) * qz * dR[0] - w * dR[1] + qx * dR[2] +
                             w * dR[3] - T(2) * qz * dR[4] + qy * dR[5] +
                             qx * dR[6] + qy * dR[7]);
            // normalized quaternion -> raw quaternion:
            // dq = (dq_hat - q_hat (q_hat . dq_hat)) / s
            const T inv_s = sv->inv_s[std::size_t(i) * J + j];
            T dot = T(0);
            for (int k = 0; k < 4; ++k) dot += dqn[k] * qn[k];
            for (int k = 0; k < 4; ++k)
              gxrow[3 + 4 * j + k] += inv_s * (dqn[k] - qn[k] * dot);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Foot contacts
// ---------------------------------------------------------------------------

struct FootContactMask {
  std::vector<int> joints;                 // skeleton foot joint ids
  std::vector<std::vector<char>> contact;  // [frames-1][joints.size()]
};

/// A foot is in contact over transition i -> i+1 when it moves less than
/// vel_thresh (meters per frame) and sits below height_thresh at frame i.
inline FootContactMask foot_contact_mask(const Skeleton& skel, const Motion& m,
                                         double vel_thresh = 0.01,
                                         double height_thresh = 0.05) {
  FootContactMask mask;
  mask.joints = skel.foot_joints;
  const int n = m.frames();
  if (n < 2) return mask;
  const auto pos = fk_motion(skel, m);
  mask.contact.assign(n - 1, std::vector<char>(mask.joints.size(), 0));
  for (int i = 0; i + 1 < n; ++i) {
    for (std::size_t f = 0; f < mask.joints.size(); ++f) {
      const int j = mask.joints[f];
      const double vel = vnorm(vsub(pos[i + 1][j], pos[i][j]));
      const double height = pos[i][j][1];
      mask.contact[i][f] = (vel < vel_thresh && height < height_thresh) ? 1 : 0;
    }
  }
  return mask;
}

}  // namespace fgmdm
