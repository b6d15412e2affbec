#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>
#include <array>
#include <cmath>

#include "tricalib/types.hpp"

namespace tricalib {

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

/// Canonical storage form: unit norm, w >= 0 (resolves the double cover).
inline Quat quat_canonical(const Quat& q) {
  Quat out = q.normalized();
  if (out.w() < 0.0) out.coeffs() = -out.coeffs();
  return out;
}

/// Exponential map: rotation vector (axis * angle, rad) to quaternion.
inline Quat so3_exp(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const double theta = std::sqrt(theta2);
  double w, s;  // s scales v into the vector part
  if (theta < 1e-8) {
    w = 1.0 - theta2 / 8.0;
    s = 0.5 - theta2 / 48.0;
  } else {
    w = std::cos(0.5 * theta);
    s = std::sin(0.5 * theta) / theta;
  }
  return Quat(w, s * v.x(), s * v.y(), s * v.z());
}

/// Logarithm map: principal rotation vector, |result| <= pi.
inline Vec3 so3_log(const Quat& q_in) {
  Quat q = quat_canonical(q_in);
  const Vec3 xyz(q.x(), q.y(), q.z());
  const double n = xyz.norm();
  if (n < 1e-12) return 2.0 * xyz;
  const double theta = 2.0 * std::atan2(n, q.w());
  return (theta / n) * xyz;
}

/// Right Jacobian of the SO(3) exponential: Exp(v + dv) ~ Exp(v) Exp(Jr(v) dv).
inline Mat3 so3_right_jacobian(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const Mat3 vx = skew(v);
  if (theta2 < 1e-12) {
    return Mat3::Identity() - 0.5 * vx + vx * vx / 6.0;
  }
  const double theta = std::sqrt(theta2);
  return Mat3::Identity() - (1.0 - std::cos(theta)) / theta2 * vx +
         (theta - std::sin(theta)) / (theta2 * theta) * vx * vx;
}

inline Mat3 so3_right_jacobian_inv(const Vec3& v) {
  const double theta2 = v.squaredNorm();
  const Mat3 vx = skew(v);
  if (theta2 < 1e-12) {
    return Mat3::Identity() + 0.5 * vx + vx * vx / 12.0;
  }
  const double theta = std::sqrt(theta2);
  const double c = 1.0 / theta2 -
                   (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() + 0.5 * vx + c * vx * vx;
}

/// Rigid transform with the frame convention p^Y = R p^X + t for T_X^Y.
struct Pose {
  Quat q = Quat::Identity();
  Vec3 t = Vec3::Zero();

  Pose() = default;
  Pose(const Quat& q_in, const Vec3& t_in) : q(quat_canonical(q_in)), t(t_in) {}

  static Pose identity() { return Pose(); }

  Mat3 rotation() const { return q.toRotationMatrix(); }

  Pose inverse() const {
    const Quat qi = q.conjugate();
    return Pose(qi, -(qi * t));
  }

  /// compose: this = T_Y^Z, rhs = T_X^Y, result = T_X^Z.
  Pose operator*(const Pose& rhs) const {
    return Pose(q * rhs.q, q * rhs.t + t);
  }

  Vec3 operator*(const Vec3& p) const { return q * p + t; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = rotation();
    m.topRightCorner<3, 1>() = t;
    return m;
  }

  /// Serialization order used by every file format: [qw,qx,qy,qz,tx,ty,tz].
  std::array<double, 7> to_array() const {
    return {q.w(), q.x(), q.y(), q.z(), t.x(), t.y(), t.z()};
  }
  static Pose from_array(const std::array<double, 7>& a) {
    return Pose(Quat(a[0], a[1], a[2], a[3]), Vec3(a[4], a[5], a[6]));
  }
};

inline Pose pose_compose(const Pose& a, const Pose& b) { return a * b; }
inline Pose pose_inverse(const Pose& p) { return p.inverse(); }
inline Vec3 transform_point(const Pose& T, const Vec3& p) { return T * p; }

/// Fixed-axis XYZ Euler angles: R = Rz(rz) * Ry(ry) * Rx(rx)
/// (rotations about the fixed x, y, z axes applied in that order).
struct EulerXyz {
  double rx = 0.0, ry = 0.0, rz = 0.0;

  EulerXyz() = default;
  EulerXyz(double x, double y, double z) : rx(x), ry(y), rz(z) {}

  Vec3 vec() const { return Vec3(rx, ry, rz); }
};

inline Quat quat_from_euler_xyz(const EulerXyz& e) {
  return quat_canonical(Quat(Eigen::AngleAxisd(e.rz, Vec3::UnitZ()) *
                             Eigen::AngleAxisd(e.ry, Vec3::UnitY()) *
                             Eigen::AngleAxisd(e.rx, Vec3::UnitX())));
}

/// Inverse of quat_from_euler_xyz; unique for |ry| < pi/2.
inline EulerXyz euler_xyz_from_quat(const Quat& q) {
  const Mat3 r = q.toRotationMatrix();
  EulerXyz e;
  e.ry = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  e.rx = std::atan2(r(2, 1), r(2, 2));
  e.rz = std::atan2(r(1, 0), r(0, 0));
  return e;
}

inline Pose pose_from_euler(const EulerXyz& e, const Vec3& t) {
  return Pose(quat_from_euler_xyz(e), t);
}

/// Interpolate between two poses (lerp translation, slerp rotation), u in [0,1].
inline Pose pose_interpolate(const Pose& a, const Pose& b, double u) {
  return Pose(a.q.slerp(u, b.q), (1.0 - u) * a.t + u * b.t);
}

}  // namespace tricalib
