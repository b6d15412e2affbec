#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "tricalib/geometry.hpp"
#include "tricalib/nls.hpp"
#include "tricalib/types.hpp"

namespace tricalib {

struct ImuSample {
  double t = 0.0;   // seconds
  Vec3 gyro = Vec3::Zero();   // rad/s
  Vec3 accel = Vec3::Zero();  // m/s^2 (specific force)
};

struct ImuBias {
  Vec3 gyro = Vec3::Zero();
  Vec3 accel = Vec3::Zero();
};

/// Continuous-time noise densities (per sqrt(Hz)) plus bias random walks.
struct ImuNoise {
  double gyro_density = 1.7453292519943296e-4;   // rad/s/sqrt(Hz)
  double accel_density = 5.886e-4;               // m/s^2/sqrt(Hz)
  double gyro_bias_walk = 1e-5;                  // rad/s/sqrt(s)
  double accel_bias_walk = 5e-5;                 // m/s^2/sqrt(s)
};

/// Body-to-world state at a keyframe.
struct NavState {
  Pose pose;              // T_B^W
  Vec3 velocity = Vec3::Zero();  // world frame
  ImuBias bias;
};

/// Preintegrated relative motion between two timestamps, expressed in the
/// body frame at the interval start and independent of gravity (gravity is
/// reintroduced by the residual). Error-state ordering:
/// [dp, dtheta, dv, dbg, dba].
struct PreintegratedDelta {
  Quat dq = Quat::Identity();
  Vec3 dv = Vec3::Zero();
  Vec3 dp = Vec3::Zero();
  double dt = 0.0;
  ImuBias bias;  // linearization point
  Eigen::Matrix<double, 15, 15> covariance =
      Eigen::Matrix<double, 15, 15>::Zero();
  // Jacobians of the deltas w.r.t. the linearization bias.
  Mat3 dp_dbg = Mat3::Zero(), dp_dba = Mat3::Zero();
  Mat3 dq_dbg = Mat3::Zero();
  Mat3 dv_dbg = Mat3::Zero(), dv_dba = Mat3::Zero();
};

/// Midpoint preintegration of a sample stream at a fixed bias estimate.
/// Requires at least two samples with strictly increasing timestamps; the
/// delta spans [samples.front().t, samples.back().t].
inline PreintegratedDelta preintegrate(const std::vector<ImuSample>& samples,
                                       const ImuBias& bias,
                                       const ImuNoise& noise) {
  if (samples.size() < 2)
    throw Error("NonMonotonicTime", "preintegration needs at least 2 samples");
  PreintegratedDelta d;
  d.bias = bias;

  Eigen::Matrix<double, 15, 15> J = Eigen::Matrix<double, 15, 15>::Identity();
  Eigen::Matrix<double, 15, 15>& P = d.covariance;

  for (size_t k = 0; k + 1 < samples.size(); ++k) {
    const ImuSample& s0 = samples[k];
    const ImuSample& s1 = samples[k + 1];
    const double dt = s1.t - s0.t;
    if (dt <= 0.0)
      throw Error("NonMonotonicTime",
                  "timestamps not strictly increasing at sample " +
                      std::to_string(k + 1));
    const double dt2 = dt * dt;

    const Vec3 w = 0.5 * (s0.gyro + s1.gyro) - bias.gyro;
    const Vec3 a0 = s0.accel - bias.accel;
    const Vec3 a1 = s1.accel - bias.accel;

    const Mat3 Rk = d.dq.toRotationMatrix();
    const Quat dq_step = so3_exp(w * dt);
    const Quat q_next = quat_canonical(d.dq * dq_step);
    const Mat3 Rk1 = q_next.toRotationMatrix();
    const Vec3 a_mid = 0.5 * (Rk * a0 + Rk1 * a1);

    const Mat3 a0x = skew(a0);
    const Mat3 a1x = skew(a1);
    const Mat3 step_rot_t = dq_step.toRotationMatrix().transpose();
    const Mat3 Jr_step = so3_right_jacobian(w * dt);

    // Error-state transition.
    Eigen::Matrix<double, 15, 15> F = Eigen::Matrix<double, 15, 15>::Identity();
    F.block<3, 3>(0, 3) =
        -0.25 * dt2 * (Rk * a0x + Rk1 * a1x * step_rot_t);
    F.block<3, 3>(0, 6) = Mat3::Identity() * dt;
    F.block<3, 3>(0, 9) = 0.25 * dt2 * dt * (Rk1 * a1x * Jr_step);
    F.block<3, 3>(0, 12) = -0.25 * dt2 * (Rk + Rk1);
    F.block<3, 3>(3, 3) = step_rot_t;
    F.block<3, 3>(3, 9) = -Jr_step * dt;
    F.block<3, 3>(6, 3) = -0.5 * dt * (Rk * a0x + Rk1 * a1x * step_rot_t);
    F.block<3, 3>(6, 9) = 0.5 * dt * dt * (Rk1 * a1x * Jr_step);
    F.block<3, 3>(6, 12) = -0.5 * dt * (Rk + Rk1);

    // Noise input: [na0, nw0, na1, nw1, nbg, nba], each with discrete
    // covariance density^2/dt.
    Eigen::Matrix<double, 15, 18> V = Eigen::Matrix<double, 15, 18>::Zero();
    const Mat3 dtheta_dw = 0.5 * Jr_step * dt;  // per gyro-noise half
    V.block<3, 3>(0, 0) = 0.25 * Rk * dt2;
    V.block<3, 3>(0, 3) = -0.25 * Rk1 * a1x * dt2 * dtheta_dw;
    V.block<3, 3>(0, 6) = 0.25 * Rk1 * dt2;
    V.block<3, 3>(0, 9) = V.block<3, 3>(0, 3);
    V.block<3, 3>(3, 3) = dtheta_dw;
    V.block<3, 3>(3, 9) = dtheta_dw;
    V.block<3, 3>(6, 0) = 0.5 * Rk * dt;
    V.block<3, 3>(6, 3) = -0.5 * Rk1 * a1x * dt * dtheta_dw;
    V.block<3, 3>(6, 6) = 0.5 * Rk1 * dt;
    V.block<3, 3>(6, 9) = V.block<3, 3>(6, 3);
    V.block<3, 3>(9, 12) = Mat3::Identity() * dt;
    V.block<3, 3>(12, 15) = Mat3::Identity() * dt;

    Eigen::Matrix<double, 18, 1> q_diag;
    const double sg2 = noise.gyro_density * noise.gyro_density / dt;
    const double sa2 = noise.accel_density * noise.accel_density / dt;
    const double sbg2 = noise.gyro_bias_walk * noise.gyro_bias_walk / dt;
    const double sba2 = noise.accel_bias_walk * noise.accel_bias_walk / dt;
    q_diag << sa2, sa2, sa2, sg2, sg2, sg2, sa2, sa2, sa2, sg2, sg2, sg2,
        sbg2, sbg2, sbg2, sba2, sba2, sba2;

    P = F * P * F.transpose() + V * q_diag.asDiagonal() * V.transpose();
    P = 0.5 * (P + P.transpose()).eval();
    J = (F * J).eval();

    d.dp += d.dv * dt + 0.5 * a_mid * dt2;
    d.dv += a_mid * dt;
    d.dq = q_next;
    d.dt += dt;
  }

  d.dp_dbg = J.block<3, 3>(0, 9);
  d.dp_dba = J.block<3, 3>(0, 12);
  d.dq_dbg = J.block<3, 3>(3, 9);
  d.dv_dbg = J.block<3, 3>(6, 9);
  d.dv_dba = J.block<3, 3>(6, 12);
  return d;
}

/// First-order update of a preintegrated delta to a new bias estimate.
/// Covariance and Jacobians keep the original linearization.
inline PreintegratedDelta correct_delta(const PreintegratedDelta& d,
                                        const ImuBias& new_bias) {
  const Vec3 dbg = new_bias.gyro - d.bias.gyro;
  const Vec3 dba = new_bias.accel - d.bias.accel;
  PreintegratedDelta out = d;
  out.dp = d.dp + d.dp_dbg * dbg + d.dp_dba * dba;
  out.dv = d.dv + d.dv_dbg * dbg + d.dv_dba * dba;
  out.dq = quat_canonical(d.dq * so3_exp(d.dq_dbg * dbg));
  return out;
}

/// Square root of the inverse covariance, with a small diagonal jitter so
/// degenerate (noise-free or zero-duration) deltas stay usable.
inline Eigen::Matrix<double, 15, 15> delta_sqrt_info(
    const PreintegratedDelta& d) {
  Eigen::Matrix<double, 15, 15> P = d.covariance;
  const double jitter =
      std::max(1e-24, 1e-12 * P.diagonal().maxCoeff());
  P.diagonal().array() += jitter;
  const Eigen::LLT<Eigen::Matrix<double, 15, 15>> llt(P);
  Eigen::Matrix<double, 15, 15> L_inv =
      llt.matrixL().solve(Eigen::Matrix<double, 15, 15>::Identity());
  return L_inv;
}

/// 15-D preintegration residual [dp, dq, dv, dbg, dba], whitened by the
/// delta covariance. Zero when (state_i, state_j) are exactly consistent
/// with a noiseless delta under `gravity`.
inline Eigen::Matrix<double, 15, 1> imu_residual(
    const NavState& xi, const NavState& xj, const PreintegratedDelta& delta,
    const Vec3& gravity) {
  const PreintegratedDelta d = correct_delta(delta, xi.bias);
  const Mat3 Ri_t = xi.pose.rotation().transpose();
  const double dt = delta.dt;

  Eigen::Matrix<double, 15, 1> r;
  r.segment<3>(0) = Ri_t * (xj.pose.t - xi.pose.t - xi.velocity * dt -
                            0.5 * gravity * dt * dt) -
                    d.dp;
  r.segment<3>(3) =
      so3_log(d.dq.conjugate() * xi.pose.q.conjugate() * xj.pose.q);
  r.segment<3>(6) = Ri_t * (xj.velocity - xi.velocity - gravity * dt) - d.dv;
  r.segment<3>(9) = xj.bias.gyro - xi.bias.gyro;
  r.segment<3>(12) = xj.bias.accel - xi.bias.accel;
  return delta_sqrt_info(delta) * r;
}

/// Solver factor over blocks [pose_i, vel_i, bias_i, pose_j, vel_j, bias_j].
/// Bias blocks are 6-vectors [bg, ba].
inline ResidualBlock make_imu_factor(int pose_i, int vel_i, int bias_i,
                                     int pose_j, int vel_j, int bias_j,
                                     const PreintegratedDelta& delta,
                                     const Vec3& gravity) {
  ResidualBlock rb;
  rb.dim = 15;
  rb.blocks = {pose_i, vel_i, bias_i, pose_j, vel_j, bias_j};
  const Eigen::Matrix<double, 15, 15> sqrt_info = delta_sqrt_info(delta);
  rb.eval = [delta, gravity, sqrt_info](
                const std::vector<const VecX*>& x, VecX& r,
                std::vector<MatX>* jac) {
    const Quat qi((*x[0])[0], (*x[0])[1], (*x[0])[2], (*x[0])[3]);
    const Vec3 pi = x[0]->tail<3>();
    const Vec3 vi = *x[1];
    const Vec3 bgi = x[2]->head<3>();
    const Vec3 bai = x[2]->tail<3>();
    const Quat qj((*x[3])[0], (*x[3])[1], (*x[3])[2], (*x[3])[3]);
    const Vec3 pj = x[3]->tail<3>();
    const Vec3 vj = *x[4];
    const Vec3 bgj = x[5]->head<3>();
    const Vec3 baj = x[5]->tail<3>();

    const double dt = delta.dt;
    const Vec3 dbg = bgi - delta.bias.gyro;
    const Vec3 dba = bai - delta.bias.accel;
    const Vec3 dp = delta.dp + delta.dp_dbg * dbg + delta.dp_dba * dba;
    const Vec3 dv = delta.dv + delta.dv_dbg * dbg + delta.dv_dba * dba;
    const Vec3 theta_b = delta.dq_dbg * dbg;
    const Quat dq = delta.dq * so3_exp(theta_b);

    const Mat3 Ri = qi.toRotationMatrix();
    const Mat3 Ri_t = Ri.transpose();
    const Vec3 up = pj - pi - vi * dt - 0.5 * gravity * dt * dt;
    const Vec3 uv = vj - vi - gravity * dt;
    const Vec3 phi = so3_log(dq.conjugate() * qi.conjugate() * qj);

    Eigen::Matrix<double, 15, 1> res;
    res.segment<3>(0) = Ri_t * up - dp;
    res.segment<3>(3) = phi;
    res.segment<3>(6) = Ri_t * uv - dv;
    res.segment<3>(9) = bgj - bgi;
    res.segment<3>(12) = baj - bai;
    r = sqrt_info * res;

    if (jac) {
      const Mat3 Jr_inv = so3_right_jacobian_inv(phi);
      const Mat3 Jl_inv = so3_right_jacobian_inv(-phi);
      const Mat3 Rj = qj.toRotationMatrix();

      MatX Jpi = MatX::Zero(15, 6);  // pose_i: [dtheta, dt]
      Jpi.block<3, 3>(0, 0) = skew(Ri_t * up);
      Jpi.block<3, 3>(0, 3) = -Ri_t;
      Jpi.block<3, 3>(3, 0) = -Jr_inv * Rj.transpose() * Ri;
      Jpi.block<3, 3>(6, 0) = skew(Ri_t * uv);

      MatX Jvi = MatX::Zero(15, 3);
      Jvi.block<3, 3>(0, 0) = -Ri_t * dt;
      Jvi.block<3, 3>(6, 0) = -Ri_t;

      MatX Jbi = MatX::Zero(15, 6);
      Jbi.block<3, 3>(0, 0) = -delta.dp_dbg;
      Jbi.block<3, 3>(0, 3) = -delta.dp_dba;
      Jbi.block<3, 3>(3, 0) =
          -Jl_inv * so3_right_jacobian(theta_b) * delta.dq_dbg;
      Jbi.block<3, 3>(6, 0) = -delta.dv_dbg;
      Jbi.block<3, 3>(6, 3) = -delta.dv_dba;
      Jbi.block<3, 3>(9, 0) = -Mat3::Identity();
      Jbi.block<3, 3>(12, 3) = -Mat3::Identity();

      MatX Jpj = MatX::Zero(15, 6);
      Jpj.block<3, 3>(0, 3) = Ri_t;
      Jpj.block<3, 3>(3, 0) = Jr_inv;

      MatX Jvj = MatX::Zero(15, 3);
      Jvj.block<3, 3>(6, 0) = Ri_t;

      MatX Jbj = MatX::Zero(15, 6);
      Jbj.block<3, 3>(9, 0) = Mat3::Identity();
      Jbj.block<3, 3>(12, 3) = Mat3::Identity();

      (*jac)[0] = sqrt_info * Jpi;
      (*jac)[1] = sqrt_info * Jvi;
      (*jac)[2] = sqrt_info * Jbi;
      (*jac)[3] = sqrt_info * Jpj;
      (*jac)[4] = sqrt_info * Jvj;
      (*jac)[5] = sqrt_info * Jbj;
    }
  };
  return rb;
}

struct StaticInit {
  Vec3 gravity = Vec3::Zero();   // expressed in the body frame at t0
  Vec3 velocity = Vec3::Zero();
  Vec3 gyro_bias = Vec3::Zero();
  Vec3 accel_mean = Vec3::Zero();
};

/// Gravity/velocity bootstrap over an initial static window. The returned
/// gravity has magnitude 9.81 and points opposite the mean specific force.
inline StaticInit init_gravity_velocity(const std::vector<ImuSample>& samples,
                                        double static_window,
                                        double gyro_norm_thresh = 0.05,
                                        double accel_std_thresh = 0.2) {
  if (samples.empty())
    throw Error("NotStatic", "empty IMU stream");
  const double t_end = samples.front().t + static_window;
  Vec3 gyro_sum = Vec3::Zero(), accel_sum = Vec3::Zero();
  int n = 0;
  for (const auto& s : samples) {
    if (s.t > t_end + 1e-9) break;
    gyro_sum += s.gyro;
    accel_sum += s.accel;
    ++n;
  }
  if (n < 10)
    throw Error("NotStatic", "static window holds fewer than 10 samples");
  const Vec3 gyro_mean = gyro_sum / n;
  const Vec3 accel_mean = accel_sum / n;
  if (gyro_mean.norm() > gyro_norm_thresh)
    throw Error("NotStatic", "mean gyro rate " +
                                 std::to_string(gyro_mean.norm()) +
                                 " rad/s exceeds threshold");
  double var = 0.0;
  int m = 0;
  for (const auto& s : samples) {
    if (s.t > t_end + 1e-9) break;
    var += (s.accel - accel_mean).squaredNorm();
    ++m;
  }
  const double accel_std = std::sqrt(var / m / 3.0);
  if (accel_std > accel_std_thresh)
    throw Error("NotStatic", "accel std " + std::to_string(accel_std) +
                                 " m/s^2 exceeds threshold");

  StaticInit init;
  init.gravity = -kGravityMagnitude * accel_mean.normalized();
  init.velocity = Vec3::Zero();
  init.gyro_bias = gyro_mean;
  init.accel_mean = accel_mean;
  return init;
}

/// Body orientation that maps the static-window gravity estimate onto the
/// world gravity direction (0,0,-1); the free yaw is fixed by the minimal
/// rotation.
inline Quat gravity_aligned_orientation(const Vec3& gravity_body) {
  return quat_canonical(
      Quat::FromTwoVectors(gravity_body.normalized(), Vec3(0, 0, -1)));
}

/// Midpoint dead-reckoning through a sample span (world-frame kinematics).
inline NavState imu_propagate(const NavState& state,
                              const std::vector<ImuSample>& samples,
                              const Vec3& gravity) {
  NavState x = state;
  for (size_t k = 0; k + 1 < samples.size(); ++k) {
    const double dt = samples[k + 1].t - samples[k].t;
    const Vec3 w = 0.5 * (samples[k].gyro + samples[k + 1].gyro) - x.bias.gyro;
    const Quat q_next = quat_canonical(x.pose.q * so3_exp(w * dt));
    const Vec3 a0 = x.pose.q * (samples[k].accel - x.bias.accel) + gravity;
    const Vec3 a1 = q_next * (samples[k + 1].accel - x.bias.accel) + gravity;
    const Vec3 am = 0.5 * (a0 + a1);
    x.pose.t += x.velocity * dt + 0.5 * am * dt * dt;
    x.velocity += am * dt;
    x.pose.q = q_next;
  }
  return x;
}

/// Samples with t in [t0, t1] (inclusive, 1e-9 slack).
inline std::vector<ImuSample> slice_samples(const std::vector<ImuSample>& s,
                                            double t0, double t1) {
  std::vector<ImuSample> out;
  for (const auto& x : s)
    if (x.t >= t0 - 1e-9 && x.t <= t1 + 1e-9) out.push_back(x);
  return out;
}

}  // namespace tricalib
