#include "tricalib/geometry.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace tricalib;

namespace {

std::mt19937 rng(42);

Vec3 random_vec(double scale) {
  std::uniform_real_distribution<double> u(-scale, scale);
  return Vec3(u(rng), u(rng), u(rng));
}

Quat random_rotation() {
  Vec3 v = random_vec(1.0);
  if (v.norm() < 1e-6) v = Vec3(0.1, 0.2, 0.3);
  std::uniform_real_distribution<double> u(0.0, 3.0);
  return so3_exp(v.normalized() * u(rng));
}

Pose random_pose() { return Pose(random_rotation(), random_vec(2.0)); }

}  // namespace

TEST(So3, ExpIdentity) {
  const Quat q = so3_exp(Vec3::Zero());
  EXPECT_DOUBLE_EQ(q.w(), 1.0);
  EXPECT_DOUBLE_EQ(q.x(), 0.0);
}

TEST(So3, ExpQuarterTurn) {
  const Quat q = so3_exp(Vec3(0, 0, M_PI / 2));
  const Vec3 rotated = q * Vec3(1, 0, 0);
  EXPECT_NEAR(rotated.x(), 0.0, 1e-12);
  EXPECT_NEAR(rotated.y(), 1.0, 1e-12);
  EXPECT_NEAR(rotated.z(), 0.0, 1e-12);
}

TEST(So3, ExpLogRoundTripAgainstMatrixOracle) {
  for (int i = 0; i < 200; ++i) {
    Vec3 v = random_vec(1.0);
    if (v.norm() >= M_PI) v *= 0.9 * M_PI / v.norm();
    const Quat q = so3_exp(v);
    EXPECT_LT((so3_log(q) - v).norm(), 1e-10);
    // Rotation-matrix oracle: axis-angle through Eigen.
    Mat3 oracle = Mat3::Identity();
    if (v.norm() > 0)
      oracle = Eigen::AngleAxisd(v.norm(), v.normalized()).toRotationMatrix();
    EXPECT_LT((q.toRotationMatrix() - oracle).norm(), 1e-12);
  }
}

TEST(So3, LogTrivialCases) {
  EXPECT_LT(so3_log(Quat::Identity()).norm(), 1e-15);
  const Vec3 l = so3_log(so3_exp(Vec3(0, 0, M_PI / 2)));
  EXPECT_NEAR(l.z(), M_PI / 2, 1e-12);
  // Double cover: q and -q give the same principal log.
  const Quat q = random_rotation();
  Quat qn = q;
  qn.coeffs() = -qn.coeffs();
  EXPECT_LT((so3_log(q) - so3_log(qn)).norm(), 1e-12);
}

TEST(So3, RightJacobianMatchesFiniteDifference) {
  for (int i = 0; i < 20; ++i) {
    const Vec3 v = random_vec(1.5);
    const Mat3 Jr = so3_right_jacobian(v);
    const double eps = 1e-6;
    for (int k = 0; k < 3; ++k) {
      Vec3 dv = Vec3::Zero();
      dv[k] = eps;
      const Vec3 num =
          so3_log(so3_exp(v).conjugate() * so3_exp(v + dv)) / eps;
      EXPECT_LT((num - Jr.col(k)).norm(), 1e-6);
    }
    EXPECT_LT((so3_right_jacobian_inv(v) * Jr - Mat3::Identity()).norm(),
              1e-10);
  }
}

TEST(Pose, ComposeTrivial) {
  const Pose T = random_pose();
  const Pose id;
  EXPECT_LT((pose_compose(id, T).matrix() - T.matrix()).norm(), 1e-14);
  const Pose round = pose_compose(T, pose_inverse(T));
  EXPECT_LT((round.matrix() - Mat4::Identity()).norm(), 1e-12);
}

TEST(Pose, ComposeAgainstHomogeneousMatrixOracle) {
  // True extrinsics used by the default simulation scene.
  const Pose T_I_C = pose_from_euler(EulerXyz(-0.16, -0.16, -0.04),
                                     Vec3(0.1, 0.0, 0.0));
  const Pose T_I_L = pose_from_euler(EulerXyz(0.16, 0.16, 0.16),
                                     Vec3(0.1, 0.0, -0.08));
  const Pose T_L_C = pose_compose(T_I_C, pose_inverse(T_I_L));
  const Mat4 oracle = T_I_C.matrix() * T_I_L.matrix().inverse();
  EXPECT_LT((T_L_C.matrix() - oracle).norm(), 1e-12);
}

TEST(Pose, ComposeAssociative) {
  for (int i = 0; i < 50; ++i) {
    const Pose a = random_pose(), b = random_pose(), c = random_pose();
    const Mat4 lhs = pose_compose(pose_compose(a, b), c).matrix();
    const Mat4 rhs = pose_compose(a, pose_compose(b, c)).matrix();
    EXPECT_LT((lhs - rhs).norm(), 1e-10);
  }
}

TEST(Pose, TransformPoint) {
  EXPECT_LT((transform_point(Pose(), Vec3(1, 2, 3)) - Vec3(1, 2, 3)).norm(),
            1e-15);
  const Pose trans(Quat::Identity(), Vec3(1, 2, 3));
  EXPECT_LT((transform_point(trans, Vec3::Zero()) - Vec3(1, 2, 3)).norm(),
            1e-15);
  const Pose T(so3_exp(Vec3(0, 0, M_PI / 2)), Vec3(1, 0, 0));
  EXPECT_LT((transform_point(T, Vec3(1, 0, 0)) - Vec3(1, 1, 0)).norm(), 1e-12);
}

TEST(Pose, TransformComposeConsistency) {
  for (int i = 0; i < 50; ++i) {
    const Pose a = random_pose(), b = random_pose();
    const Vec3 p = random_vec(3.0);
    const Vec3 lhs = transform_point(pose_compose(a, b), p);
    const Vec3 rhs = transform_point(a, transform_point(b, p));
    EXPECT_LT((lhs - rhs).norm(), 1e-10);
  }
}

TEST(Pose, QuaternionCanonicalForm) {
  for (int i = 0; i < 50; ++i) {
    Pose p = random_pose();
    EXPECT_GE(p.q.w(), 0.0);
    EXPECT_NEAR(p.q.norm(), 1.0, 1e-12);
  }
}

TEST(EulerXyz, RoundTrip) {
  std::uniform_real_distribution<double> u(-M_PI / 2 * 0.98, M_PI / 2 * 0.98);
  for (int i = 0; i < 200; ++i) {
    const EulerXyz e(u(rng), u(rng), u(rng));
    const EulerXyz back = euler_xyz_from_quat(quat_from_euler_xyz(e));
    EXPECT_NEAR(back.rx, e.rx, 1e-10);
    EXPECT_NEAR(back.ry, e.ry, 1e-10);
    EXPECT_NEAR(back.rz, e.rz, 1e-10);
  }
}

TEST(EulerXyz, FixedAxisOrderMatchesMatrixProduct) {
  const EulerXyz e(0.3, -0.2, 0.5);
  const Mat3 oracle =
      (Eigen::AngleAxisd(e.rz, Vec3::UnitZ()) *
       Eigen::AngleAxisd(e.ry, Vec3::UnitY()) *
       Eigen::AngleAxisd(e.rx, Vec3::UnitX()))
          .toRotationMatrix();
  EXPECT_LT((quat_from_euler_xyz(e).toRotationMatrix() - oracle).norm(),
            1e-14);
}

TEST(Pose, SerializationOrder) {
  const Pose p = random_pose();
  const auto a = p.to_array();
  const Pose back = Pose::from_array(a);
  EXPECT_LT((back.matrix() - p.matrix()).norm(), 1e-14);
  EXPECT_DOUBLE_EQ(a[0], p.q.w());
  EXPECT_DOUBLE_EQ(a[4], p.t.x());
}

TEST(Pose, Interpolation) {
  const Pose a, b(so3_exp(Vec3(0, 0, 1.0)), Vec3(2, 0, 0));
  const Pose mid = pose_interpolate(a, b, 0.5);
  EXPECT_LT((so3_log(mid.q) - Vec3(0, 0, 0.5)).norm(), 1e-12);
  EXPECT_LT((mid.t - Vec3(1, 0, 0)).norm(), 1e-12);
}
