#pragma once

#include <Eigen/Core>
#include <stdexcept>
#include <string>
#include <utility>

namespace tricalib {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using VecX = Eigen::VectorXd;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using MatX = Eigen::MatrixXd;
using Quat = Eigen::Quaterniond;

/// Runtime failure with a stable machine-readable name (used by the CLI
/// to report which check tripped, e.g. "NonMonotonicTime", "MissingFile").
class Error : public std::runtime_error {
 public:
  Error(std::string name, const std::string& what)
      : std::runtime_error(name + ": " + what), name_(std::move(name)) {}

  const std::string& name() const { return name_; }

 private:
  std::string name_;
};

constexpr double kGravityMagnitude = 9.81;  // m/s^2

}  // namespace tricalib
