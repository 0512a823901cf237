#ifndef MSLAM_GEOMETRY_HPP
#define MSLAM_GEOMETRY_HPP

#include <Eigen/Dense>
#include <array>

namespace mslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// Angle below which exp/log and the SO(3) Jacobians switch to their
// second-order Taylor expansions.
constexpr double kSmallAngle = 1e-8;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

/// Unit quaternion wrapper, stored (w,x,y,z) and canonicalized to w >= 0 so
/// serialized states are bit-comparable across runs.
class Rotation {
 public:
  Rotation() : q_(1, 0, 0, 0) {}
  Rotation(double w, double x, double y, double z);
  explicit Rotation(const Eigen::Quaterniond& q);
  explicit Rotation(const Mat3& m) : Rotation(Eigen::Quaterniond(m)) {}

  static Rotation identity() { return Rotation(); }

  const Eigen::Quaterniond& quat() const { return q_; }
  Mat3 matrix() const { return q_.toRotationMatrix(); }
  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }

  Rotation inverse() const { return Rotation(q_.conjugate()); }
  Rotation operator*(const Rotation& rhs) const { return Rotation(q_ * rhs.q_); }
  Vec3 operator*(const Vec3& v) const { return q_ * v; }

  double angle_to(const Rotation& other) const;

  std::array<double, 4> coeffs_wxyz() const { return {q_.w(), q_.x(), q_.y(), q_.z()}; }

 private:
  Eigen::Quaterniond q_;  // unit, w >= 0
  void canonicalize();
};

/// Matrix exponential of so(3); second-order Taylor below kSmallAngle.
/// Throws std::invalid_argument on non-finite input.
Rotation exp_so3(const Vec3& omega);

/// Principal-branch logarithm, ||result|| <= pi.
Vec3 log_so3(const Rotation& r);

/// Geodesic interpolation r0 * exp(s * log(r0^-1 * r1)); s must be in [0,1].
Rotation slerp_fraction(const Rotation& r0, const Rotation& r1, double s);

// Right/left Jacobians of SO(3) and their inverses.
Mat3 so3_right_jacobian(const Vec3& phi);
Mat3 so3_right_jacobian_inv(const Vec3& phi);
Mat3 so3_left_jacobian(const Vec3& phi);
Mat3 so3_left_jacobian_inv(const Vec3& phi);

/// Rigid transform: x_out = R * x + t.
struct Pose {
  Rotation rotation;
  Vec3 translation = Vec3::Zero();

  Pose() = default;
  Pose(const Rotation& r, const Vec3& t) : rotation(r), translation(t) {}

  static Pose identity() { return Pose(); }

  Pose inverse() const {
    Rotation rinv = rotation.inverse();
    return Pose(rinv, -(rinv * translation));
  }
  Pose operator*(const Pose& rhs) const {
    return Pose(rotation * rhs.rotation, rotation * rhs.translation + translation);
  }
  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

  /// Right-perturbation update: R <- R Exp(dtheta), t <- t + dt.
  Pose retract(const Vec3& dtheta, const Vec3& dt) const {
    return Pose(rotation * exp_so3(dtheta), translation + dt);
  }

  /// (qw,qx,qy,qz,tx,ty,tz) row used by every file format.
  std::array<double, 7> to_row() const;
  static Pose from_row(const std::array<double, 7>& row);
};

}  // namespace mslam

#endif
