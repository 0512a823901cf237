#include "mslam/geometry.hpp"

#include <cmath>
#include <stdexcept>

namespace mslam {

void Rotation::canonicalize() {
  q_.normalize();
  // Pick one representative of the double cover. For w == 0 fall back to the
  // first nonzero imaginary component so the choice stays deterministic.
  if (q_.w() < 0) {
    q_.coeffs() = -q_.coeffs();
  } else if (q_.w() == 0) {
    const double* v = q_.coeffs().data();  // (x,y,z,w)
    for (int i = 0; i < 3; ++i) {
      if (v[i] != 0) {
        if (v[i] < 0) q_.coeffs() = -q_.coeffs();
        break;
      }
    }
  }
}

Rotation::Rotation(double w, double x, double y, double z) : q_(w, x, y, z) {
  if (!q_.coeffs().allFinite()) throw std::invalid_argument("Rotation: non-finite quaternion");
  if (std::abs(q_.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("Rotation: quaternion not unit norm");
  canonicalize();
}

Rotation::Rotation(const Eigen::Quaterniond& q) : q_(q) {
  if (!q_.coeffs().allFinite()) throw std::invalid_argument("Rotation: non-finite quaternion");
  canonicalize();
}

double Rotation::angle_to(const Rotation& other) const {
  return log_so3(inverse() * other).norm();
}

Rotation exp_so3(const Vec3& omega) {
  if (!omega.allFinite()) throw std::invalid_argument("exp_so3: non-finite input");
  const double theta2 = omega.squaredNorm();
  const double theta = std::sqrt(theta2);
  double w, k;  // q = (w, k * omega)
  if (theta < kSmallAngle) {
    w = 1.0 - theta2 / 8.0;
    k = 0.5 - theta2 / 48.0;
  } else {
    w = std::cos(0.5 * theta);
    k = std::sin(0.5 * theta) / theta;
  }
  return Rotation(Eigen::Quaterniond(w, k * omega.x(), k * omega.y(), k * omega.z()));
}

Vec3 log_so3(const Rotation& r) {
  const Eigen::Quaterniond& q = r.quat();
  const Vec3 v(q.x(), q.y(), q.z());
  const double nv = v.norm();
  const double w = q.w();  // >= 0 by canonicalization, so theta <= pi
  if (nv < kSmallAngle) {
    return (2.0 / w) * (1.0 - nv * nv / (3.0 * w * w)) * v;
  }
  const double theta = 2.0 * std::atan2(nv, w);
  return (theta / nv) * v;
}

Rotation slerp_fraction(const Rotation& r0, const Rotation& r1, double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("slerp_fraction: s outside [0,1]");
  return r0 * exp_so3(s * log_so3(r0.inverse() * r1));
}

Mat3 so3_right_jacobian(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 W = skew(phi);
  if (theta2 < kSmallAngle * kSmallAngle) {
    return Mat3::Identity() - 0.5 * W + (1.0 / 6.0) * W * W;
  }
  const double theta = std::sqrt(theta2);
  const double a = (1.0 - std::cos(theta)) / theta2;
  const double b = (theta - std::sin(theta)) / (theta2 * theta);
  return Mat3::Identity() - a * W + b * W * W;
}

Mat3 so3_right_jacobian_inv(const Vec3& phi) {
  const double theta2 = phi.squaredNorm();
  const Mat3 W = skew(phi);
  if (theta2 < kSmallAngle * kSmallAngle) {
    return Mat3::Identity() + 0.5 * W + (1.0 / 12.0) * W * W;
  }
  const double theta = std::sqrt(theta2);
  const double c = 1.0 / theta2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  return Mat3::Identity() + 0.5 * W + c * W * W;
}

Mat3 so3_left_jacobian(const Vec3& phi) { return so3_right_jacobian(-phi); }

Mat3 so3_left_jacobian_inv(const Vec3& phi) { return so3_right_jacobian_inv(-phi); }

std::array<double, 7> Pose::to_row() const {
  return {rotation.w(), rotation.x(), rotation.y(), rotation.z(),
          translation.x(), translation.y(), translation.z()};
}

Pose Pose::from_row(const std::array<double, 7>& row) {
  return Pose(Rotation(row[0], row[1], row[2], row[3]), Vec3(row[4], row[5], row[6]));
}

}  // namespace mslam
