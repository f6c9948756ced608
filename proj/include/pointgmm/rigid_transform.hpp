#pragma once

#include <cmath>
#include <numbers>

#include "pointgmm/point_cloud.hpp"

namespace pointgmm {

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double phi) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  double r = std::remainder(phi, two_pi);  // [-pi, pi]
  if (r <= -std::numbers::pi) r += two_pi;
  return r;
}

inline Mat3 rotation_z(double phi) {
  const double c = std::cos(phi), s = std::sin(phi);
  Mat3 r;
  r << c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0;
  return r;
}

/// x -> R_z(phi) x + v.
struct RigidTransform {
  double phi = 0.0;
  Vec3 v = Vec3::Zero();

  static RigidTransform identity() { return {}; }

  Vec3 apply(const Vec3& x) const { return rotation_z(phi) * x + v; }

  PointCloud apply(const PointCloud& cloud) const {
    const Mat3 r = rotation_z(phi);
    PointMatrix out = cloud.matrix() * r.transpose();
    out.rowwise() += v.transpose();
    return PointCloud(std::move(out));
  }

  RigidTransform inverse() const { return {wrap_angle(-phi), -(rotation_z(-phi) * v)}; }

  /// (this o first)(x) = this(first(x)).
  RigidTransform compose(const RigidTransform& first) const {
    return {wrap_angle(phi + first.phi), rotation_z(phi) * first.v + v};
  }
};

}  // namespace pointgmm
