#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "pointgmm/errors.hpp"

namespace pointgmm {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using PointMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

/// Ordered list of 3D points stored row-major (N x 3).
class PointCloud {
 public:
  PointCloud() = default;
  explicit PointCloud(PointMatrix xyz) : xyz_(std::move(xyz)) {}
  explicit PointCloud(const std::vector<Vec3>& pts) : xyz_(static_cast<Eigen::Index>(pts.size()), 3) {
    for (std::size_t i = 0; i < pts.size(); ++i) xyz_.row(static_cast<Eigen::Index>(i)) = pts[i].transpose();
  }

  std::size_t size() const noexcept { return static_cast<std::size_t>(xyz_.rows()); }
  bool empty() const noexcept { return xyz_.rows() == 0; }

  Vec3 point(std::size_t i) const { return xyz_.row(static_cast<Eigen::Index>(i)).transpose(); }
  void set_point(std::size_t i, const Vec3& p) { xyz_.row(static_cast<Eigen::Index>(i)) = p.transpose(); }

  const PointMatrix& matrix() const noexcept { return xyz_; }
  PointMatrix& matrix() noexcept { return xyz_; }

  /// Flat row-major view, x0 y0 z0 x1 ...
  std::span<const double> flat() const noexcept { return {xyz_.data(), static_cast<std::size_t>(xyz_.size())}; }

  Vec3 centroid() const {
    if (empty()) throw DomainError("centroid of an empty point cloud");
    return xyz_.colwise().mean().transpose();
  }

  bool all_finite() const noexcept { return xyz_.allFinite(); }

  PointCloud subset(std::span<const std::size_t> indices) const {
    PointMatrix out(static_cast<Eigen::Index>(indices.size()), 3);
    for (std::size_t k = 0; k < indices.size(); ++k)
      out.row(static_cast<Eigen::Index>(k)) = xyz_.row(static_cast<Eigen::Index>(indices[k]));
    return PointCloud(std::move(out));
  }

  PointCloud translated(const Vec3& v) const {
    PointMatrix out = xyz_;
    out.rowwise() += v.transpose();
    return PointCloud(std::move(out));
  }

 private:
  PointMatrix xyz_{0, 3};
};

inline void require_nonempty(const PointCloud& cloud, const char* what) {
  if (cloud.empty()) throw DomainError(std::string(what) + ": empty point cloud");
}

/// splitmix64 finalizer; used to derive independent sub-seeds.
inline std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
  return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

}  // namespace pointgmm
