#pragma once

// Independent reference implementations used by the unit and acceptance tests.
// They avoid the library's evaluators: densities use a dense inverse and
// determinant, hard routing enumerates paths directly.

#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "pointgmm/pointgmm.hpp"

namespace pointgmm::oracle {

inline Mat3 random_spd(std::mt19937_64& rng, double jitter = 0.05) {
  std::normal_distribution<double> n(0.0, 0.5);
  Mat3 a;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a(r, c) = n(rng);
  Mat3 s = a * a.transpose() + jitter * Mat3::Identity();
  return 0.5 * (s + s.transpose());
}

inline std::vector<double> random_simplex(std::size_t k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.1, 1.0);
  std::vector<double> w(k);
  double s = 0.0;
  for (auto& v : w) s += (v = u(rng));
  for (auto& v : w) v /= s;
  return w;
}

inline HgmmTree random_tree(const std::vector<int>& branching, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<std::vector<Gaussian>> levels;
  std::size_t count = 1;
  for (int b : branching) {
    count *= static_cast<std::size_t>(b);
    std::vector<Gaussian> lvl;
    for (std::size_t g = 0; g < count / static_cast<std::size_t>(b); ++g) {
      const auto w = random_simplex(static_cast<std::size_t>(b), rng);
      for (double wi : w) lvl.push_back(make_gaussian(wi, Vec3(n(rng), n(rng), n(rng)), random_spd(rng)));
    }
    levels.push_back(std::move(lvl));
  }
  return HgmmTree(branching, std::move(levels));
}

inline PointCloud random_cloud(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  PointMatrix m(static_cast<Eigen::Index>(n), 3);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (int k = 0; k < 3; ++k) m(i, k) = d(rng);
  return PointCloud(std::move(m));
}

/// log N(x | mu, Sigma) via explicit inverse and determinant.
inline double oracle_log_pdf(const Gaussian& g, const Vec3& x) {
  const Vec3 d = x - g.mean;
  const double maha = d.dot(g.cov.inverse() * d);
  return -0.5 * (3.0 * std::log(2.0 * std::numbers::pi) + std::log(g.cov.determinant()) + maha);
}

/// log sum_j w_j N(x | j), accumulated in long double without max-shifting.
inline double oracle_point_ll(const std::vector<Gaussian>& gs, const Vec3& x) {
  long double s = 0.0L;
  for (const auto& g : gs) s += static_cast<long double>(g.weight) * std::exp(static_cast<long double>(oracle_log_pdf(g, x)));
  return static_cast<double>(std::log(s));
}

inline std::vector<Gaussian> children_of(const HgmmTree& tree, int parent_level, std::size_t parent) {
  const auto b = static_cast<std::size_t>(tree.branching()[static_cast<std::size_t>(parent_level)]);
  const auto lvl = tree.level(parent_level + 1);
  return {lvl.begin() + static_cast<std::ptrdiff_t>(parent * b), lvl.begin() + static_cast<std::ptrdiff_t>((parent + 1) * b)};
}

/// Node index at `level` reached by greedy descent; ties keep the first child.
inline std::size_t oracle_route(const HgmmTree& tree, const Vec3& x, int level) {
  std::size_t node = 0;
  for (int l = 0; l < level; ++l) {
    const auto kids = children_of(tree, l, node);
    std::size_t best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const double v = std::log(kids[k].weight) + oracle_log_pdf(kids[k], x);
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    node = node * kids.size() + best;
  }
  return node;
}

/// Per-point path enumeration of the depth-`level` hard-partition log-likelihood.
inline double oracle_depth_ll(const HgmmTree& tree, const PointCloud& cloud, int level) {
  double total = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 x = cloud.point(i);
    const std::size_t parent = oracle_route(tree, x, level - 1);
    total += oracle_point_ll(children_of(tree, level - 1, parent), x);
  }
  return total;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

}  // namespace pointgmm::oracle
