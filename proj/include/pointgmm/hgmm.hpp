#pragma once

// Hierarchical Gaussian mixture: a complete tree of weighted 3D Gaussians in
// which each node's children form a mixture refining the node. Level 1 holds
// the root's children; level l has prod(branching[0..l-1]) nodes stored in
// level order, so node j at level l owns children
// [j * branching[l], (j + 1) * branching[l]) at level l + 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "pointgmm/errors.hpp"
#include "pointgmm/point_cloud.hpp"

namespace pointgmm {

inline constexpr double kEigenFloor = 1e-6;
inline constexpr double kWeightSumTol = 1e-9;
inline constexpr double kLog2Pi = 1.8378770664093454836;  // ln(2 pi)

struct Gaussian {
  double weight = 1.0;
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();

  /// Zero-weight components are padding and never sampled or assigned.
  bool active() const noexcept { return weight > 0.0; }
};

/// Symmetrizes `cov` and clamps its eigenvalues to >= kEigenFloor.
inline Gaussian make_gaussian(double weight, const Vec3& mean, const Mat3& cov) {
  if (!(weight >= 0.0 && weight <= 1.0)) throw InvalidModelError("gaussian weight outside [0,1]");
  if (!mean.allFinite() || !cov.allFinite()) throw InvalidModelError("non-finite gaussian parameters");
  Mat3 sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Mat3> eig(sym);
  Vec3 lam = eig.eigenvalues();
  if (lam.minCoeff() < kEigenFloor) {
    lam = lam.cwiseMax(kEigenFloor);
    sym = eig.eigenvectors() * lam.asDiagonal() * eig.eigenvectors().transpose();
    sym = 0.5 * (sym + sym.transpose());
    // Recomposition round-off can leave the spectrum a few ulps under the floor.
    for (int i = 0; i < 4; ++i) {
      const double lo = Eigen::SelfAdjointEigenSolver<Mat3>(sym, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
      if (lo >= kEigenFloor) break;
      const double slack = 4.0 * std::numeric_limits<double>::epsilon() * sym.cwiseAbs().maxCoeff();
      sym.diagonal().array() += kEigenFloor - lo + slack;
    }
  }
  return Gaussian{weight, mean, sym};
}

/// Precomputed Cholesky factor for repeated density evaluation.
class GaussianEvaluator {
 public:
  explicit GaussianEvaluator(const Gaussian& g) : mean_(g.mean), log_weight_(std::log(g.weight)) {
    Eigen::LLT<Mat3> llt(g.cov);
    if (llt.info() != Eigen::Success || !g.cov.allFinite())
      throw InvalidModelError("covariance is not positive definite");
    chol_ = llt.matrixL();
    const Vec3 diag = chol_.diagonal();
    if (diag.minCoeff() <= 0.0) throw InvalidModelError("covariance is not positive definite");
    log_norm_ = -1.5 * kLog2Pi - diag.array().log().sum();
  }

  double log_pdf(const Vec3& x) const {
    const Vec3 y = chol_.triangularView<Eigen::Lower>().solve(x - mean_);
    return log_norm_ - 0.5 * y.squaredNorm();
  }

  /// log(pi) + log N(x); -inf for inactive components.
  double log_weighted(const Vec3& x) const { return log_weight_ + log_pdf(x); }

  const Mat3& cholesky() const noexcept { return chol_; }

 private:
  Vec3 mean_;
  Mat3 chol_;
  double log_norm_ = 0.0;
  double log_weight_ = 0.0;
};

/// log N(x | mean, cov), weight excluded.
inline double gaussian_log_pdf(const Gaussian& g, const Vec3& x) { return GaussianEvaluator(g).log_pdf(x); }

inline double log_sum_exp(std::span<const double> a) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : a) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : a) s += std::exp(v - m);
  return m + std::log(s);
}

inline void check_sibling_weights(std::span<const Gaussian> siblings) {
  if (siblings.empty()) throw InvalidModelError("empty sibling group");
  double s = 0.0;
  for (const auto& g : siblings) s += g.weight;
  if (std::abs(s - 1.0) > kWeightSumTol)
    throw InvalidModelError("sibling weights sum to " + std::to_string(s) + ", expected 1");
}

namespace detail {
inline std::vector<GaussianEvaluator> evaluators(std::span<const Gaussian> gs) {
  std::vector<GaussianEvaluator> out;
  out.reserve(gs.size());
  for (const auto& g : gs) out.emplace_back(g);
  return out;
}
}  // namespace detail

/// sum_i log sum_j pi_j N(x_i | Theta_j).
inline double mixture_log_likelihood(std::span<const Gaussian> siblings, const PointCloud& cloud) {
  require_nonempty(cloud, "mixture_log_likelihood");
  check_sibling_weights(siblings);
  const auto ev = detail::evaluators(siblings);
  std::vector<double> a(ev.size());
  double total = 0.0;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 x = cloud.point(i);
    for (std::size_t j = 0; j < ev.size(); ++j) a[j] = ev[j].log_weighted(x);
    total += log_sum_exp(a);
  }
  return total;
}

/// N x J responsibilities. Rows whose weighted densities are all -inf are uniform.
inline Eigen::MatrixXd posteriors(std::span<const Gaussian> siblings, const PointCloud& cloud) {
  require_nonempty(cloud, "posteriors");
  check_sibling_weights(siblings);
  const auto ev = detail::evaluators(siblings);
  const auto J = static_cast<Eigen::Index>(ev.size());
  Eigen::MatrixXd gamma(static_cast<Eigen::Index>(cloud.size()), J);
  std::vector<double> a(ev.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 x = cloud.point(i);
    for (std::size_t j = 0; j < ev.size(); ++j) a[j] = ev[j].log_weighted(x);
    const double lse = log_sum_exp(a);
    const auto row = static_cast<Eigen::Index>(i);
    if (!std::isfinite(lse)) {
      gamma.row(row).setConstant(1.0 / static_cast<double>(J));
      continue;
    }
    for (Eigen::Index j = 0; j < J; ++j) gamma(row, j) = std::exp(a[static_cast<std::size_t>(j)] - lse);
  }
  return gamma;
}

class HgmmTree {
 public:
  HgmmTree() = default;

  /// Builds a tree of identity Gaussians with uniform sibling weights.
  explicit HgmmTree(std::vector<int> branching) : branching_(std::move(branching)) {
    if (branching_.empty()) throw InvalidModelError("branching must be non-empty");
    std::size_t count = 1;
    for (int b : branching_) {
      if (b < 1) throw InvalidModelError("branching factors must be >= 1");
      count *= static_cast<std::size_t>(b);
      levels_.emplace_back(count, Gaussian{1.0 / b, Vec3::Zero(), Mat3::Identity()});
    }
  }

  HgmmTree(std::vector<int> branching, std::vector<std::vector<Gaussian>> levels)
      : branching_(std::move(branching)), levels_(std::move(levels)) {
    validate();
  }

  int depth() const noexcept { return static_cast<int>(branching_.size()); }
  const std::vector<int>& branching() const noexcept { return branching_; }

  /// Fan-out of nodes at `level - 1` (level 1 => root's fan-out).
  int group_size(int level) const { return branching_.at(static_cast<std::size_t>(level - 1)); }

  std::size_t level_size(int level) const { return levels_.at(static_cast<std::size_t>(level - 1)).size(); }

  std::span<const Gaussian> level(int level) const { return levels_.at(static_cast<std::size_t>(level - 1)); }
  std::vector<Gaussian>& mutable_level(int level) { return levels_.at(static_cast<std::size_t>(level - 1)); }

  const Gaussian& node(int level, std::size_t j) const { return levels_.at(static_cast<std::size_t>(level - 1)).at(j); }
  Gaussian& node(int level, std::size_t j) { return levels_.at(static_cast<std::size_t>(level - 1)).at(j); }

  /// Children of node `parent` at `level` (parent level 0 = root).
  std::span<const Gaussian> children(int level, std::size_t parent) const {
    const auto b = static_cast<std::size_t>(group_size(level + 1));
    return this->level(level + 1).subspan(parent * b, b);
  }

  /// Throws InvalidModelError if sizes, sibling normalization or PSD floor fail.
  void validate() const {
    if (branching_.empty()) throw InvalidModelError("branching must be non-empty");
    if (levels_.size() != branching_.size()) throw InvalidModelError("level count does not match branching");
    std::size_t count = 1;
    for (std::size_t l = 0; l < branching_.size(); ++l) {
      if (branching_[l] < 1) throw InvalidModelError("branching factors must be >= 1");
      count *= static_cast<std::size_t>(branching_[l]);
      if (levels_[l].size() != count)
        throw InvalidModelError("level " + std::to_string(l + 1) + " has " + std::to_string(levels_[l].size()) +
                                " nodes, expected " + std::to_string(count));
      const auto b = static_cast<std::size_t>(branching_[l]);
      for (std::size_t g = 0; g < count / b; ++g)
        check_sibling_weights(std::span<const Gaussian>(levels_[l]).subspan(g * b, b));
      for (const auto& gs : levels_[l]) {
        if (!(gs.weight >= 0.0 && gs.weight <= 1.0)) throw InvalidModelError("weight outside [0,1]");
        if (!gs.mean.allFinite() || !gs.cov.allFinite()) throw InvalidModelError("non-finite gaussian");
        if ((gs.cov - gs.cov.transpose()).cwiseAbs().maxCoeff() > 1e-12)
          throw InvalidModelError("covariance is not symmetric");
        Eigen::SelfAdjointEigenSolver<Mat3> eig(gs.cov, Eigen::EigenvaluesOnly);
        if (eig.eigenvalues().minCoeff() < kEigenFloor * (1.0 - 1e-9))
          throw InvalidModelError("covariance eigenvalue below floor");
      }
    }
  }

 private:
  std::vector<int> branching_;
  std::vector<std::vector<Gaussian>> levels_;
};

/// Hard assignment of each point to one node at `level`.
struct Partition {
  int level = 0;
  std::vector<std::size_t> assignment;

  /// Point indices per node, ascending.
  std::vector<std::vector<std::size_t>> members(std::size_t node_count) const {
    std::vector<std::vector<std::size_t>> out(node_count);
    for (std::size_t i = 0; i < assignment.size(); ++i) out.at(assignment[i]).push_back(i);
    return out;
  }
};

namespace detail {

inline void check_level(const HgmmTree& tree, int level) {
  if (level < 1 || level > tree.depth())
    throw DomainError("level " + std::to_string(level) + " outside [1, " + std::to_string(tree.depth()) + "]");
}

inline std::vector<std::vector<GaussianEvaluator>> tree_evaluators(const HgmmTree& tree, int up_to_level) {
  std::vector<std::vector<GaussianEvaluator>> out;
  for (int l = 1; l <= up_to_level; ++l) out.push_back(evaluators(tree.level(l)));
  return out;
}

/// argmax of weighted density among [first, first + count); lowest index on ties.
inline std::size_t argmax_child(const std::vector<GaussianEvaluator>& ev, std::size_t first, std::size_t count,
                                const Vec3& x) {
  std::size_t best = first;
  double best_val = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < count; ++k) {
    const double v = ev[first + k].log_weighted(x);
    if (v > best_val) {
      best_val = v;
      best = first + k;
    }
  }
  return best;
}

}  // namespace detail

/// Recursive top-down argmax descent to `level`.
inline Partition hard_partition(const HgmmTree& tree, const PointCloud& cloud, int level) {
  detail::check_level(tree, level);
  const auto ev = detail::tree_evaluators(tree, level);
  Partition part{level, std::vector<std::size_t>(cloud.size(), 0)};
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Vec3 x = cloud.point(i);
    std::size_t node = 0;
    for (int l = 1; l <= level; ++l) {
      const auto b = static_cast<std::size_t>(tree.group_size(l));
      node = detail::argmax_child(ev[static_cast<std::size_t>(l - 1)], node * b, b, x);
    }
    part.assignment[i] = node;
  }
  return part;
}

/// Hard-partition log-likelihood of the mixtures at `level`: points are routed
/// to a parent at `level - 1` and scored against that parent's children only.
/// Nodes with no assigned points contribute 0.
inline double depth_log_likelihood(const HgmmTree& tree, const PointCloud& cloud, int level) {
  detail::check_level(tree, level);
  require_nonempty(cloud, "depth_log_likelihood");
  if (level == 1) return mixture_log_likelihood(tree.level(1), cloud);

  const Partition parents = hard_partition(tree, cloud, level - 1);
  const auto members = parents.members(tree.level_size(level - 1));
  double total = 0.0;
  for (std::size_t p = 0; p < members.size(); ++p) {
    if (members[p].empty()) continue;
    total += mixture_log_likelihood(tree.children(level - 1, p), cloud.subset(members[p]));
  }
  return total;
}

/// Leaf mixture with each weight multiplied along its ancestor path.
inline std::vector<Gaussian> flatten_leaves(const HgmmTree& tree) {
  const int D = tree.depth();
  std::vector<Gaussian> leaves(tree.level(D).begin(), tree.level(D).end());
  for (std::size_t j = 0; j < leaves.size(); ++j) {
    std::size_t node = j;
    for (int l = D; l > 1; --l) {
      node /= static_cast<std::size_t>(tree.group_size(l));
      leaves[j].weight *= tree.node(l - 1, node).weight;
    }
  }
  return leaves;
}

/// Draws `count` points from the flattened leaf mixture; deterministic given `seed`.
inline PointCloud sample_points(const HgmmTree& tree, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw DomainError("sample_points: count must be >= 1");
  const auto leaves = flatten_leaves(tree);
  std::vector<double> w;
  std::vector<Mat3> chol;
  for (const auto& g : leaves) {
    w.push_back(g.weight);
    chol.push_back(GaussianEvaluator(g).cholesky());
  }
  std::mt19937_64 rng(seed);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  std::normal_distribution<double> normal(0.0, 1.0);
  PointMatrix out(static_cast<Eigen::Index>(count), 3);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = pick(rng);
    Vec3 eps;
    for (int k = 0; k < 3; ++k) eps[k] = normal(rng);
    out.row(static_cast<Eigen::Index>(i)) = (leaves[j].mean + chol[j] * eps).transpose();
  }
  return PointCloud(std::move(out));
}

}  // namespace pointgmm
