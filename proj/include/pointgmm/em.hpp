#pragma once

// Top-down hierarchical classification EM: fit a mixture to all points, hard
// partition, then fit each node's children on its own subset.

#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "pointgmm/hgmm.hpp"

namespace pointgmm {

struct EmConfig {
  std::vector<int> branching{8, 4, 4, 4};
  int max_iters = 50;
  double tol = 1e-6;
  std::uint64_t seed = 0;

  void validate() const {
    if (max_iters < 1) throw DomainError("em: max_iters must be >= 1");
    if (!(tol > 0.0)) throw DomainError("em: tol must be > 0");
    if (branching.empty()) throw DomainError("em: branching must be non-empty");
    for (int b : branching)
      if (b < 1) throw DomainError("em: branching factors must be >= 1");
  }
};

struct LevelFit {
  std::vector<Gaussian> components;  // size == fan_out; inactive padding has weight 0
  std::vector<std::size_t> assignment;
  /// Complete-data objective sum_i log(pi_a(i) N(x_i | a(i))) after each M-step.
  std::vector<double> objective_trace;
  int iterations = 0;
};

namespace detail {

/// k-means++ seeding: up to `k` distinct centers; fewer when points run out.
inline std::vector<Vec3> kmeanspp_seeds(const PointCloud& pts, std::size_t k, std::mt19937_64& rng) {
  std::vector<Vec3> centers;
  const std::size_t n = pts.size();
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  centers.push_back(pts.point(first(rng)));
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], (pts.point(i) - centers.back()).squaredNorm());
      total += d2[i];
    }
    if (!(total > 0.0)) break;
    std::uniform_real_distribution<double> u(0.0, total);
    double target = u(rng);
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= d2[i];
      if (target <= 0.0 && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    if (!(d2[pick] > 0.0)) break;
    centers.push_back(pts.point(pick));
  }
  return centers;
}

/// Maximum-likelihood weight/mean/covariance (+ kEigenFloor * I) per cluster.
/// Empty clusters keep their previous mean/covariance with weight 0.
inline void m_step(const PointCloud& pts, const std::vector<std::size_t>& assign, std::vector<Gaussian>& comps) {
  const std::size_t k = comps.size();
  std::vector<std::size_t> count(k, 0);
  std::vector<Vec3> sum(k, Vec3::Zero());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    ++count[assign[i]];
    sum[assign[i]] += pts.point(i);
  }
  std::vector<Mat3> scatter(k, Mat3::Zero());
  std::vector<Vec3> mean(k);
  for (std::size_t j = 0; j < k; ++j) mean[j] = count[j] ? Vec3(sum[j] / static_cast<double>(count[j])) : comps[j].mean;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const Vec3 d = pts.point(i) - mean[assign[i]];
    scatter[assign[i]] += d * d.transpose();
  }
  const double n = static_cast<double>(pts.size());
  for (std::size_t j = 0; j < k; ++j) {
    if (count[j] == 0) {
      comps[j].weight = 0.0;
      continue;
    }
    const Mat3 cov = scatter[j] / static_cast<double>(count[j]) + kEigenFloor * Mat3::Identity();
    comps[j] = make_gaussian(static_cast<double>(count[j]) / n, mean[j], cov);
  }
}

inline double hard_objective(const PointCloud& pts, const std::vector<std::size_t>& assign,
                             const std::vector<Gaussian>& comps) {
  const auto ev = evaluators(comps);
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) total += ev[assign[i]].log_weighted(pts.point(i));
  return total;
}

}  // namespace detail

/// Hard EM on one point subset. Subsets with fewer distinct points than
/// `fan_out` fit fewer components and pad with zero-weight copies.
inline LevelFit fit_level(const PointCloud& pts, int fan_out, std::uint64_t seed, int max_iters = 50,
                          double tol = 1e-6) {
  require_nonempty(pts, "fit_level");
  if (fan_out < 1) throw DomainError("fit_level: fan_out must be >= 1");
  std::mt19937_64 rng(seed);
  const auto centers = detail::kmeanspp_seeds(pts, static_cast<std::size_t>(fan_out), rng);
  const std::size_t active = centers.size();

  LevelFit fit;
  fit.assignment.assign(pts.size(), 0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < active; ++j) {
      const double d = (pts.point(i) - centers[j]).squaredNorm();
      if (d < best) {
        best = d;
        fit.assignment[i] = j;
      }
    }
  }
  std::vector<Gaussian> comps(active);
  for (std::size_t j = 0; j < active; ++j) comps[j].mean = centers[j];
  detail::m_step(pts, fit.assignment, comps);
  fit.objective_trace.push_back(detail::hard_objective(pts, fit.assignment, comps));

  for (int it = 0; it < max_iters; ++it) {
    const auto ev = detail::evaluators(comps);
    bool changed = false;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const std::size_t a = detail::argmax_child(ev, 0, active, pts.point(i));
      changed = changed || a != fit.assignment[i];
      fit.assignment[i] = a;
    }
    detail::m_step(pts, fit.assignment, comps);
    const double obj = detail::hard_objective(pts, fit.assignment, comps);
    const double prev = fit.objective_trace.back();
    fit.objective_trace.push_back(obj);
    fit.iterations = it + 1;
    if (!changed || std::abs(obj - prev) <= tol * std::max(1.0, std::abs(prev))) break;
  }

  // Final assignment is the hard partition under the fitted parameters.
  const auto ev = detail::evaluators(comps);
  for (std::size_t i = 0; i < pts.size(); ++i) fit.assignment[i] = detail::argmax_child(ev, 0, active, pts.point(i));

  fit.components = comps;
  const Gaussian pad_src = comps.front();
  for (std::size_t j = active; j < static_cast<std::size_t>(fan_out); ++j) {
    Gaussian pad = pad_src;
    pad.weight = 0.0;
    fit.components.push_back(pad);
  }
  return fit;
}

/// Fits every level top-down. Nodes that receive no points get copies of
/// themselves as uniformly weighted children.
inline HgmmTree fit_tree(const PointCloud& cloud, const EmConfig& cfg) {
  cfg.validate();
  require_nonempty(cloud, "fit_tree");
  std::vector<std::vector<Gaussian>> levels;
  std::vector<std::vector<std::size_t>> members{std::vector<std::size_t>(cloud.size())};
  for (std::size_t i = 0; i < cloud.size(); ++i) members[0][i] = i;
  std::vector<Gaussian> parents{Gaussian{}};

  for (std::size_t l = 0; l < cfg.branching.size(); ++l) {
    const int b = cfg.branching[l];
    std::vector<Gaussian> level;
    std::vector<std::vector<std::size_t>> next(parents.size() * static_cast<std::size_t>(b));
    for (std::size_t p = 0; p < parents.size(); ++p) {
      if (members[p].empty()) {
        for (int c = 0; c < b; ++c) {
          Gaussian g = parents[p];
          g.weight = 1.0 / b;
          level.push_back(g);
        }
        continue;
      }
      const PointCloud sub = cloud.subset(members[p]);
      const LevelFit fit = fit_level(sub, b, derive_seed(cfg.seed, l + 1, p), cfg.max_iters, cfg.tol);
      for (std::size_t i = 0; i < members[p].size(); ++i)
        next[p * static_cast<std::size_t>(b) + fit.assignment[i]].push_back(members[p][i]);
      level.insert(level.end(), fit.components.begin(), fit.components.end());
    }
    parents = level;
    members = std::move(next);
    levels.push_back(std::move(level));
  }
  return HgmmTree(cfg.branching, std::move(levels));
}

}  // namespace pointgmm
