#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace pointgmm;

namespace {

PointCloud blobs(const std::vector<Vec3>& centers, std::size_t per, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  std::vector<Vec3> pts;
  for (const auto& c : centers)
    for (std::size_t i = 0; i < per; ++i) pts.push_back(c + Vec3(n(rng), n(rng), n(rng)));
  return PointCloud(pts);
}

}  // namespace

TEST(FitLevel, SeparatesTwoClusters) {
  const PointCloud pts = blobs({{-2, 0, 0}, {2, 0, 0}}, 200, 0.3, 1);
  const LevelFit fit = fit_level(pts, 2, 7);
  ASSERT_EQ(fit.components.size(), 2u);
  std::vector<double> xs{fit.components[0].mean.x(), fit.components[1].mean.x()};
  std::sort(xs.begin(), xs.end());
  EXPECT_NEAR(xs[0], -2.0, 0.1);
  EXPECT_NEAR(xs[1], 2.0, 0.1);
  EXPECT_NEAR(fit.components[0].weight + fit.components[1].weight, 1.0, 1e-12);
}

TEST(FitLevel, ObjectiveNonDecreasing) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const PointCloud pts = blobs({{-1, 0, 0}, {1, 0.5, 0}, {0, 1, 1}}, 60, 0.5, seed);
    const LevelFit fit = fit_level(pts, 3, seed, 100, 1e-12);
    for (std::size_t k = 1; k < fit.objective_trace.size(); ++k)
      EXPECT_GE(fit.objective_trace[k], fit.objective_trace[k - 1] - 1e-9) << "seed " << seed << " iter " << k;
  }
}

TEST(FitLevel, SinglePointGivesFlooredCovariance) {
  const PointCloud one(std::vector<Vec3>{{1, 2, 3}});
  const LevelFit fit = fit_level(one, 1, 0);
  EXPECT_EQ(fit.components[0].mean, Vec3(1, 2, 3));
  EXPECT_EQ(fit.components[0].weight, 1.0);
  Eigen::SelfAdjointEigenSolver<Mat3> eig(fit.components[0].cov);
  EXPECT_GE(eig.eigenvalues().minCoeff(), kEigenFloor * (1 - 1e-9));
}

TEST(FitLevel, MoreComponentsThanDistinctPointsPadsWithZeroWeight) {
  const PointCloud two(std::vector<Vec3>{{0, 0, 0}, {1, 0, 0}});
  const LevelFit fit = fit_level(two, 4, 0);
  ASSERT_EQ(fit.components.size(), 4u);
  double total = 0.0;
  int active = 0;
  for (const auto& g : fit.components) {
    total += g.weight;
    active += g.active();
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_EQ(active, 2);
}

TEST(FitTree, ChainOfSingletonsKeepsParent) {
  const PointCloud pts = blobs({{0, 0, 0}}, 100, 1.0, 2);
  EmConfig cfg;
  cfg.branching = {1, 1};
  const HgmmTree tree = fit_tree(pts, cfg);
  EXPECT_EQ(tree.node(1, 0).weight, 1.0);
  EXPECT_EQ(tree.node(2, 0).weight, 1.0);
  EXPECT_LT((tree.node(1, 0).mean - tree.node(2, 0).mean).norm(), 1e-12);
  EXPECT_LT((tree.node(1, 0).cov - tree.node(2, 0).cov).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(FitTree, ProducesValidTree) {
  const PointCloud pts = blobs({{-2, 0, 0}, {2, 0, 0}, {0, 2, 0}, {0, -2, 0}}, 80, 0.4, 3);
  EmConfig cfg;
  cfg.branching = {2, 2, 3};
  const HgmmTree tree = fit_tree(pts, cfg);
  EXPECT_NO_THROW(tree.validate());
  EXPECT_EQ(tree.level_size(3), 12u);
}

TEST(FitTree, FourGaussianLikelihoodNearGenerator) {
  std::mt19937_64 rng(4);
  const std::vector<Vec3> centers{{-3, 0, 0}, {3, 0, 0}, {0, 3, 0}, {0, -3, 0}};
  const PointCloud pts = blobs(centers, 250, 0.5, 4);
  std::vector<Gaussian> truth;
  for (const auto& c : centers) truth.push_back(make_gaussian(0.25, c, 0.25 * Mat3::Identity()));
  const double generating = mixture_log_likelihood(truth, pts);
  EmConfig cfg;
  cfg.branching = {4};
  cfg.seed = 5;
  const double fitted = depth_log_likelihood(fit_tree(pts, cfg), pts, 1);
  EXPECT_GE(fitted, generating - 0.05 * std::abs(generating));
}

TEST(FitTree, DeterministicPerSeed) {
  const PointCloud pts = blobs({{-1, 0, 0}, {1, 0, 0}}, 50, 0.5, 6);
  EmConfig cfg;
  cfg.branching = {2, 2};
  cfg.seed = 9;
  const HgmmTree a = fit_tree(pts, cfg), b = fit_tree(pts, cfg);
  for (int l = 1; l <= 2; ++l)
    for (std::size_t j = 0; j < a.level_size(l); ++j) {
      EXPECT_EQ(a.node(l, j).mean, b.node(l, j).mean);
      EXPECT_EQ(a.node(l, j).cov, b.node(l, j).cov);
      EXPECT_EQ(a.node(l, j).weight, b.node(l, j).weight);
    }
}

TEST(EmConfig, ValidationErrors) {
  EmConfig cfg;
  cfg.max_iters = 0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = EmConfig{};
  cfg.branching = {};
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = EmConfig{};
  cfg.tol = 0.0;
  EXPECT_THROW(cfg.validate(), DomainError);
}
