#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "support.hpp"

using namespace pointgmm;
using namespace pointgmm::oracle;

namespace {

Gaussian iso(double w, Vec3 mean, double var) { return make_gaussian(w, mean, var * Mat3::Identity()); }

PointCloud cloud_of(std::initializer_list<Vec3> pts) { return PointCloud(std::vector<Vec3>(pts)); }

}  // namespace

TEST(GaussianLogPdf, StandardNormalAtMean) {
  EXPECT_NEAR(gaussian_log_pdf(iso(1.0, Vec3::Zero(), 1.0), Vec3::Zero()), -1.5 * std::log(2 * std::numbers::pi),
              1e-14);
}

TEST(GaussianLogPdf, UnitOffsetCostsHalf) {
  const Gaussian g = iso(1.0, Vec3::Zero(), 1.0);
  EXPECT_NEAR(gaussian_log_pdf(g, Vec3(1, 0, 0)) - gaussian_log_pdf(g, Vec3::Zero()), -0.5, 1e-14);
}

TEST(GaussianLogPdf, MatchesDenseInverseOnRandomCovariances) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 200; ++t) {
    const Gaussian g = make_gaussian(1.0, Vec3::Random(), random_spd(rng));
    const Vec3 x = 2.0 * Vec3::Random();
    EXPECT_LT(rel_err(gaussian_log_pdf(g, x), oracle_log_pdf(g, x)), 1e-10);
  }
}

TEST(MakeGaussian, ClampsEigenvaluesAndSymmetrizes) {
  Mat3 c = Mat3::Zero();
  c(0, 0) = 1.0;
  c(0, 1) = 1e-3;
  const Gaussian g = make_gaussian(0.5, Vec3::Zero(), c);
  EXPECT_EQ(g.cov, g.cov.transpose());
  Eigen::SelfAdjointEigenSolver<Mat3> eig(g.cov);
  EXPECT_GE(eig.eigenvalues().minCoeff(), kEigenFloor * (1 - 1e-9));
}

TEST(MakeGaussian, RejectsBadWeight) {
  EXPECT_THROW(make_gaussian(1.5, Vec3::Zero(), Mat3::Identity()), InvalidModelError);
  EXPECT_THROW(make_gaussian(-0.1, Vec3::Zero(), Mat3::Identity()), InvalidModelError);
}

TEST(GaussianEvaluator, RejectsIndefiniteCovariance) {
  Gaussian g;
  g.cov = -Mat3::Identity();
  EXPECT_THROW(GaussianEvaluator{g}, InvalidModelError);
}

TEST(MixtureLogLikelihood, MatchesNaiveSum) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const HgmmTree tree = random_tree({4}, rng);
    const PointCloud cloud = random_cloud(20, rng);
    const std::vector<Gaussian> gs(tree.level(1).begin(), tree.level(1).end());
    double oracle = 0.0;
    for (std::size_t i = 0; i < cloud.size(); ++i) oracle += oracle_point_ll(gs, cloud.point(i));
    EXPECT_LT(rel_err(mixture_log_likelihood(tree.level(1), cloud), oracle), 1e-10);
  }
}

TEST(MixtureLogLikelihood, DuplicateComponentsEqualSingle) {
  const Gaussian a = iso(0.5, Vec3(1, 2, 3), 0.7);
  const Gaussian one = iso(1.0, Vec3(1, 2, 3), 0.7);
  const std::vector<Gaussian> two{a, a};
  const std::vector<Gaussian> single{one};
  const PointCloud c = cloud_of({{0, 0, 0}, {1, 2, 2}, {3, 1, 0}});
  EXPECT_NEAR(mixture_log_likelihood(two, c), mixture_log_likelihood(single, c), 1e-12);
}

TEST(MixtureLogLikelihood, StableFarFromAllComponents) {
  // 50 Mahalanobis units: naive exp underflows to 0 in double precision.
  const std::vector<Gaussian> gs{iso(0.5, Vec3::Zero(), 1.0), iso(0.5, Vec3(1, 0, 0), 1.0)};
  const PointCloud c = cloud_of({{50, 0, 0}});
  const double ll = mixture_log_likelihood(gs, c);
  ASSERT_TRUE(std::isfinite(ll));
  const double base = -1.5 * std::log(2 * std::numbers::pi);
  const double expect = base + std::log(0.5 * std::exp(-0.5 * 2500.0 + 0.5 * 2401.0) + 0.5) - 0.5 * 2401.0;
  EXPECT_NEAR(ll, expect, 1e-9);
}

TEST(MixtureLogLikelihood, RejectsUnnormalizedWeights) {
  const std::vector<Gaussian> gs{iso(0.5, Vec3::Zero(), 1.0), iso(0.6, Vec3::Zero(), 1.0)};
  EXPECT_THROW(mixture_log_likelihood(gs, cloud_of({{0, 0, 0}})), InvalidModelError);
}

TEST(MixtureLogLikelihood, EmptyCloudThrows) {
  const std::vector<Gaussian> gs{iso(1.0, Vec3::Zero(), 1.0)};
  EXPECT_THROW(mixture_log_likelihood(gs, PointCloud()), DomainError);
}

TEST(Posteriors, RowsSumToOneAndFavorNearComponent) {
  const std::vector<Gaussian> gs{iso(0.5, Vec3(-2, 0, 0), 0.5), iso(0.5, Vec3(2, 0, 0), 0.5)};
  const Eigen::MatrixXd g = posteriors(gs, cloud_of({{-2, 0, 0}, {2, 0, 0}, {0, 0, 0}}));
  for (Eigen::Index i = 0; i < g.rows(); ++i) EXPECT_NEAR(g.row(i).sum(), 1.0, 1e-12);
  EXPECT_GT(g(0, 0), 0.99);
  EXPECT_GT(g(1, 1), 0.99);
  EXPECT_NEAR(g(2, 0), 0.5, 1e-12);
}

TEST(Posteriors, ZeroWeightComponentGetsNothing) {
  const std::vector<Gaussian> gs{iso(1.0, Vec3::Zero(), 1.0), iso(0.0, Vec3::Zero(), 1.0)};
  const Eigen::MatrixXd g = posteriors(gs, cloud_of({{0.3, 0, 0}}));
  EXPECT_EQ(g(0, 1), 0.0);
  EXPECT_EQ(g(0, 0), 1.0);
}

TEST(HgmmTree, DefaultShapesFollowBranching) {
  const HgmmTree t({8, 4, 4, 4});
  EXPECT_EQ(t.depth(), 4);
  EXPECT_EQ(t.level_size(1), 8u);
  EXPECT_EQ(t.level_size(2), 32u);
  EXPECT_EQ(t.level_size(3), 128u);
  EXPECT_EQ(t.level_size(4), 512u);
  EXPECT_NO_THROW(t.validate());
}

TEST(HgmmTree, ChildrenAreContiguousBlocks) {
  std::mt19937_64 rng(1);
  const HgmmTree t = random_tree({2, 3}, rng);
  const auto kids = t.children(1, 1);
  ASSERT_EQ(kids.size(), 3u);
  EXPECT_EQ(&kids[0], &t.level(2)[3]);
}

TEST(HgmmTree, ValidateRejectsBadSizesAndWeights) {
  std::vector<std::vector<Gaussian>> lv{{iso(0.5, Vec3::Zero(), 1), iso(0.5, Vec3::Zero(), 1)}};
  EXPECT_THROW(HgmmTree({3}, lv), InvalidModelError);
  lv[0][1].weight = 0.6;
  EXPECT_THROW(HgmmTree({2}, lv), InvalidModelError);
  EXPECT_THROW(HgmmTree(std::vector<int>{}), InvalidModelError);
  EXPECT_THROW(HgmmTree(std::vector<int>{0}), InvalidModelError);
}

TEST(HgmmTree, ValidateRejectsCovarianceBelowFloor) {
  Gaussian g = iso(1.0, Vec3::Zero(), 1.0);
  g.cov(2, 2) = 1e-9;
  EXPECT_THROW(HgmmTree({1}, {{g}}), InvalidModelError);
}

TEST(HardPartition, MatchesPathEnumeration) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 30; ++t) {
    const HgmmTree tree = random_tree({3, 2, 2}, rng);
    const PointCloud cloud = random_cloud(40, rng, 1.5);
    for (int level = 1; level <= 3; ++level) {
      const Partition p = hard_partition(tree, cloud, level);
      for (std::size_t i = 0; i < cloud.size(); ++i) EXPECT_EQ(p.assignment[i], oracle_route(tree, cloud.point(i), level));
    }
  }
}

TEST(HardPartition, TiesGoToLowestIndex) {
  const HgmmTree tree({3});
  const Partition p = hard_partition(tree, cloud_of({{0, 0, 0}, {5, 5, 5}}), 1);
  EXPECT_EQ(p.assignment, (std::vector<std::size_t>{0, 0}));
}

TEST(HardPartition, LevelOutOfRangeThrows) {
  const HgmmTree tree({2});
  EXPECT_THROW(hard_partition(tree, cloud_of({{0, 0, 0}}), 2), DomainError);
  EXPECT_THROW(hard_partition(tree, cloud_of({{0, 0, 0}}), 0), DomainError);
}

TEST(DepthLogLikelihood, MatchesOracle) {
  std::mt19937_64 rng(13);
  for (int t = 0; t < 30; ++t) {
    const HgmmTree tree = random_tree({2, 3, 2}, rng);
    const PointCloud cloud = random_cloud(32, rng);
    for (int d = 1; d <= 3; ++d)
      EXPECT_LT(rel_err(depth_log_likelihood(tree, cloud, d), oracle_depth_ll(tree, cloud, d)), 1e-10);
  }
}

TEST(DepthLogLikelihood, SingleChildCopyOfParentRepeatsParentTerm) {
  // Each parent has one child identical to itself with weight 1, so level 2
  // scores every point against its own parent's Gaussian alone.
  const Gaussian a = iso(0.5, Vec3(-3, 0, 0), 1.0), b = iso(0.5, Vec3(3, 0, 0), 1.0);
  Gaussian ca = a, cb = b;
  ca.weight = cb.weight = 1.0;
  const HgmmTree tree({2, 1}, {{a, b}, {ca, cb}});
  const PointCloud c = cloud_of({{-3, 0, 0}, {3, 1, 0}, {2.5, 0, 0}});
  double expect = 0.0;
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Vec3 x = c.point(i);
    expect += gaussian_log_pdf(x.x() < 0 ? a : b, x);
  }
  EXPECT_NEAR(depth_log_likelihood(tree, c, 2), expect, 1e-12);
}

TEST(DepthLogLikelihood, EmptyNodesContributeZero) {
  std::mt19937_64 rng(2);
  const HgmmTree tree = random_tree({4, 2}, rng);
  const PointCloud one = cloud_of({{0.1, 0.2, 0.3}});
  EXPECT_LT(rel_err(depth_log_likelihood(tree, one, 2), oracle_depth_ll(tree, one, 2)), 1e-12);
}

TEST(FlattenLeaves, WeightsAreProductsAlongPath) {
  std::mt19937_64 rng(4);
  const HgmmTree tree = random_tree({2, 3, 2}, rng);
  const auto leaves = flatten_leaves(tree);
  ASSERT_EQ(leaves.size(), 12u);
  double total = 0.0;
  for (std::size_t j = 0; j < leaves.size(); ++j) {
    const std::size_t l2 = j / 2, l1 = l2 / 3;
    const double expect = tree.node(1, l1).weight * tree.node(2, l2).weight * tree.node(3, j).weight;
    EXPECT_NEAR(leaves[j].weight, expect, 1e-15);
    EXPECT_EQ(leaves[j].mean, tree.node(3, j).mean);
    total += leaves[j].weight;
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(SamplePoints, DeterministicPerSeed) {
  std::mt19937_64 rng(6);
  const HgmmTree tree = random_tree({2, 2}, rng);
  EXPECT_EQ(sample_points(tree, 100, 9).matrix(), sample_points(tree, 100, 9).matrix());
  EXPECT_NE(sample_points(tree, 100, 9).matrix(), sample_points(tree, 100, 10).matrix());
}

TEST(SamplePoints, SingleGaussianMoments) {
  Mat3 cov;
  cov << 2.0, 0.3, 0.0, 0.3, 1.0, -0.2, 0.0, -0.2, 0.5;
  const HgmmTree tree({1}, {{make_gaussian(1.0, Vec3(1, -2, 3), cov)}});
  const PointCloud s = sample_points(tree, 200000, 1);
  const Vec3 mean = s.centroid();
  EXPECT_LT((mean - Vec3(1, -2, 3)).cwiseAbs().maxCoeff(), 0.02);
  const auto centered = s.matrix().rowwise() - mean.transpose();
  const Mat3 emp = (centered.transpose() * centered) / static_cast<double>(s.size());
  EXPECT_LT((emp - cov).cwiseAbs().maxCoeff(), 0.03);
}

TEST(SamplePoints, ZeroWeightLeafNeverSampled) {
  const HgmmTree tree({2}, {{iso(1.0, Vec3::Zero(), 0.01), iso(0.0, Vec3(100, 0, 0), 0.01)}});
  const PointCloud s = sample_points(tree, 5000, 2);
  EXPECT_LT(s.matrix().col(0).maxCoeff(), 10.0);
}

TEST(SamplePoints, CountZeroThrows) { EXPECT_THROW(sample_points(HgmmTree({1}), 0, 0), DomainError); }
