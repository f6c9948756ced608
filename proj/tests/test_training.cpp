#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "support.hpp"

using namespace pointgmm;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

VaeModel tiny_vae(std::uint64_t seed) {
  DecoderConfig dec;
  dec.branching = {2, 2};
  dec.latent_dim = 4;
  dec.feature_dim = 8;
  dec.d_k = 4;
  return VaeModel::create(PointNetConfig{3, {8, 8}}, dec, seed);
}

RegModel tiny_reg(std::uint64_t seed) {
  DecoderConfig dec;
  dec.branching = {2, 2};
  dec.feature_dim = 8;
  dec.d_k = 4;
  return RegModel::create(RegEncoderConfig{{8, 8}, 4, 4}, dec, 8, seed);
}

std::vector<PointCloud> tiny_corpus(std::size_t n, std::size_t points) {
  return sample_corpus(procedural_corpus({ShapeFamily::Table, ShapeFamily::Chair}, n, 3), points, 4);
}

}  // namespace

TEST(Schedule, LearningRateHalvesEvery200Epochs) {
  const TrainConfig cfg;
  for (int e : {0, 1, 199, 200, 399, 400, 1000})
    EXPECT_EQ(cfg.lr_at(e), 1e-4 * std::pow(0.5, e / 200)) << e;
  EXPECT_EQ(cfg.lr_at(199), 1e-4);
  EXPECT_EQ(cfg.lr_at(200), 0.5e-4);
}

TEST(Schedule, KlWeightDecaysEvery100Epochs) {
  const TrainConfig cfg;
  for (int e : {0, 99, 100, 250, 1000}) EXPECT_EQ(cfg.kl_weight_at(e), std::pow(0.98, e / 100)) << e;
}

TEST(TrainConfig, ValidationAndJsonRoundTrip) {
  TrainConfig cfg;
  cfg.coverage_low = 0.9;
  cfg.coverage_high = 0.5;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.lr = 0.0;
  EXPECT_THROW(cfg.validate(), DomainError);
  cfg = TrainConfig{};
  cfg.epochs = 17;
  cfg.seed = 99;
  const TrainConfig back = train_config_from_json(to_json(cfg));
  EXPECT_EQ(back.epochs, 17);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(back.lr, cfg.lr);
  EXPECT_THROW(train_config_from_json(io::json{{"learning_rate", 1.0}}), ParseError);
}

TEST(Adam, ConstantGradientDecreasesMonotonically) {
  ParamSet ps;
  ps.set("x", Tensor::scalar(1.0));
  ParamSet g;
  g.set("x", Tensor::scalar(1.0));
  AdamState st = AdamState::for_params(ps);
  double prev = 1.0;
  for (int i = 0; i < 100; ++i) {
    adam_step(ps, g, st, 1e-2);
    EXPECT_LT(ps.at("x").item(), prev);
    prev = ps.at("x").item();
  }
}

TEST(Adam, ZeroGradientLeavesParameters) {
  ParamSet ps;
  ps.set("x", Tensor(2, 2, 0.7));
  const ParamSet before = ps;
  AdamState st = AdamState::for_params(ps);
  for (int i = 0; i < 10; ++i) adam_step(ps, ps.zeros_like(), st, 0.1);
  EXPECT_EQ(ps, before);
}

TEST(Adam, ConvergesOnQuadratic) {
  ParamSet ps;
  ps.set("x", Tensor::scalar(1.0));
  AdamState st = AdamState::for_params(ps);
  int steps = 0;
  while (std::abs(ps.at("x").item()) >= 1e-3 && steps < 2000) {
    ParamSet g;
    g.set("x", Tensor::scalar(2.0 * ps.at("x").item()));
    adam_step(ps, g, st, 1e-2);
    ++steps;
  }
  EXPECT_LT(std::abs(ps.at("x").item()), 1e-3);
  EXPECT_LE(steps, 2000);
}

TEST(RigidTransform, GroupLaws) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  for (int t = 0; t < 100; ++t) {
    const RigidTransform a{u(rng), Vec3(u(rng), u(rng), u(rng))};
    const RigidTransform b{u(rng), Vec3(u(rng), u(rng), u(rng))};
    const Vec3 x(u(rng), u(rng), u(rng));
    EXPECT_LT((a.inverse().compose(a).apply(x) - x).norm(), 1e-12);
    EXPECT_LT((b.compose(a).apply(x) - b.apply(a.apply(x))).norm(), 1e-12);
    const RigidTransform id = a.inverse().compose(a);
    EXPECT_LT(std::abs(id.phi), 1e-12);
    EXPECT_LT(id.v.norm(), 1e-12);
  }
}

TEST(RigidTransform, WrapAngleRange) {
  EXPECT_EQ(wrap_angle(std::numbers::pi), std::numbers::pi);
  EXPECT_NEAR(wrap_angle(-std::numbers::pi), std::numbers::pi, 1e-15);
  EXPECT_NEAR(wrap_angle(3 * std::numbers::pi / 2), -std::numbers::pi / 2, 1e-15);
  EXPECT_NEAR(wrap_angle(0.25), 0.25, 1e-16);
}

TEST(SynthesizePair, Identities) {
  const PointCloud canon = canonical_sample(ProceduralShape::random(ShapeFamily::Chair, 5), 256, 6);
  EXPECT_LT(canon.centroid().norm(), 1e-12);
  TrainConfig cfg;
  cfg.noise_sigma = 0.0;
  const RegistrationPair p = synthesize_pair(canon, cfg, 7, 0.8, 0.5);
  EXPECT_EQ(p.input.size(), 128u);
  EXPECT_LT(p.input.centroid().norm(), 1e-12);
  EXPECT_NEAR(p.transform.phi, 0.8, 1e-15);
  // X_t = T X_c and the partial input rows are rows of X_t.
  EXPECT_LT((p.transform.apply(canon).matrix() - p.transformed.matrix()).cwiseAbs().maxCoeff(), 1e-12);
  for (std::size_t k = 0; k < p.kept.size(); ++k)
    EXPECT_LT((p.input.point(k) - p.transformed.point(p.kept[k])).norm(), 1e-12);
  EXPECT_TRUE(std::is_sorted(p.kept.begin(), p.kept.end()));
}

TEST(SynthesizePair, NoiseOnlyTouchesInput) {
  const PointCloud canon = canonical_sample(ProceduralShape::random(ShapeFamily::Table, 1), 200, 2);
  TrainConfig cfg;
  const RegistrationPair noisy = synthesize_pair(canon, cfg, 3);
  cfg.noise_sigma = 0.0;
  const RegistrationPair clean = synthesize_pair(canon, cfg, 3);
  EXPECT_EQ(noisy.transformed.matrix(), clean.transformed.matrix());
  EXPECT_EQ(noisy.kept, clean.kept);
  const double rms = std::sqrt((noisy.input.matrix() - clean.input.matrix()).squaredNorm() /
                               static_cast<double>(3 * noisy.input.size()));
  EXPECT_NEAR(rms, 0.02, 0.004);
}

TEST(SynthesizePair, RandomDrawsStayInRange) {
  const PointCloud canon = canonical_sample(ProceduralShape::random(ShapeFamily::Airplane, 2), 500, 3);
  TrainConfig cfg;
  cfg.max_rotation = std::numbers::pi / 6;
  double mean_cov = 0.0;
  for (std::uint64_t s = 0; s < 400; ++s) {
    const RegistrationPair p = synthesize_pair(canon, cfg, s);
    EXPECT_LE(std::abs(p.transform.phi), cfg.max_rotation);
    const double f = static_cast<double>(p.input.size()) / 500.0;
    EXPECT_GE(f, 0.3 - 1e-3);
    EXPECT_LE(f, 0.8 + 1e-3);
    mean_cov += f / 400.0;
  }
  EXPECT_NEAR(mean_cov, 0.55, 0.03);
}

TEST(SynthesizePair, TooFewPointsThrows) {
  const PointCloud canon = canonical_sample(ProceduralShape::unit_box(), 20, 1);
  EXPECT_THROW(synthesize_pair(canon, TrainConfig{}, 1, 0.0, 0.3), DomainError);
}

TEST(RegistrationLosses, ZeroWhenExactAndMaximalWhenAntipodal) {
  Tape t;
  const double phi = 0.9;
  Var r = t.constant(Tensor(1, 2, std::vector<double>{std::cos(phi), std::sin(phi)}));
  EXPECT_NEAR(rotation_loss(r, phi).value().item(), 0.0, 1e-15);
  EXPECT_NEAR(rotation_loss(r, phi + std::numbers::pi).value().item(), 2.0, 1e-15);
  Var v = t.constant(Tensor(1, 3, std::vector<double>{1, -2, 3}));
  EXPECT_EQ(translation_loss(v, Vec3(1, -2, 3)).value().item(), 0.0);
  EXPECT_EQ(translation_loss(v, Vec3(0, 0, 0)).value().item(), 6.0);
}

TEST(RegistrationLosses, GradientChecks) {
  const RegModel m = tiny_reg(1);
  const PointCloud canon = canonical_sample(ProceduralShape::random(ShapeFamily::Chair, 2), 16, 3);
  TrainConfig cfg;
  const RegistrationPair pair = synthesize_pair(canon, cfg, 4, 0.7, 1.0);
  double worst = 0.0;
  for (const auto& [name, value] : m.params.entries()) {
    auto lt = [&, name = name](Tape& t, Var w) {
      Binding p(t, m.params);
      p.bind(name, w);
      return transformation_pass(p, m, pair, cfg).total;
    };
    auto lc = [&, name = name](Tape& t, Var w) {
      Binding p(t, m.params);
      p.bind(name, w);
      return shape_pass(p, m, pair).total;
    };
    worst = std::max(worst, ad::grad_check(lt, value, 1e-6));
    worst = std::max(worst, ad::grad_check(lc, value, 1e-6));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(GenerationStep, LossEqualsSumOfTerms) {
  const VaeModel m = tiny_vae(2);
  const auto corpus = tiny_corpus(1, 64);
  Tape t;
  Binding p(t, m.params);
  const GenerationLoss loss = generation_loss(p, m, corpus[0], standard_normal(1, 4, 5), 0.3);
  double hg = 0.0;
  for (double d : loss.hgmm.per_depth) hg += d;
  EXPECT_NEAR(loss.total.value().item(), hg + 0.3 * loss.kl.value().item(), 1e-12);
  EXPECT_NEAR(loss.hgmm.total.value().item(), hg, 1e-12);
}

TEST(GenerationStep, GradientCheckThroughEncoder) {
  const VaeModel m = tiny_vae(3);
  const auto corpus = tiny_corpus(1, 12);
  const Tensor eps = standard_normal(1, 4, 6);
  double worst = 0.0;
  for (const auto& [name, value] : m.params.entries()) {
    auto f = [&, name = name](Tape& t, Var w) {
      Binding p(t, m.params);
      p.bind(name, w);
      return generation_loss(p, m, corpus[0], eps, 0.5).total;
    };
    worst = std::max(worst, ad::grad_check(f, value, 1e-6));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(TrainVae, ReproducibleTraces) {
  const auto corpus = tiny_corpus(4, 48);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;
  cfg.seed = 11;
  VaeModel a = tiny_vae(1), b = tiny_vae(1);
  const auto ha = train_vae(a, corpus, cfg), hb = train_vae(b, corpus, cfg);
  EXPECT_EQ(format_csv(ha, false), format_csv(hb, false));
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(ha.size(), 3u);
  EXPECT_EQ(ha[2].kl_weight, 1.0);
}

TEST(TrainVae, CsvHeader) {
  const auto corpus = tiny_corpus(2, 32);
  TrainConfig cfg;
  cfg.epochs = 1;
  VaeModel m = tiny_vae(1);
  const std::string csv = format_csv(train_vae(m, corpus, cfg), false);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss_total,loss_hgmm_d1,loss_hgmm_d2,loss_kl,kl_weight,lr");
}

TEST(TrainVae, EmptyCorpusThrows) {
  VaeModel m = tiny_vae(1);
  EXPECT_THROW(train_vae(m, {}, TrainConfig{}), DomainError);
}

TEST(TrainRegistration, ReproducibleAndCsvHeader) {
  const auto shapes = procedural_corpus({ShapeFamily::Chair}, 2, 1);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.points_per_cloud = 64;
  cfg.seed = 5;
  RegModel a = tiny_reg(2), b = tiny_reg(2);
  const auto ha = train_registration(a, shapes, cfg), hb = train_registration(b, shapes, cfg);
  const std::string csv = format_csv(ha, true);
  EXPECT_EQ(csv, format_csv(hb, true));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,loss_total,loss_hgmm_d1,loss_hgmm_d2,loss_t,loss_c,lr");
  EXPECT_EQ(ha[0].loss_total, ha[0].loss_t + ha[0].loss_c);
}

TEST(TrainRegistration, FixedCloudCorpus) {
  const auto clouds = tiny_corpus(2, 64);
  TrainConfig cfg;
  cfg.epochs = 1;
  RegModel m = tiny_reg(3);
  EXPECT_EQ(train_registration(m, clouds, cfg).size(), 1u);
}

TEST(Checkpoints, JsonRoundTripBitExact) {
  const VaeModel v = tiny_vae(4);
  const VaeModel v2 = VaeModel::from_json(io::json::parse(v.to_json().dump()));
  EXPECT_EQ(v.params, v2.params);
  EXPECT_EQ(v.decoder, v2.decoder);
  const RegModel r = tiny_reg(5);
  const RegModel r2 = RegModel::from_json(io::json::parse(r.to_json().dump()));
  EXPECT_EQ(r.params, r2.params);
  EXPECT_EQ(r.encoder, r2.encoder);
}

TEST(Checkpoints, WrongKindOrShapeRejected) {
  io::json j = tiny_vae(4).to_json();
  EXPECT_THROW(RegModel::from_json(j), ParseError);
  j["params"]["vae.mu.b"]["shape"] = {1, 3};
  j["params"]["vae.mu.b"]["data"] = {0.0, 0.0, 0.0};
  EXPECT_THROW(VaeModel::from_json(j), InvalidModelError);
}
