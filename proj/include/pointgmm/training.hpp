#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "pointgmm/decoder.hpp"
#include "pointgmm/encoder.hpp"
#include "pointgmm/io.hpp"
#include "pointgmm/params.hpp"
#include "pointgmm/rigid_transform.hpp"
#include "pointgmm/shapes.hpp"

namespace pointgmm {

struct TrainConfig {
  double lr = 1e-4;
  double lr_decay = 0.5;
  int lr_decay_every = 200;
  int epochs = 200;
  double kl_weight = 1.0;
  double kl_decay = 0.98;
  int kl_decay_every = 100;
  double translation_weight = 20.0;
  double rotation_weight = 10.0;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  double noise_sigma = 0.02;
  double coverage_low = 0.3;
  double coverage_high = 0.8;
  double max_rotation = std::numbers::pi;
  std::size_t points_per_cloud = 512;

  void validate() const {
    if (!(lr > 0.0 && lr_decay > 0.0 && kl_decay > 0.0 && kl_weight >= 0.0))
      throw DomainError("train config: rates must be positive");
    if (epochs < 1 || lr_decay_every < 1 || kl_decay_every < 1 || batch_size < 1)
      throw DomainError("train config: counts must be >= 1");
    if (!(coverage_low > 0.0 && coverage_low <= coverage_high && coverage_high <= 1.0))
      throw DomainError("train config: coverage must satisfy 0 < low <= high <= 1");
    if (!(noise_sigma >= 0.0) || !(max_rotation >= 0.0)) throw DomainError("train config: negative noise/rotation");
    if (points_per_cloud < 16) throw DomainError("train config: points_per_cloud must be >= 16");
  }

  /// lr * lr_decay^floor(epoch / lr_decay_every), epochs counted from 0.
  double lr_at(int epoch) const { return lr * std::pow(lr_decay, epoch / lr_decay_every); }
  double kl_weight_at(int epoch) const { return kl_weight * std::pow(kl_decay, epoch / kl_decay_every); }
};

inline io::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"lr_decay", c.lr_decay},
          {"lr_decay_every", c.lr_decay_every},
          {"epochs", c.epochs},
          {"kl_weight", c.kl_weight},
          {"kl_decay", c.kl_decay},
          {"kl_decay_every", c.kl_decay_every},
          {"translation_weight", c.translation_weight},
          {"rotation_weight", c.rotation_weight},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"noise_sigma", c.noise_sigma},
          {"coverage_low", c.coverage_low},
          {"coverage_high", c.coverage_high},
          {"max_rotation", c.max_rotation},
          {"points_per_cloud", c.points_per_cloud}};
}

/// Overrides fields present in `j`; unknown keys are rejected.
inline TrainConfig train_config_from_json(const io::json& j, TrainConfig c = {}) {
  for (const auto& [k, v] : j.items()) {
    if (k == "lr") c.lr = v.get<double>();
    else if (k == "lr_decay") c.lr_decay = v.get<double>();
    else if (k == "lr_decay_every") c.lr_decay_every = v.get<int>();
    else if (k == "epochs") c.epochs = v.get<int>();
    else if (k == "kl_weight") c.kl_weight = v.get<double>();
    else if (k == "kl_decay") c.kl_decay = v.get<double>();
    else if (k == "kl_decay_every") c.kl_decay_every = v.get<int>();
    else if (k == "translation_weight") c.translation_weight = v.get<double>();
    else if (k == "rotation_weight") c.rotation_weight = v.get<double>();
    else if (k == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (k == "seed") c.seed = v.get<std::uint64_t>();
    else if (k == "noise_sigma") c.noise_sigma = v.get<double>();
    else if (k == "coverage_low") c.coverage_low = v.get<double>();
    else if (k == "coverage_high") c.coverage_high = v.get<double>();
    else if (k == "max_rotation") c.max_rotation = v.get<double>();
    else if (k == "points_per_cloud") c.points_per_cloud = v.get<std::size_t>();
    else if (k == "model") continue;
    else throw ParseError("unknown train config key '" + k + "'");
  }
  return c;
}

inline io::json to_json(const DecoderConfig& c) {
  return {{"branching", c.branching}, {"latent_dim", c.latent_dim},       {"feature_dim", c.feature_dim},
          {"d_k", c.d_k},             {"use_attention", c.use_attention}, {"hierarchical", c.hierarchical}};
}

inline DecoderConfig decoder_config_from_json(const io::json& j) {
  DecoderConfig c;
  c.branching = j.at("branching").get<std::vector<int>>();
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.d_k = j.at("d_k").get<std::size_t>();
  c.use_attention = j.at("use_attention").get<bool>();
  c.hierarchical = j.at("hierarchical").get<bool>();
  c.validate();
  return c;
}

inline void check_params_match(const ParamSet& expected, const ParamSet& got) {
  for (const auto& [name, t] : expected.entries()) {
    if (!got.contains(name)) throw InvalidModelError("checkpoint lacks parameter '" + name + "'");
    if (!got.at(name).same_shape(t)) throw InvalidModelError("checkpoint parameter '" + name + "' has wrong shape");
  }
  if (got.size() != expected.size()) throw InvalidModelError("checkpoint has unexpected extra parameters");
}

// ---- VAE generation model --------------------------------------------------

struct VaeModel {
  PointNetConfig encoder;
  DecoderConfig decoder;
  ParamSet params;

  static VaeModel create(PointNetConfig enc, DecoderConfig dec, std::uint64_t seed) {
    VaeModel m{std::move(enc), std::move(dec), {}};
    std::mt19937_64 rng(derive_seed(seed, 0xe4c));
    init_pointnet(m.params, "enc", m.encoder, rng);
    init_vae_head(m.params, m.encoder.output_dim(), m.decoder.latent_dim, rng);
    m.params.merge(init_decoder_params(m.decoder, derive_seed(seed, 0xdec)));
    return m;
  }

  /// Scaled-down architecture for single-core runs.
  static VaeModel desk(std::vector<int> branching, std::uint64_t seed, bool hierarchical = true,
                       bool attention = true) {
    DecoderConfig dec;
    dec.branching = std::move(branching);
    dec.latent_dim = 32;
    dec.feature_dim = 64;
    dec.d_k = 16;
    dec.use_attention = attention;
    dec.hierarchical = hierarchical;
    return create(PointNetConfig{3, {32, 64, 128}}, dec, seed);
  }

  io::json to_json() const {
    return {{"format_version", io::kFormatVersion},
            {"kind", "vae"},
            {"encoder", {{"widths", encoder.widths}}},
            {"decoder", pointgmm::to_json(decoder)},
            {"params", io::params_to_json(params)}};
  }

  static VaeModel from_json(const io::json& j) {
    io::check_format_version(j);
    try {
      if (j.at("kind").get<std::string>() != "vae") throw ParseError("checkpoint is not a VAE model");
      VaeModel m;
      m.encoder = PointNetConfig{3, j.at("encoder").at("widths").get<std::vector<std::size_t>>()};
      m.decoder = decoder_config_from_json(j.at("decoder"));
      m.params = io::params_from_json(j.at("params"));
      check_params_match(create(m.encoder, m.decoder, 0).params, m.params);
      return m;
    } catch (const io::json::exception& e) {
      throw ParseError(std::string("malformed VAE checkpoint: ") + e.what());
    }
  }
};

struct GenerationLoss {
  ad::Var total;
  HgmmLoss hgmm;
  ad::Var kl;
  LatentCode latent;
};

/// L_g = L_hGMM + kl_weight * KL[N(z_mu, z_sigma^2) || N(0, I)].
inline GenerationLoss generation_loss(Binding& p, const VaeModel& m, const PointCloud& cloud, const ad::Tensor& eps,
                                      double kl_weight) {
  ad::Var pts = p.tape().constant(cloud_tensor(cloud));
  ad::Var feat = pointnet_encode(p, "enc", pts, m.encoder.widths.size());
  GenerationLoss out;
  out.latent = vae_head(p, feat, eps);
  out.hgmm = hgmm_loss(decode(p, out.latent.z, m.decoder), cloud);
  out.kl = kl_divergence(out.latent.z_mu, out.latent.z_sigma);
  out.total = ad::add(out.hgmm.total, ad::scale(out.kl, kl_weight));
  return out;
}

/// Evaluation-mode latent (z = z_mu).
inline ad::Tensor encode_mean(const VaeModel& m, const PointCloud& cloud) {
  ad::Tape tape;
  Binding p(tape, m.params);
  ad::Var feat = pointnet_encode(p, "enc", tape.constant(cloud_tensor(cloud)), m.encoder.widths.size());
  return linear(p, "vae.mu", feat).value();
}

struct EpochRecord {
  int epoch = 0;
  double loss_total = 0.0;
  std::vector<double> loss_hgmm;  // per depth
  double loss_kl = 0.0;
  double loss_t = 0.0;
  double loss_c = 0.0;
  double kl_weight = 0.0;
  double lr = 0.0;
};

inline void check_finite_loss(double v, const char* what, int epoch) {
  if (!std::isfinite(v))
    throw NumericError(std::string(what) + " became non-finite at epoch " + std::to_string(epoch));
}

/// One optimizer step over `batch`; returns the batch-mean record contribution.
inline EpochRecord generation_step(VaeModel& m, const std::vector<const PointCloud*>& batch,
                                   const std::vector<std::uint64_t>& eps_seeds, AdamState& adam,
                                   const TrainConfig& cfg, int epoch) {
  ParamSet grads = m.params.zeros_like();
  EpochRecord rec;
  rec.epoch = epoch;
  rec.kl_weight = cfg.kl_weight_at(epoch);
  rec.lr = cfg.lr_at(epoch);
  const double w = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ad::Tape tape;
    Binding p(tape, m.params);
    const ad::Tensor eps = standard_normal(1, m.decoder.latent_dim, eps_seeds[b]);
    const GenerationLoss loss = generation_loss(p, m, *batch[b], eps, rec.kl_weight);
    check_finite_loss(loss.total.value().item(), "generation loss", epoch);
    tape.backward(loss.total);
    p.accumulate_grads(grads, w);
    rec.loss_total += w * loss.total.value().item();
    rec.loss_kl += w * loss.kl.value().item();
    rec.loss_hgmm.resize(loss.hgmm.per_depth.size(), 0.0);
    for (std::size_t d = 0; d < loss.hgmm.per_depth.size(); ++d) rec.loss_hgmm[d] += w * loss.hgmm.per_depth[d];
  }
  adam_step(m.params, grads, adam, rec.lr);
  if (!m.params.all_finite()) throw NumericError("parameters became non-finite at epoch " + std::to_string(epoch));
  return rec;
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains on a fixed corpus; records are per-epoch means over all clouds.
inline std::vector<EpochRecord> train_vae(VaeModel& m, const std::vector<PointCloud>& corpus, const TrainConfig& cfg,
                                          const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (corpus.empty()) throw DomainError("train_vae: empty corpus");
  AdamState adam = AdamState::for_params(m.params);
  std::vector<std::size_t> order(corpus.size());
  std::vector<EpochRecord> history;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 0x5f1e, static_cast<std::uint64_t>(e)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord epoch_rec;
    epoch_rec.epoch = e;
    double seen = 0.0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<const PointCloud*> batch;
      std::vector<std::uint64_t> seeds;
      for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k) {
        batch.push_back(&corpus[order[k]]);
        seeds.push_back(derive_seed(cfg.seed, static_cast<std::uint64_t>(e) + 1, order[k]));
      }
      const EpochRecord r = generation_step(m, batch, seeds, adam, cfg, e);
      const double n = static_cast<double>(batch.size());
      epoch_rec.loss_total += n * r.loss_total;
      epoch_rec.loss_kl += n * r.loss_kl;
      epoch_rec.loss_hgmm.resize(r.loss_hgmm.size(), 0.0);
      for (std::size_t d = 0; d < r.loss_hgmm.size(); ++d) epoch_rec.loss_hgmm[d] += n * r.loss_hgmm[d];
      epoch_rec.kl_weight = r.kl_weight;
      epoch_rec.lr = r.lr;
      seen += n;
    }
    epoch_rec.loss_total /= seen;
    epoch_rec.loss_kl /= seen;
    for (auto& v : epoch_rec.loss_hgmm) v /= seen;
    history.push_back(epoch_rec);
    if (on_epoch) on_epoch(epoch_rec);
  }
  return history;
}

/// Samples `n` centered points from every shape.
inline std::vector<PointCloud> sample_corpus(const std::vector<ProceduralShape>& shapes, std::size_t n,
                                             std::uint64_t seed) {
  std::vector<PointCloud> out;
  out.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    PointCloud c = sample_shape(shapes[i], n, derive_seed(seed, 0x5a, i));
    out.push_back(c.translated(-c.centroid()));
  }
  return out;
}

/// Per-point leaf-level log-likelihood of `cloud` under the tree decoded from its mean latent.
/// A vanilla decoder has a single level, so this is the flat mixture log-likelihood.
inline double leaf_log_likelihood(const VaeModel& m, const PointCloud& cloud) {
  const HgmmTree tree = decode_tree(m.params, encode_mean(m, cloud), m.decoder);
  return depth_log_likelihood(tree, cloud, tree.depth()) / static_cast<double>(cloud.size());
}

inline double mean_leaf_log_likelihood(const VaeModel& m, const std::vector<PointCloud>& corpus) {
  double s = 0.0;
  for (const auto& c : corpus) s += leaf_log_likelihood(m, c);
  return s / static_cast<double>(corpus.size());
}

// ---- registration data -----------------------------------------------------

struct RegistrationPair {
  PointCloud input;       // partial, rotated, centered, noisy
  PointCloud canonical;   // full canonical sample (centroid at origin)
  PointCloud transformed; // full, = transform.apply(canonical)
  RigidTransform transform;
  std::vector<std::size_t> kept;  // indices of `input` rows within the full sample
};

/// Full canonical sample: surface points translated so their centroid is the origin.
inline PointCloud canonical_sample(const ProceduralShape& shape, std::size_t n, std::uint64_t seed) {
  PointCloud c = sample_shape(shape, n, seed);
  return c.translated(-c.centroid());
}

/// Ascending indices of the round(coverage * N) points nearest to row `seed_index`.
inline std::vector<std::size_t> ball_subset(const PointCloud& cloud, std::size_t seed_index, double coverage) {
  const std::size_t n = cloud.size();
  const auto k = static_cast<std::size_t>(std::llround(coverage * static_cast<double>(n)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (k >= n) return idx;
  const Vec3 c = cloud.point(seed_index);
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = (cloud.point(i) - c).squaredNorm();
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                   [&d](std::size_t a, std::size_t b) { return d[a] < d[b] || (d[a] == d[b] && a < b); });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline constexpr std::size_t kMinPartialPoints = 16;

/// Rotate about z, keep a contiguous patch, center it, add noise.
/// `phi` / `coverage` override the random draws when set.
inline RegistrationPair synthesize_pair(const PointCloud& canonical, const TrainConfig& cfg, std::uint64_t seed,
                                        std::optional<double> phi = std::nullopt,
                                        std::optional<double> coverage = std::nullopt) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double angle = phi ? *phi : cfg.max_rotation * (2.0 * unit(rng) - 1.0);
  const double f = coverage ? *coverage : cfg.coverage_low + (cfg.coverage_high - cfg.coverage_low) * unit(rng);
  const auto expected = static_cast<std::size_t>(std::llround(f * static_cast<double>(canonical.size())));
  if (expected < std::min(kMinPartialPoints, canonical.size()))
    throw DomainError("synthesize_pair: coverage keeps fewer than 16 points");

  RegistrationPair out;
  out.canonical = canonical;
  const PointCloud rotated = RigidTransform{angle, Vec3::Zero()}.apply(canonical);
  std::uniform_int_distribution<std::size_t> pick(0, canonical.size() - 1);
  out.kept = ball_subset(rotated, pick(rng), f);
  const PointCloud partial = rotated.subset(out.kept);
  const Vec3 v = -partial.centroid();
  out.transform = RigidTransform{wrap_angle(angle), v};
  out.transformed = rotated.translated(v);
  out.input = partial.translated(v);
  if (cfg.noise_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (Eigen::Index i = 0; i < out.input.matrix().rows(); ++i)
      for (int k = 0; k < 3; ++k) out.input.matrix()(i, k) += noise(rng);
  }
  return out;
}

// ---- registration model ----------------------------------------------------

struct RegModel {
  RegEncoderConfig encoder;
  DecoderConfig decoder;  // latent_dim == transform_dim + shape_dim
  std::size_t transform_hidden = 128;
  ParamSet params;

  static RegModel create(RegEncoderConfig enc, DecoderConfig dec, std::size_t transform_hidden, std::uint64_t seed) {
    dec.latent_dim = enc.transform_dim + enc.shape_dim;
    RegModel m{std::move(enc), std::move(dec), transform_hidden, {}};
    std::mt19937_64 rng(derive_seed(seed, 0x7e9));
    init_reg_encoders(m.params, m.encoder, rng);
    add_linear(m.params, "xform.hidden", m.encoder.transform_dim, transform_hidden, rng);
    add_linear(m.params, "xform.out", transform_hidden, 5, rng);
    m.params.merge(init_decoder_params(m.decoder, derive_seed(seed, 0xdec)));
    return m;
  }

  static RegModel desk(std::uint64_t seed) {
    DecoderConfig dec;
    dec.branching = {4, 4};
    dec.feature_dim = 64;
    dec.d_k = 16;
    return create(RegEncoderConfig{{32, 64, 128}, 32, 32}, dec, 64, seed);
  }

  io::json to_json() const {
    return {{"format_version", io::kFormatVersion},
            {"kind", "registration"},
            {"encoder",
             {{"widths", encoder.widths}, {"transform_dim", encoder.transform_dim}, {"shape_dim", encoder.shape_dim}}},
            {"decoder", pointgmm::to_json(decoder)},
            {"transform_hidden", transform_hidden},
            {"params", io::params_to_json(params)}};
  }

  static RegModel from_json(const io::json& j) {
    io::check_format_version(j);
    try {
      if (j.at("kind").get<std::string>() != "registration")
        throw ParseError("checkpoint is not a registration model");
      RegModel m;
      const auto& e = j.at("encoder");
      m.encoder = RegEncoderConfig{e.at("widths").get<std::vector<std::size_t>>(),
                                   e.at("transform_dim").get<std::size_t>(), e.at("shape_dim").get<std::size_t>()};
      m.decoder = decoder_config_from_json(j.at("decoder"));
      m.transform_hidden = j.at("transform_hidden").get<std::size_t>();
      m.params = io::params_from_json(j.at("params"));
      check_params_match(create(m.encoder, m.decoder, m.transform_hidden, 0).params, m.params);
      return m;
    } catch (const io::json::exception& e) {
      throw ParseError(std::string("malformed registration checkpoint: ") + e.what());
    }
  }
};

struct TransformPrediction {
  ad::Var rotation;     // 1 x 2 unit vector (cos, sin)
  ad::Var translation;  // 1 x 3
};

/// One-hidden-layer MLP on z_t -> (cos, sin) normalized onto the unit circle, and v.
inline TransformPrediction transform_head(Binding& p, ad::Var z_t) {
  ad::Var o = linear(p, "xform.out", ad::relu(linear(p, "xform.hidden", z_t)));
  ad::Var r = ad::slice_cols(o, 0, 2);
  ad::Var norm = ad::sqrt(ad::add_scalar(ad::sum(ad::square(r)), 1e-12));
  ad::Var inv = ad::div(p.tape().constant(ad::Tensor::scalar(1.0)), norm);
  return {ad::mul_scalar(r, inv), ad::slice_cols(o, 2, 5)};
}

/// 1 - cos(phi_hat - phi) from the predicted unit vector.
inline ad::Var rotation_loss(ad::Var rotation, double phi) {
  ad::Var target = rotation.tape().constant(ad::Tensor(1, 2, {std::cos(phi), std::sin(phi)}));
  return ad::add_scalar(ad::scale(ad::sum(ad::mul(rotation, target)), -1.0), 1.0);
}

/// sum |v_hat - v|.
inline ad::Var translation_loss(ad::Var translation, const Vec3& v) {
  ad::Var target = translation.tape().constant(ad::Tensor(1, 3, {v.x(), v.y(), v.z()}));
  return ad::sum(ad::abs(ad::sub(translation, target)));
}

struct TransformationPassLoss {
  ad::Var total;
  HgmmLoss hgmm;
  ad::Var translation;
  ad::Var rotation;
};

/// Centers `input`, then returns the transform target relative to that centering.
inline std::pair<PointCloud, Vec3> center_cloud(const PointCloud& cloud) {
  const Vec3 c = cloud.centroid();
  return {cloud.translated(-c), c};
}

/// L_t = L_hGMM(X_t, D(z_t + z_c)) + w1 * L1(v_hat, v) + w2 * L_cos(phi_hat, phi).
inline TransformationPassLoss transformation_pass(Binding& p, const RegModel& m, const RegistrationPair& pair,
                                                  const TrainConfig& cfg) {
  const auto [x, c] = center_cloud(pair.input);
  const RegLatent z = reg_encode(p, x, m.encoder);
  const ad::Var parts[] = {z.z_t, z.z_c};
  const DecodedTree theta = decode(p, ad::concat_cols(parts), m.decoder);
  TransformationPassLoss out;
  out.hgmm = hgmm_loss(theta, pair.transformed.translated(-c));
  const TransformPrediction pred = transform_head(p, z.z_t);
  out.translation = translation_loss(pred.translation, pair.transform.v - c);
  out.rotation = rotation_loss(pred.rotation, pair.transform.phi);
  out.total = ad::add(out.hgmm.total, ad::add(ad::scale(out.translation, cfg.translation_weight),
                                              ad::scale(out.rotation, cfg.rotation_weight)));
  return out;
}

/// L_c = L_hGMM(X_c, D(0 + z_c)).
inline HgmmLoss shape_pass(Binding& p, const RegModel& m, const RegistrationPair& pair) {
  const auto [x, c] = center_cloud(pair.input);
  ad::Var zero_t = p.tape().constant(ad::Tensor(1, m.encoder.transform_dim));
  const ad::Var parts[] = {zero_t, shape_encode(p, x, m.encoder)};
  return hgmm_loss(decode(p, ad::concat_cols(parts), m.decoder), pair.canonical);
}

struct RegistrationStepLoss {
  double loss_t = 0.0;
  double loss_c = 0.0;
  std::vector<double> loss_hgmm;
};

/// Transformation pass then shape pass, each followed by its own Adam step.
inline RegistrationStepLoss registration_step(RegModel& m, const std::vector<RegistrationPair>& batch,
                                              AdamState& adam, const TrainConfig& cfg, int epoch) {
  RegistrationStepLoss out;
  const double w = 1.0 / static_cast<double>(batch.size());
  const double lr = cfg.lr_at(epoch);
  {
    ParamSet grads = m.params.zeros_like();
    for (const auto& pair : batch) {
      ad::Tape tape;
      Binding p(tape, m.params);
      const auto loss = transformation_pass(p, m, pair, cfg);
      check_finite_loss(loss.total.value().item(), "transformation loss", epoch);
      tape.backward(loss.total);
      p.accumulate_grads(grads, w);
      out.loss_t += w * loss.total.value().item();
      out.loss_hgmm.resize(loss.hgmm.per_depth.size(), 0.0);
      for (std::size_t d = 0; d < loss.hgmm.per_depth.size(); ++d) out.loss_hgmm[d] += w * loss.hgmm.per_depth[d];
    }
    adam_step(m.params, grads, adam, lr);
  }
  {
    ParamSet grads = m.params.zeros_like();
    for (const auto& pair : batch) {
      ad::Tape tape;
      Binding p(tape, m.params);
      const auto loss = shape_pass(p, m, pair);
      check_finite_loss(loss.total.value().item(), "shape loss", epoch);
      tape.backward(loss.total);
      p.accumulate_grads(grads, w);
      out.loss_c += w * loss.total.value().item();
    }
    adam_step(m.params, grads, adam, lr);
  }
  if (!m.params.all_finite()) throw NumericError("parameters became non-finite at epoch " + std::to_string(epoch));
  return out;
}

namespace detail {

using CanonicalSampler = std::function<PointCloud(std::size_t index, std::uint64_t seed)>;

inline std::vector<EpochRecord> train_registration(RegModel& m, std::size_t count, const CanonicalSampler& sample,
                                                   const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (count == 0) throw DomainError("train_registration: empty corpus");
  AdamState adam = AdamState::for_params(m.params);
  std::vector<EpochRecord> history;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochRecord rec;
    rec.epoch = e;
    rec.lr = cfg.lr_at(e);
    double seen = 0.0;
    for (std::size_t s = 0; s < count; s += cfg.batch_size) {
      std::vector<RegistrationPair> batch;
      for (std::size_t k = s; k < std::min(count, s + cfg.batch_size); ++k) {
        const std::uint64_t ps = derive_seed(cfg.seed, static_cast<std::uint64_t>(e) + 1, k);
        batch.push_back(synthesize_pair(sample(k, derive_seed(ps, 1)), cfg, derive_seed(ps, 2)));
      }
      const auto r = registration_step(m, batch, adam, cfg, e);
      const double n = static_cast<double>(batch.size());
      rec.loss_t += n * r.loss_t;
      rec.loss_c += n * r.loss_c;
      rec.loss_hgmm.resize(r.loss_hgmm.size(), 0.0);
      for (std::size_t d = 0; d < r.loss_hgmm.size(); ++d) rec.loss_hgmm[d] += n * r.loss_hgmm[d];
      seen += n;
    }
    rec.loss_t /= seen;
    rec.loss_c /= seen;
    for (auto& v : rec.loss_hgmm) v /= seen;
    rec.loss_total = rec.loss_t + rec.loss_c;
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return history;
}

}  // namespace detail

/// Each epoch draws one fresh surface sample and pair per corpus shape.
inline std::vector<EpochRecord> train_registration(RegModel& m, const std::vector<ProceduralShape>& corpus,
                                                   const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  return detail::train_registration(
      m, corpus.size(),
      [&](std::size_t k, std::uint64_t seed) { return canonical_sample(corpus[k], cfg.points_per_cloud, seed); }, cfg,
      on_epoch);
}

/// Fixed canonical clouds (re-centered); each epoch draws a fresh pair per cloud.
inline std::vector<EpochRecord> train_registration(RegModel& m, const std::vector<PointCloud>& corpus,
                                                   const TrainConfig& cfg, const EpochCallback& on_epoch = {}) {
  std::vector<PointCloud> centered;
  for (const auto& c : corpus) centered.push_back(c.translated(-c.centroid()));
  return detail::train_registration(
      m, centered.size(), [&](std::size_t k, std::uint64_t) { return centered[k]; }, cfg, on_epoch);
}

// ---- metrics export ----------------------------------------------------------

/// `epoch,loss_total,loss_hgmm_d1..dD,` then `loss_kl,kl_weight,lr` (vae) or `loss_t,loss_c,lr` (registration).
inline std::string format_csv(const std::vector<EpochRecord>& history, bool registration) {
  const std::size_t D = history.empty() ? 0 : history.front().loss_hgmm.size();
  std::string out = "epoch,loss_total";
  for (std::size_t d = 1; d <= D; ++d) out += ",loss_hgmm_d" + std::to_string(d);
  out += registration ? ",loss_t,loss_c,lr\n" : ",loss_kl,kl_weight,lr\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + ',' + io::format_double(r.loss_total);
    for (double v : r.loss_hgmm) out += ',' + io::format_double(v);
    if (registration)
      out += ',' + io::format_double(r.loss_t) + ',' + io::format_double(r.loss_c);
    else
      out += ',' + io::format_double(r.loss_kl) + ',' + io::format_double(r.kl_weight);
    out += ',' + io::format_double(r.lr) + '\n';
  }
  return out;
}

}  // namespace pointgmm
