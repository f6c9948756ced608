#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "pointgmm/autodiff.hpp"
#include "pointgmm/params.hpp"
#include "pointgmm/point_cloud.hpp"

namespace pointgmm {

struct PointNetConfig {
  std::size_t input_dim = 3;
  std::vector<std::size_t> widths{64, 128, 512};

  std::size_t output_dim() const { return widths.back(); }
  friend bool operator==(const PointNetConfig&, const PointNetConfig&) = default;
};

inline void init_pointnet(ParamSet& ps, const std::string& prefix, const PointNetConfig& cfg, std::mt19937_64& rng) {
  if (cfg.widths.empty()) throw InvalidModelError("pointnet needs at least one layer");
  std::size_t in = cfg.input_dim;
  for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
    add_linear(ps, prefix + ".l" + std::to_string(i), in, cfg.widths[i], rng);
    in = cfg.widths[i];
  }
}

/// Shared per-point MLP (ReLU between layers, linear last layer) then
/// column-wise max over points: N x input_dim -> 1 x widths.back().
inline ad::Var pointnet_encode(Binding& p, const std::string& prefix, ad::Var points, std::size_t layers) {
  if (points.rows() == 0) throw DomainError("pointnet_encode: empty point cloud");
  ad::Var x = points;
  for (std::size_t i = 0; i < layers; ++i) {
    x = linear(p, prefix + ".l" + std::to_string(i), x);
    if (i + 1 < layers) x = ad::relu(x);
  }
  return ad::max_pool_rows(x);
}

inline ad::Tensor cloud_tensor(const PointCloud& cloud) {
  return ad::Tensor(cloud.size(), 3, std::vector<double>(cloud.flat().begin(), cloud.flat().end()));
}

/// Per point (x, y, z) -> (sqrt(x^2 + y^2), z); unchanged by any rotation about z.
inline ad::Tensor invariant_features(const PointCloud& cloud) {
  ad::Tensor out(cloud.size(), 2);
  const auto& m = cloud.matrix();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    out(static_cast<std::size_t>(i), 0) = std::hypot(m(i, 0), m(i, 1));
    out(static_cast<std::size_t>(i), 1) = m(i, 2);
  }
  return out;
}

// ---- VAE ---------------------------------------------------------------------

struct LatentCode {
  ad::Var z_mu;
  ad::Var z_sigma;
  ad::Var z;
};

inline void init_vae_head(ParamSet& ps, std::size_t feature_dim, std::size_t latent_dim, std::mt19937_64& rng) {
  add_linear(ps, "vae.mu", feature_dim, latent_dim, rng);
  add_linear(ps, "vae.log_sigma", feature_dim, latent_dim, rng);
}

/// z = z_mu + eps * z_sigma with z_sigma = exp(raw). Pass an all-zero eps for evaluation mode.
inline LatentCode vae_head(Binding& p, ad::Var feature, const ad::Tensor& eps) {
  LatentCode out;
  out.z_mu = linear(p, "vae.mu", feature);
  out.z_sigma = ad::exp(linear(p, "vae.log_sigma", feature));
  if (!eps.same_shape(out.z_mu.value())) throw UsageError("vae_head: eps shape mismatch");
  out.z = ad::add(out.z_mu, ad::mul(p.tape().constant(eps), out.z_sigma));
  return out;
}

inline ad::Tensor standard_normal(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  ad::Tensor t(rows, cols);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

/// KL[N(mu, sigma^2) || N(0, I)] = 1/2 sum(mu^2 + sigma^2 - 1 - 2 log sigma).
inline ad::Var kl_divergence(ad::Var z_mu, ad::Var z_sigma) {
  ad::Var terms = ad::sub(ad::add(ad::square(z_mu), ad::square(z_sigma)),
                          ad::add_scalar(ad::scale(ad::log(z_sigma), 2.0), 1.0));
  return ad::scale(ad::sum(terms), 0.5);
}

// ---- registration encoders ------------------------------------------------

struct RegEncoderConfig {
  std::vector<std::size_t> widths{64, 128, 512};
  std::size_t transform_dim = 128;
  std::size_t shape_dim = 256;
  friend bool operator==(const RegEncoderConfig&, const RegEncoderConfig&) = default;
};

struct RegLatent {
  ad::Var z_t;
  ad::Var z_c;
};

inline void init_reg_encoders(ParamSet& ps, const RegEncoderConfig& cfg, std::mt19937_64& rng) {
  init_pointnet(ps, "enc_t", PointNetConfig{3, cfg.widths}, rng);
  add_linear(ps, "enc_t.head", cfg.widths.back(), cfg.transform_dim, rng);
  init_pointnet(ps, "enc_c", PointNetConfig{2, cfg.widths}, rng);
  add_linear(ps, "enc_c.head", cfg.widths.back(), cfg.shape_dim, rng);
}

/// Shape code from rotation-invariant features only.
inline ad::Var shape_encode(Binding& p, const PointCloud& centered, const RegEncoderConfig& cfg) {
  ad::Var feats = p.tape().constant(invariant_features(centered));
  return linear(p, "enc_c.head", pointnet_encode(p, "enc_c", feats, cfg.widths.size()));
}

/// Transformation code from Cartesian coordinates.
inline ad::Var transform_encode(Binding& p, const PointCloud& centered, const RegEncoderConfig& cfg) {
  ad::Var xyz = p.tape().constant(cloud_tensor(centered));
  return linear(p, "enc_t.head", pointnet_encode(p, "enc_t", xyz, cfg.widths.size()));
}

/// Both codes of an already-centered cloud; deterministic.
inline RegLatent reg_encode(Binding& p, const PointCloud& centered, const RegEncoderConfig& cfg) {
  require_nonempty(centered, "reg_encode");
  return RegLatent{transform_encode(p, centered, cfg), shape_encode(p, centered, cfg)};
}

}  // namespace pointgmm
