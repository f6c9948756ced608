#pragma once

// Latent vector -> hGMM tree. Each level's node features come from a
// one-hidden-layer MLP split of the previous level's features; from the second
// split on, siblings first exchange information through scaled dot-product
// attention. A per-level extraction MLP maps every node feature to 16 raw
// Gaussian parameters (logit, mean, 3x3 basis, sqrt eigenvalues).

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pointgmm/autodiff.hpp"
#include "pointgmm/hgmm.hpp"
#include "pointgmm/params.hpp"

namespace pointgmm {

inline constexpr std::size_t kRawGaussianSize = 16;

struct DecoderConfig {
  std::vector<int> branching{8, 4, 4, 4};
  std::size_t latent_dim = 256;
  std::size_t feature_dim = 512;
  std::size_t d_k = 64;
  bool use_attention = true;
  /// false: vanilla GMM, all leaves emitted at once as one flat mixture.
  bool hierarchical = true;

  void validate() const {
    if (branching.empty()) throw InvalidModelError("decoder branching must be non-empty");
    for (int b : branching)
      if (b < 1) throw InvalidModelError("decoder branching factors must be >= 1");
    if (feature_dim < 1 || d_k < 1 || latent_dim < 1) throw InvalidModelError("decoder dims must be >= 1");
  }

  /// Branching of the emitted tree ([prod(branching)] in vanilla mode).
  std::vector<int> output_branching() const {
    if (hierarchical) return branching;
    return {std::accumulate(branching.begin(), branching.end(), 1, std::multiplies<int>())};
  }

  friend bool operator==(const DecoderConfig&, const DecoderConfig&) = default;
};

inline std::string level_prefix(const char* kind, std::size_t level) {
  return std::string("dec.") + kind + std::to_string(level);
}

inline ParamSet init_decoder_params(const DecoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamSet ps;
  const auto br = cfg.output_branching();
  const std::size_t h = cfg.feature_dim;
  for (std::size_t l = 1; l <= br.size(); ++l) {
    const std::size_t in = l == 1 ? cfg.latent_dim : h;
    const auto fan = static_cast<std::size_t>(br[l - 1]);
    if (l > 1 && cfg.use_attention) {
      add_linear(ps, level_prefix("attn", l) + ".q", h, cfg.d_k, rng);
      add_linear(ps, level_prefix("attn", l) + ".k", h, cfg.d_k, rng);
      add_linear(ps, level_prefix("attn", l) + ".v", h, h, rng);
    }
    add_linear(ps, level_prefix("split", l) + ".hidden", in, h, rng);
    add_linear(ps, level_prefix("split", l) + ".out", h, fan * h, rng);
    add_linear(ps, level_prefix("extract", l) + ".hidden", h, h, rng);
    add_linear(ps, level_prefix("extract", l) + ".out", h, kRawGaussianSize, rng);
    // sqrt-eigenvalue bias so initial covariances are 0.25 * I.
    ad::Tensor& b = ps.at(level_prefix("extract", l) + ".out.b");
    for (std::size_t c = 13; c < 16; ++c) b[c] = 0.5;
  }
  return ps;
}

/// One-hidden-layer MLP mapping each of M parent features to `fan_out` children: (M * fan_out) x h.
inline ad::Var mlp_split(Binding& p, ad::Var parents, std::size_t fan_out, std::size_t level) {
  const std::string pre = level_prefix("split", level);
  ad::Var hidden = ad::relu(linear(p, pre + ".hidden", parents));
  ad::Var out = linear(p, pre + ".out", hidden);
  const std::size_t h = out.cols() / fan_out;
  return ad::reshape(out, parents.rows() * fan_out, h);
}

/// Self-attention within consecutive sibling groups of `group_size` rows.
inline ad::Var attention_split(Binding& p, ad::Var features, std::size_t group_size, std::size_t level) {
  const std::string pre = level_prefix("attn", level);
  ad::Var q = linear(p, pre + ".q", features);
  ad::Var k = linear(p, pre + ".k", features);
  ad::Var v = linear(p, pre + ".v", features);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  std::vector<ad::Var> groups;
  for (std::size_t r = 0; r < features.rows(); r += group_size) {
    ad::Var qg = ad::slice_rows(q, r, r + group_size);
    ad::Var kg = ad::slice_rows(k, r, r + group_size);
    ad::Var vg = ad::slice_rows(v, r, r + group_size);
    ad::Var alpha = ad::softmax(ad::scale(ad::matmul(qg, ad::transpose(kg)), inv_sqrt_dk), 1);
    groups.push_back(ad::matmul(alpha, vg));
  }
  return ad::concat_rows(groups);
}

/// Node features (M x h) -> raw Gaussian parameters (M x 16).
inline ad::Var extract_gaussian(Binding& p, ad::Var features, std::size_t level) {
  const std::string pre = level_prefix("extract", level);
  return linear(p, pre + ".out", ad::relu(linear(p, pre + ".hidden", features)));
}

/// Differentiable parameters of one tree level.
struct DecodedLevel {
  ad::Var log_weight;  // K x 1, log-softmax within sibling groups
  ad::Var mean;        // K x 3
  ad::Var basis;       // K x 9, orthonormal rows
  ad::Var eigenvalues; // K x 3, >= kEigenFloor
  std::size_t group_size = 1;

  std::size_t size() const { return log_weight.rows(); }
};

/// raw (K x 16) -> weights/means/covariances, softmax over each group of `group_size`.
inline DecodedLevel assemble_gaussians(ad::Var raw, std::size_t group_size) {
  const std::size_t K = raw.rows();
  if (group_size == 0 || K % group_size != 0) throw UsageError("assemble_gaussians: bad sibling group size");
  DecodedLevel out;
  out.group_size = group_size;
  ad::Var logits = ad::reshape(ad::slice_cols(raw, 0, 1), K / group_size, group_size);
  out.log_weight = ad::reshape(ad::log_softmax_rows(logits), K, 1);
  out.mean = ad::slice_cols(raw, 1, 4);
  out.basis = ad::gram_schmidt(ad::slice_cols(raw, 4, 13));
  out.eigenvalues = ad::clamp_min(ad::square(ad::slice_cols(raw, 13, 16)), kEigenFloor);
  return out;
}

/// Detached Gaussian j of a decoded level: Sigma = U^T diag(lambda) U.
inline Gaussian detach_gaussian(const DecodedLevel& lvl, std::size_t j) {
  const ad::Tensor& lw = lvl.log_weight.value();
  const ad::Tensor& m = lvl.mean.value();
  const ad::Tensor& u = lvl.basis.value();
  const ad::Tensor& lam = lvl.eigenvalues.value();
  Mat3 U;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) U(r, c) = u(j, static_cast<std::size_t>(3 * r + c));
  const Vec3 l(lam(j, 0), lam(j, 1), lam(j, 2));
  const Mat3 cov = U.transpose() * l.asDiagonal() * U;
  return make_gaussian(std::min(1.0, std::exp(lw(j, 0))), Vec3(m(j, 0), m(j, 1), m(j, 2)), cov);
}

struct DecodedTree {
  std::vector<int> branching;
  std::vector<DecodedLevel> levels;

  int depth() const { return static_cast<int>(levels.size()); }

  HgmmTree detach() const {
    std::vector<std::vector<Gaussian>> out;
    for (const auto& lvl : levels) {
      std::vector<Gaussian> gs;
      for (std::size_t j = 0; j < lvl.size(); ++j) gs.push_back(detach_gaussian(lvl, j));
      out.push_back(std::move(gs));
    }
    return HgmmTree(branching, std::move(out));
  }
};

/// z (1 x latent_dim) -> differentiable tree.
inline DecodedTree decode(Binding& p, ad::Var z, const DecoderConfig& cfg) {
  cfg.validate();
  if (z.rows() != 1 || z.cols() != cfg.latent_dim)
    throw InvalidModelError("decode: latent has " + std::to_string(z.cols()) + " entries, config expects " +
                            std::to_string(cfg.latent_dim));
  DecodedTree tree;
  tree.branching = cfg.output_branching();
  ad::Var features = z;
  for (std::size_t l = 1; l <= tree.branching.size(); ++l) {
    if (l > 1 && cfg.use_attention)
      features = attention_split(p, features, static_cast<std::size_t>(tree.branching[l - 2]), l);
    features = mlp_split(p, features, static_cast<std::size_t>(tree.branching[l - 1]), l);
    tree.levels.push_back(assemble_gaussians(extract_gaussian(p, features, l),
                                             static_cast<std::size_t>(tree.branching[l - 1])));
  }
  return tree;
}

/// Non-differentiable convenience: decode a latent tensor into an HgmmTree.
inline HgmmTree decode_tree(const ParamSet& params, const ad::Tensor& z, const DecoderConfig& cfg) {
  ad::Tape tape;
  Binding p(tape, params);
  return decode(p, tape.constant(z), cfg).detach();
}

struct HgmmLoss {
  ad::Var total;                      // -(1/|X|) sum_d l_d
  std::vector<double> per_depth;      // -(1/|X|) l_d for d = 1..D
};

/// Negative hard-partition log-likelihood summed over all depths, per point.
/// Partition assignments come from the current forward values and are constants.
inline HgmmLoss hgmm_loss(const DecodedTree& tree, const PointCloud& cloud) {
  require_nonempty(cloud, "hgmm_loss");
  const std::vector<double> pts(cloud.flat().begin(), cloud.flat().end());
  const double inv_n = 1.0 / static_cast<double>(cloud.size());
  HgmmLoss out;
  const HgmmTree detached = tree.depth() > 1 ? tree.detach() : HgmmTree();
  std::vector<ad::Var> terms;
  for (int d = 1; d <= tree.depth(); ++d) {
    std::vector<std::size_t> group(cloud.size(), 0);
    if (d > 1) group = hard_partition(detached, cloud, d - 1).assignment;
    const auto& lvl = tree.levels[static_cast<std::size_t>(d - 1)];
    ad::Var ll = ad::mixture_log_likelihood(lvl.log_weight, lvl.mean, lvl.basis, lvl.eigenvalues, pts, group,
                                            lvl.group_size);
    out.per_depth.push_back(-ll.value().item() * inv_n);
    terms.push_back(ll);
  }
  ad::Var sum = ad::sum(ad::concat_rows(terms));
  out.total = ad::scale(sum, -inv_n);
  return out;
}

}  // namespace pointgmm
