#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "pointgmm/rigid_transform.hpp"
#include "pointgmm/training.hpp"

namespace pointgmm {

/// Canonical -> input-frame transform of `cloud`, centering shift included.
inline RigidTransform estimate_canonical(const PointCloud& cloud, const RegModel& m) {
  require_nonempty(cloud, "estimate_canonical");
  const auto [x, c] = center_cloud(cloud);
  ad::Tape tape;
  Binding p(tape, m.params);
  const TransformPrediction pred = transform_head(p, transform_encode(p, x, m.encoder));
  const ad::Tensor& r = pred.rotation.value();
  const ad::Tensor& v = pred.translation.value();
  return RigidTransform{wrap_angle(std::atan2(r[1], r[0])), Vec3(v[0], v[1], v[2]) + c};
}

/// Maps source coordinates into target coordinates via the canonical frame.
inline RigidTransform register_clouds(const PointCloud& source, const PointCloud& target, const RegModel& m) {
  return estimate_canonical(target, m).compose(estimate_canonical(source, m).inverse());
}

/// (1/N) sum ||T s_i - t_i||^2 over index-paired points.
inline double registration_mse(const PointCloud& source, const PointCloud& target, const RigidTransform& t) {
  if (source.size() != target.size())
    throw DomainError("registration_mse: source has " + std::to_string(source.size()) + " points, target " +
                      std::to_string(target.size()));
  require_nonempty(source, "registration_mse");
  const PointCloud moved = t.apply(source);
  return (moved.matrix() - target.matrix()).rowwise().squaredNorm().mean();
}

struct RegistrationEval {
  std::vector<double> mse;           // model
  std::vector<double> identity_mse;  // T = identity
  std::vector<double> random_mse;    // T = {phi ~ U(-pi, pi], 0}
  std::vector<double> angle_error;   // |wrap(phi_hat - phi_true)|
  std::vector<double> true_angle;    // |phi_true| of the relative transform

  static double mean(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }
};

struct EvalPair {
  RegistrationPair source;
  RegistrationPair target;
  RigidTransform truth;  // source frame -> target frame
};

/// Two independent partial views of one canonical sample.
inline EvalPair make_eval_pair(const ProceduralShape& shape, const TrainConfig& cfg, std::uint64_t seed) {
  const PointCloud canon = canonical_sample(shape, cfg.points_per_cloud, derive_seed(seed, 1));
  EvalPair p{synthesize_pair(canon, cfg, derive_seed(seed, 2)), synthesize_pair(canon, cfg, derive_seed(seed, 3)), {}};
  p.truth = p.target.transform.compose(p.source.transform.inverse());
  return p;
}

/// Registers `count` held-out pairs; MSE is measured on the full transformed clouds.
inline RegistrationEval evaluate_registration(const RegModel& m, const std::vector<ProceduralShape>& shapes,
                                              const TrainConfig& cfg, std::size_t count, std::uint64_t seed) {
  if (shapes.empty()) throw DomainError("evaluate_registration: no shapes");
  RegistrationEval out;
  std::mt19937_64 rng(derive_seed(seed, 0x7a4d));
  std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
  for (std::size_t i = 0; i < count; ++i) {
    const EvalPair pair = make_eval_pair(shapes[i % shapes.size()], cfg, derive_seed(seed, i));
    const RigidTransform est = register_clouds(pair.source.input, pair.target.input, m);
    out.mse.push_back(registration_mse(pair.source.transformed, pair.target.transformed, est));
    out.identity_mse.push_back(
        registration_mse(pair.source.transformed, pair.target.transformed, RigidTransform::identity()));
    out.random_mse.push_back(
        registration_mse(pair.source.transformed, pair.target.transformed, RigidTransform{angle(rng), Vec3::Zero()}));
    out.angle_error.push_back(std::abs(wrap_angle(est.phi - pair.truth.phi)));
    out.true_angle.push_back(std::abs(pair.truth.phi));
  }
  return out;
}

}  // namespace pointgmm
