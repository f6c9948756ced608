#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>

#include "pointgmm/autodiff.hpp"
#include "pointgmm/errors.hpp"

namespace pointgmm {

/// Named trainable tensors, ordered by name for deterministic iteration.
class ParamSet {
 public:
  using Map = std::map<std::string, ad::Tensor>;

  void set(const std::string& name, ad::Tensor t) { params_[name] = std::move(t); }
  bool contains(const std::string& name) const { return params_.contains(name); }

  const ad::Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidModelError("missing parameter '" + name + "'");
    return it->second;
  }
  ad::Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidModelError("missing parameter '" + name + "'");
    return it->second;
  }

  const Map& entries() const noexcept { return params_; }
  Map& entries() noexcept { return params_; }
  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const {
    ParamSet out;
    for (const auto& [k, t] : params_) out.set(k, ad::Tensor(t.rows(), t.cols()));
    return out;
  }

  void merge(const ParamSet& other) {
    for (const auto& [k, t] : other.params_) params_[k] = t;
  }

  bool all_finite() const {
    for (const auto& [_, t] : params_)
      if (!t.all_finite()) return false;
    return true;
  }

  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  Map params_;
};

/// Parameters lifted onto a tape as variables, created lazily on first use.
class Binding {
 public:
  Binding(ad::Tape& tape, const ParamSet& params) : tape_(&tape), params_(&params) {}

  ad::Var operator[](const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    ad::Var v = tape_->variable(params_->at(name));
    vars_.emplace(name, v);
    return v;
  }

  /// Uses `v` for `name` instead of lifting the stored tensor.
  void bind(const std::string& name, ad::Var v) {
    if (!params_->at(name).same_shape(v.value())) throw UsageError("bind: shape mismatch for '" + name + "'");
    vars_.insert_or_assign(name, v);
  }

  ad::Tape& tape() const noexcept { return *tape_; }
  const ParamSet& params() const noexcept { return *params_; }

  /// Adds d(out)/d(param) into `grads` for every parameter touched during recording.
  void accumulate_grads(ParamSet& grads, double weight = 1.0) const {
    for (const auto& [name, v] : vars_) {
      const ad::Tensor g = tape_->grad(v);
      ad::Tensor& dst = grads.at(name);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += weight * g[i];
    }
  }

 private:
  ad::Tape* tape_;
  const ParamSet* params_;
  std::map<std::string, ad::Var> vars_;
};

/// Glorot-uniform weight in +-sqrt(6 / (fan_in + fan_out)).
inline ad::Tensor glorot(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  ad::Tensor w(fan_in, fan_out);
  for (auto& v : w.values()) v = u(rng);
  return w;
}

/// Registers `prefix.w` (in x out) and `prefix.b` (1 x out, zeros).
inline void add_linear(ParamSet& ps, const std::string& prefix, std::size_t in, std::size_t out,
                       std::mt19937_64& rng) {
  ps.set(prefix + ".w", glorot(in, out, rng));
  ps.set(prefix + ".b", ad::Tensor(1, out));
}

inline ad::Var linear(Binding& p, const std::string& prefix, ad::Var x) {
  return ad::add_bias(ad::matmul(x, p[prefix + ".w"]), p[prefix + ".b"]);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  ParamSet m;
  ParamSet v;
  std::uint64_t step = 0;

  static AdamState for_params(const ParamSet& p) { return AdamState{p.zeros_like(), p.zeros_like(), 0}; }
};

/// One bias-corrected Adam update in place. Zero gradients leave parameters unchanged.
inline void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr,
                      const AdamConfig& cfg = {}) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, theta] : params.entries()) {
    const ad::Tensor& g = grads.at(name);
    ad::Tensor& m = state.m.at(name);
    ad::Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      theta[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
    }
  }
}

}  // namespace pointgmm
