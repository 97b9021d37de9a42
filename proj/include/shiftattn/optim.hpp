#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "shiftattn/tensor.hpp"

namespace shiftattn {

/// Step-decay SGD settings: lr(epoch) = lr0 * drop_factor^-(epoch / drop_every).
struct SgdConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  std::size_t drop_every = 100;
  double drop_factor = 10.0;
  double weight_decay = 0.0;  // applied only to params registered as decayable
};

inline double lr_at(const SgdConfig& cfg, std::size_t epoch) {
  return cfg.lr0 *
         std::pow(cfg.drop_factor,
                  -static_cast<double>(epoch / cfg.drop_every));
}

/// Plain SGD with momentum: v <- mu*v + g; p <- p - lr*v.
template <class Real>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdConfig cfg = {}) : cfg_(cfg) {}

  void add_param(Tensor<Real> p, bool decay = false) {
    params_.push_back(std::move(p));
    decay_.push_back(decay);
    velocity_.emplace_back(params_.back().size(), Real(0));
  }

  void step(std::size_t epoch) {
    const Real lr = static_cast<Real>(lr_at(cfg_, epoch));
    const Real mu = static_cast<Real>(cfg_.momentum);
    const Real wd = static_cast<Real>(cfg_.weight_decay);
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
      auto& p = params_[pi];
      if (!p.has_grad()) continue;
      Real* value = p.data();
      const Real* grad = p.grad().data();
      Real* v = velocity_[pi].data();
      const bool use_wd = wd != Real(0) && decay_[pi];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const Real g = use_wd ? grad[i] + wd * value[i] : grad[i];
        v[i] = mu * v[i] + g;
        value[i] -= lr * v[i];
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  const SgdConfig& config() const { return cfg_; }
  std::size_t size() const { return params_.size(); }
  std::vector<Real>& velocity(std::size_t i) { return velocity_[i]; }

 private:
  SgdConfig cfg_;
  std::vector<Tensor<Real>> params_;
  std::vector<bool> decay_;
  std::vector<std::vector<Real>> velocity_;
};

}  // namespace shiftattn
