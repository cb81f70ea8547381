// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "m2s2l/autodiff.hpp"
#include "m2s2l/errors.hpp"

namespace m2s2l {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// lr * factor^(floor(epoch / every))
struct StepDecay {
  double factor = 0.5;
  std::size_t every = 20;
  double at(double base_lr, std::size_t epoch) const {
    return every == 0 ? base_lr : base_lr * std::pow(factor, double(epoch / every));
  }
};

template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore<T>& store, AdamConfig cfg) : cfg_(cfg) {
    for (const auto& p : store) {
      m_.emplace_back(p.value.shape());
      v_.emplace_back(p.value.shape());
    }
  }

  // One update from the gradients currently stored in the parameters.
  void step(ParamStore<T>& store, double lr) {
    require(store.count() == m_.size(), "Adam: parameter count changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t id = 0; id < store.count(); ++id) {
      auto& p = store[id];
      auto& m = m_[id];
      auto& v = v_[id];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = double(p.grad[i]);
        const double mi = cfg_.beta1 * double(m[i]) + (1 - cfg_.beta1) * g;
        const double vi = cfg_.beta2 * double(v[i]) + (1 - cfg_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        p.value[i] -= static_cast<T>(lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps));
      }
    }
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& first_moments() const { return m_; }
  const std::vector<Tensor<T>>& second_moments() const { return v_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::uint64_t t_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace m2s2l
