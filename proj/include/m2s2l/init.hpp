// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "m2s2l/tensor.hpp"

namespace m2s2l {

// Seeded parameter initializer. Values are drawn in double precision and then
// cast, so float and double models built from the same seed agree.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> normal(Shape shape, double stddev) {
    std::normal_distribution<double> d(0.0, stddev);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(d(rng_));
    return t;
  }

  template <typename T>
  Tensor<T> uniform(Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<T> t(std::move(shape));
    for (auto& v : t.vec()) v = static_cast<T>(d(rng_));
    return t;
  }

  // log of a log-uniform draw in [lo, hi]
  template <typename T>
  Tensor<T> log_uniform_log(Shape shape, double lo, double hi) {
    return uniform<T>(std::move(shape), std::log(lo), std::log(hi));
  }

  template <typename T>
  static Tensor<T> constant(Shape shape, double v) {
    return Tensor<T>(std::move(shape), static_cast<T>(v));
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

}  // namespace m2s2l
