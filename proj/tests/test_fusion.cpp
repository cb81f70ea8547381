// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gradcheck.hpp"
#include "m2s2l/fusion_memory_decode.hpp"
#include "m2s2l/optim.hpp"

namespace m2s2l {
namespace {

using testing::check_input_gradients;
using testing::check_param_gradients;
using testing::random_projection;
using testing::random_tensor;
using V = Var<double>;

TEST(Fuse, ZeroTemporalIsLayerNormOfSpatial) {
  ParamStore<double> store;
  Initializer init(1);
  FusionDecomposer<double> fd(store, "fusion", 6, true, init);
  auto g = random_tensor({2, 5, 6}, 2);
  Session<double> ss(store, false);
  auto a = fd.fuse(ss, V::constant(g), V::constant(Tensor<double>({2, 5, 6}))).value();
  auto b = fd.fuse(ss, V::constant(Tensor<double>({2, 5, 6})), V::constant(g)).value();
  EXPECT_EQ(a, b);
}

TEST(Fuse, MatchesDirectStatistics) {
  ParamStore<double> store;
  Initializer init(1);
  FusionDecomposer<double> fd(store, "fusion", 6, true, init);
  auto g = random_tensor({3, 4, 6}, 3, 2.0), h = random_tensor({3, 4, 6}, 4);
  Session<double> ss(store, false);
  auto f = fd.fuse(ss, V::constant(g), V::constant(h)).value();
  for (std::size_t r = 0; r < 12; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 6; ++c) mean += g[r * 6 + c] + h[r * 6 + c];
    mean /= 6;
    for (std::size_t c = 0; c < 6; ++c) var += std::pow(g[r * 6 + c] + h[r * 6 + c] - mean, 2);
    var /= 6;
    double out_mean = 0, out_var = 0;
    for (std::size_t c = 0; c < 6; ++c) {
      const double expect = (g[r * 6 + c] + h[r * 6 + c] - mean) / std::sqrt(var + 1e-5);
      EXPECT_NEAR(f[r * 6 + c], expect, 1e-6);
      out_mean += f[r * 6 + c] / 6;
    }
    for (std::size_t c = 0; c < 6; ++c) out_var += std::pow(f[r * 6 + c] - out_mean, 2) / 6;
    EXPECT_NEAR(out_mean, 0.0, 1e-9);
    EXPECT_NEAR(out_var, 1.0, 1e-3);
  }
}

TEST(Fuse, ShapeMismatchIsContractError) {
  ParamStore<double> store;
  Initializer init(1);
  FusionDecomposer<double> fd(store, "fusion", 6, true, init);
  Session<double> ss(store, false);
  EXPECT_THROW(fd.fuse(ss, V::constant(Tensor<double>({2, 5, 6})), V::constant(Tensor<double>({2, 4, 6}))),
               ContractError);
}

void set_gate_logits(ParamStore<double>& store, double bias) {
  store.get("fusion.mlp_common.w2").value.fill(0.0);
  store.get("fusion.mlp_common.b2").value.fill(bias);
}

TEST(Decompose, ZeroLogitsHalveTheFeature) {
  ParamStore<double> store;
  Initializer init(2);
  FusionDecomposer<double> fd(store, "fusion", 4, true, init);
  set_gate_logits(store, 0.0);
  auto f = random_tensor({3, 4}, 3);
  Session<double> ss(store, false);
  auto out = fd.decompose(ss, V::constant(f));
  for (std::size_t i = 0; i < f.size(); ++i) {
    EXPECT_EQ(out.gate.value()[i], 0.5);
    EXPECT_EQ(out.f_common.value()[i], f[i] / 2);
  }
}

TEST(Decompose, SaturatedGatePassesEverything) {
  ParamStore<double> store;
  Initializer init(2);
  FusionDecomposer<double> fd(store, "fusion", 4, true, init);
  set_gate_logits(store, 40.0);
  auto f = random_tensor({3, 4}, 4);
  Session<double> ss(store, false);
  auto out = fd.decompose(ss, V::constant(f));
  EXPECT_LT(max_abs_diff(out.f_common.value(), f), 1e-12);
  for (double v : out.residual.value().vec()) EXPECT_LT(std::abs(v), 1e-12);
}

TEST(Decompose, CommonPlusResidualIsExactAndGateInOpenInterval) {
  ParamStore<double> store;
  Initializer init(3);
  FusionDecomposer<double> fd(store, "fusion", 8, true, init);
  for (unsigned seed = 0; seed < 10; ++seed) {
    auto f = random_tensor({2, 6, 8}, seed, 3.0);
    Session<double> ss(store, false);
    auto out = fd.decompose(ss, V::constant(f));
    for (std::size_t i = 0; i < f.size(); ++i) {
      EXPECT_DOUBLE_EQ(out.f_common.value()[i] + out.residual.value()[i], f[i]);
      EXPECT_GT(out.gate.value()[i], 0.0);
      EXPECT_LT(out.gate.value()[i], 1.0);
    }
    EXPECT_EQ(out.f_app.shape(), f.shape());
    EXPECT_EQ(out.f_motion.shape(), f.shape());
  }
}

TEST(Decompose, DisabledPassesFusedFeatureThrough) {
  ParamStore<double> store;
  Initializer init(3);
  FusionDecomposer<double> fd(store, "fusion", 8, false, init);
  EXPECT_FALSE(store.contains("fusion.mlp_common.w1"));
  auto f = V::constant(random_tensor({2, 8}, 5));
  Session<double> ss(store, false);
  auto out = fd.decompose(ss, f);
  EXPECT_EQ(out.f_app.value(), f.value());
  EXPECT_EQ(out.f_motion.value(), f.value());
  EXPECT_EQ(out.f_common.value(), f.value());
}

TEST(Decompose, GradientsMatchFiniteDifferences) {
  ParamStore<double> store;
  Initializer init(4);
  FusionDecomposer<double> fd(store, "fusion", 4, true, init);
  auto g = random_tensor({2, 3, 4}, 6), h = random_tensor({2, 3, 4}, 7);
  auto obj = [&](Session<double>& ss, const V& a, const V& b) {
    auto out = fd.decompose(ss, fd.fuse(ss, a, b));
    return ops::add(random_projection(out.f_app, 1),
                    ops::add(random_projection(out.f_motion, 2), random_projection(out.f_common, 3)));
  };
  auto r = check_input_gradients(
      [&](const std::vector<V>& v) {
        Session<double> ss(store, false);
        return obj(ss, v[0], v[1]);
      },
      {g, h});
  EXPECT_LT(r.rel_error, 1e-3);
  auto rp = check_param_gradients(store, [&](Session<double>& ss) { return obj(ss, V::constant(g), V::constant(h)); });
  EXPECT_LT(rp.rel_error, 1e-3);
}

Tensor<double> unit_rows(Tensor<double> t) {
  const std::size_t d = t.cols();
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double n = 0;
    for (std::size_t c = 0; c < d; ++c) n += t[r * d + c] * t[r * d + c];
    for (std::size_t c = 0; c < d; ++c) t[r * d + c] /= std::sqrt(n);
  }
  return t;
}

TEST(MemoryRead, MatchesSoftmaxOfCosines) {
  Initializer init(5);
  MemoryBank<double> bank("m", 10, 6, 0.1, init);
  auto q = random_tensor({7, 6}, 8, 2.0);
  auto res = bank.read(V::constant(q));
  const auto& s = bank.slots();
  for (std::size_t i = 0; i < 7; ++i) {
    std::vector<double> logits(10);
    double qn = 0;
    for (std::size_t c = 0; c < 6; ++c) qn += q.at(i, c) * q.at(i, c);
    for (std::size_t j = 0; j < 10; ++j) {
      double dot = 0, sn = 0;
      for (std::size_t c = 0; c < 6; ++c) {
        dot += q.at(i, c) * s.at(j, c);
        sn += s.at(j, c) * s.at(j, c);
      }
      logits[j] = dot / std::sqrt(qn * sn) / 0.1;
    }
    double mx = *std::max_element(logits.begin(), logits.end()), z = 0;
    for (double l : logits) z += std::exp(l - mx);
    double wsum = 0;
    for (std::size_t j = 0; j < 10; ++j) {
      const double w = std::exp(logits[j] - mx) / z;
      EXPECT_NEAR(res.weights.value().at(i, j), w, 1e-6);
      EXPECT_GE(res.weights.value().at(i, j), 0.0);
      wsum += res.weights.value().at(i, j);
    }
    EXPECT_NEAR(wsum, 1.0, 1e-9);
    for (std::size_t c = 0; c < 6; ++c) {
      double r = 0;
      for (std::size_t j = 0; j < 10; ++j) r += res.weights.value().at(i, j) * s.at(j, c);
      EXPECT_NEAR(res.retrieved.value().at(i, c), r, 1e-12);
    }
  }
}

TEST(MemoryRead, QueryEqualToSlotSelectsIt) {
  Initializer init(6);
  MemoryBank<double> bank("m", 4, 4, 0.01, init);
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  bank.set_slots(eye);
  Tensor<double> q({1, 4});
  q.at(0, 3) = 2.5;
  auto res = bank.read(V::constant(q));
  EXPECT_GT(res.weights.value().at(0, 3), 0.999);
  EXPECT_NEAR(res.retrieved.value().at(0, 3), 1.0, 1e-3);
}

TEST(MemoryRead, IdenticalSlotsReturnThatSlot) {
  Initializer init(7);
  MemoryBank<double> bank("m", 5, 3, 0.1, init);
  Tensor<double> slots({5, 3});
  for (std::size_t j = 0; j < 5; ++j) {
    slots.at(j, 0) = 0.6;
    slots.at(j, 1) = 0.8;
  }
  bank.set_slots(slots);
  auto res = bank.read(V::constant(random_tensor({2, 4, 3}, 9)));
  EXPECT_EQ(res.retrieved.shape(), (Shape{2, 4, 3}));
  EXPECT_EQ(res.weights.shape(), (Shape{2, 4, 5}));
  for (std::size_t i = 0; i < 8; ++i) {
    EXPECT_NEAR(res.retrieved.value()[i * 3 + 0], 0.6, 1e-12);
    EXPECT_NEAR(res.retrieved.value()[i * 3 + 1], 0.8, 1e-12);
  }
}

TEST(MemoryRead, ZeroQueryGivesUniformWeights) {
  Initializer init(8);
  MemoryBank<double> bank("m", 4, 3, 0.1, init);
  auto res = bank.read(V::constant(Tensor<double>({1, 3})));
  for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(res.weights.value()[j], 0.25, 1e-12);
}

TEST(MemoryRead, GradientFlowsToQuery) {
  Initializer init(9);
  MemoryBank<double> bank("m", 6, 4, 0.5, init);
  auto r = check_input_gradients(
      [&](const std::vector<V>& v) { return random_projection(with_prototype(v[0], bank)); },
      {random_tensor({5, 4}, 10)});
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(MemoryWrite, InferenceIsModeErrorAndEmptyBatchIsNoOp) {
  Initializer init(10);
  MemoryBank<double> bank("m", 4, 3, 0.1, init);
  const auto before = bank.slots();
  EXPECT_THROW(bank.write(random_tensor({2, 3}, 1), Mode::kInference), ModeError);
  bank.write(Tensor<double>({0, 3}), Mode::kTrain);
  EXPECT_EQ(bank.slots(), before);
}

TEST(MemoryWrite, RowsStayUnitNorm) {
  Initializer init(11);
  MemoryBank<double> bank("m", 10, 8, 0.1, init);
  for (unsigned step = 0; step < 20; ++step) {
    bank.write(random_tensor({16, 8}, 100 + step, 5.0), Mode::kTrain);
    for (std::size_t j = 0; j < 10; ++j) {
      double n = 0;
      for (std::size_t c = 0; c < 8; ++c) n += bank.slots().at(j, c) * bank.slots().at(j, c);
      EXPECT_NEAR(std::sqrt(n), 1.0, 1e-6);
    }
  }
}

TEST(MemoryWrite, MatchesDirectUpdateRule) {
  Initializer init(12);
  MemoryBank<double> bank("m", 3, 4, 0.2, init);
  const auto s0 = bank.slots();
  auto items = random_tensor({5, 4}, 13);
  bank.write(items, Mode::kTrain);
  auto u = unit_rows(items);
  for (std::size_t j = 0; j < 3; ++j) {
    std::vector<double> a(5);
    double z = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      double dot = 0;
      for (std::size_t c = 0; c < 4; ++c) dot += u.at(i, c) * s0.at(j, c);
      z += (a[i] = std::exp(dot / 0.2));
    }
    Tensor<double> row({1, 4});
    for (std::size_t c = 0; c < 4; ++c) {
      row[c] = s0.at(j, c);
      for (std::size_t i = 0; i < 5; ++i) row[c] += a[i] / z * u.at(i, c);
    }
    row = unit_rows(row);
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(bank.slots().at(j, c), row[c], 1e-12);
  }
}

TEST(MemoryWrite, ItemEqualToSlotKeepsItsDirection) {
  Initializer init(14);
  MemoryBank<double> bank("m", 4, 5, 0.1, init);
  const auto s0 = bank.slots();
  Tensor<double> item({1, 5});
  for (std::size_t c = 0; c < 5; ++c) item[c] = 3.0 * s0.at(1, c);
  bank.write(item, Mode::kTrain);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(bank.slots().at(1, c), s0.at(1, c), 1e-12);
}

TEST(Decoder, OutputShapeAndRange) {
  ParamStore<double> store;
  Initializer init(15);
  Decoder<double> app(store, "dec_app", 16, 4, 4, DecoderHead::kAppearance, init);
  Decoder<double> mot(store, "dec_motion", 16, 4, 4, DecoderHead::kMotion, init);
  EXPECT_EQ(app.n_convs(), 4u);
  for (auto [gh, gw] : {std::pair<std::size_t, std::size_t>{2, 2}, {3, 5}}) {
    Session<double> ss(store, false);
    auto x = V::constant(random_tensor({gh, gw, 16}, 16, 10.0));
    auto v = app.forward(ss, x).value();
    auto m = mot.forward(ss, x).value();
    EXPECT_EQ(v.shape(), (Shape{gh * 4, gw * 4, 3}));
    EXPECT_EQ(m.shape(), (Shape{gh * 4, gw * 4, 3}));
    for (double e : v.vec()) {
      EXPECT_GE(e, 0.0);
      EXPECT_LE(e, 1.0);
    }
    for (double e : m.vec()) EXPECT_LE(std::abs(e), 1.0);
  }
}

TEST(Decoder, NonPowerOfTwoIsConfigError) {
  ParamStore<double> store;
  Initializer init(15);
  EXPECT_THROW(Decoder<double>(store, "d", 4, 4, 6, DecoderHead::kAppearance, init), ConfigError);
}

TEST(Decoder, GradientsMatchFiniteDifferences) {
  ParamStore<double> store;
  Initializer init(16);
  Decoder<double> dec(store, "dec", 4, 4, 2, DecoderHead::kMotion, init);
  auto x = random_tensor({2, 2, 4}, 17);
  auto rp = check_param_gradients(store, [&](Session<double>& ss) { return random_projection(dec.forward(ss, V::constant(x))); });
  EXPECT_LT(rp.rel_error, 1e-3);
}

TEST(Decoder, OverfitsOneTarget) {
  ParamStore<float> store;
  Initializer init(18);
  Decoder<float> dec(store, "dec", 8, 8, 4, DecoderHead::kAppearance, init);
  std::mt19937 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  Tensor<float> x({4, 4, 8}), target({16, 16, 3});
  for (auto& v : x.vec()) v = u(rng);
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j)
      for (std::size_t c = 0; c < 3; ++c) target.at(i, j, c) = (i < 8) == (j < 8) ? 0.8f : 0.2f;
  Adam<float> adam(store, {2e-2});
  auto err = [&](bool step) {
    store.zero_grad();
    Session<float> ss(store, step);
    auto loss = ops::mean_square(ops::sub(dec.forward(ss, Var<float>::constant(x)), Var<float>::constant(target)));
    if (step) {
      backward(loss);
      ss.accumulate_grads(store);
      adam.step(store, 2e-2);
    }
    return loss.value()[0];
  };
  const float initial = err(false);
  for (int s = 0; s < 200; ++s) err(true);
  EXPECT_LT(std::sqrt(err(false)), 0.1f * std::sqrt(initial));
}

}  // namespace
}  // namespace m2s2l
