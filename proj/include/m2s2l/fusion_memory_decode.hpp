// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "m2s2l/autodiff.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/init.hpp"
#include "m2s2l/ops.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l {

// Two-layer perceptron d_in -> hidden -> d_out with silu in between.
template <typename T>
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore<T>& store, const std::string& prefix, std::size_t d_in, std::size_t hidden,
      std::size_t d_out, Initializer& init) {
    w1_ = store.add(prefix + ".w1", init.normal<T>({d_in, hidden}, 1.0 / std::sqrt(double(d_in))));
    b1_ = store.add(prefix + ".b1", Initializer::constant<T>({hidden}, 0.0));
    w2_ = store.add(prefix + ".w2", init.normal<T>({hidden, d_out}, 1.0 / std::sqrt(double(hidden))));
    b2_ = store.add(prefix + ".b2", Initializer::constant<T>({d_out}, 0.0));
  }

  Var<T> forward(Session<T>& ss, const Var<T>& x) const {
    auto h = ops::silu(ops::linear(x, ss.param(w1_), ss.param(b1_)));
    return ops::linear(h, ss.param(w2_), ss.param(b2_));
  }
  ParamId out_weight() const { return w2_; }
  ParamId out_bias() const { return b2_; }

 private:
  ParamId w1_{}, b1_{}, w2_{}, b2_{};
};

template <typename T>
struct FusedFeatures {
  Var<T> f_fused, f_common, f_app, f_motion;
  Var<T> gate;      // sigmoid(MLP_common(f_fused)); undefined when decomposition is off
  Var<T> residual;  // f_fused - f_common
};

// f_fused = LN(g_spatial + h_temporal) and its decomposition into common,
// appearance and motion parts.
template <typename T>
class FusionDecomposer {
 public:
  FusionDecomposer() = default;
  FusionDecomposer(ParamStore<T>& store, const std::string& prefix, std::size_t d, bool decompose,
                   Initializer& init)
      : decompose_(decompose) {
    ln_gamma_ = store.add(prefix + ".ln.gamma", Initializer::constant<T>({d}, 1.0));
    ln_beta_ = store.add(prefix + ".ln.beta", Initializer::constant<T>({d}, 0.0));
    if (decompose_) {
      common_ = Mlp<T>(store, prefix + ".mlp_common", d, d, d, init);
      app_ = Mlp<T>(store, prefix + ".mlp_app", d, d, d, init);
      motion_ = Mlp<T>(store, prefix + ".mlp_motion", d, d, d, init);
    }
  }

  Var<T> fuse(Session<T>& ss, const Var<T>& g_spatial, const Var<T>& h_temporal) const {
    require(g_spatial.shape() == h_temporal.shape(), "fuse: spatial " + shape_str(g_spatial.shape()) +
                                                         " vs temporal " + shape_str(h_temporal.shape()));
    return ops::layer_norm(ops::add(g_spatial, h_temporal), ss.param(ln_gamma_), ss.param(ln_beta_));
  }

  FusedFeatures<T> decompose(Session<T>& ss, const Var<T>& f) const {
    FusedFeatures<T> out;
    out.f_fused = f;
    if (!decompose_) {
      out.f_common = out.f_app = out.f_motion = f;
      return out;
    }
    out.gate = ops::sigmoid(common_.forward(ss, f));
    out.f_common = ops::mul(out.gate, f);
    out.residual = ops::sub(f, out.f_common);
    out.f_app = app_.forward(ss, out.residual);
    out.f_motion = motion_.forward(ss, out.residual);
    return out;
  }

  bool decomposes() const { return decompose_; }
  const Mlp<T>& common_mlp() const { return common_; }

 private:
  bool decompose_ = true;
  ParamId ln_gamma_{}, ln_beta_{};
  Mlp<T> common_, app_, motion_;
};

enum class Mode { kTrain, kInference };

template <typename T>
struct MemoryRead {
  Var<T> retrieved;  // (... x D)
  Var<T> weights;    // (... x M)
};

// Prototype memory: cosine-similarity softmax addressing. Slots are not
// trained by gradient descent; they move only through write().
template <typename T>
class MemoryBank {
 public:
  MemoryBank() = default;
  MemoryBank(std::string name, std::size_t slots, std::size_t d, double temperature, Initializer& init)
      : name_(std::move(name)), temperature_(temperature), slots_(init.normal<T>({slots, d}, 1.0)) {
    require(slots > 0 && d > 0, "MemoryBank: empty bank");
    require(temperature > 0, "MemoryBank: temperature must be positive");
    normalize_rows(slots_);
  }

  const std::string& name() const { return name_; }
  const Tensor<T>& slots() const { return slots_; }
  void set_slots(Tensor<T> s) {
    require(s.shape() == slots_.shape(), "MemoryBank: slot shape mismatch for " + name_);
    slots_ = std::move(s);
  }
  std::size_t size() const { return slots_.dim(0); }
  std::size_t dim() const { return slots_.dim(1); }
  double temperature() const { return temperature_; }

  MemoryRead<T> read(const Var<T>& query) const {
    require(query.value().cols() == dim(), "MemoryBank::read: query width " +
                                               std::to_string(query.value().cols()) + " != " +
                                               std::to_string(dim()));
    const Shape qs = query.shape();
    const std::size_t rows = query.value().rows();
    auto q = ops::l2_normalize_rows(ops::reshape(query, {rows, dim()}));
    auto mem = Var<T>::constant(slots_);
    auto sim = ops::matmul_nt(q, ops::l2_normalize_rows(mem));
    auto w = ops::softmax(ops::scale(sim, T(1.0 / temperature_)));
    auto r = ops::linear(w, mem);
    Shape ws = qs;
    ws.back() = size();
    return {ops::reshape(r, qs), ops::reshape(w, ws)};
  }

  // items (n x D). For each slot the assignment weights are a softmax over
  // the batch of its similarities; the slot moves toward the weighted sum of
  // unit-normalized items and is re-normalized.
  void write(const Tensor<T>& items, Mode mode) {
    if (mode != Mode::kTrain) throw ModeError("MemoryBank::write: bank " + name_ + " is read-only at inference");
    if (items.size() == 0) return;
    require(items.cols() == dim(), "MemoryBank::write: item width mismatch");
    const std::size_t n = items.rows(), m = size(), d = dim();
    Tensor<T> unit({n, d}, std::vector<T>(items.data(), items.data() + n * d));
    normalize_rows(unit);
    Tensor<T> sim({n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        T dot = 0;
        for (std::size_t c = 0; c < d; ++c) dot += unit[i * d + c] * slots_[j * d + c];
        sim[i * m + j] = dot / static_cast<T>(temperature_);
      }
    Tensor<T> next = slots_;
    for (std::size_t j = 0; j < m; ++j) {
      T mx = sim[j];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, sim[i * m + j]);
      T z = 0;
      std::vector<T> a(n);
      for (std::size_t i = 0; i < n; ++i) z += (a[i] = std::exp(sim[i * m + j] - mx));
      for (std::size_t i = 0; i < n; ++i) {
        const T wi = a[i] / z;
        for (std::size_t c = 0; c < d; ++c) next[j * d + c] += wi * unit[i * d + c];
      }
    }
    normalize_rows(next);
    slots_ = std::move(next);
  }

 private:
  static void normalize_rows(Tensor<T>& t) {
    const std::size_t d = t.cols(), rows = t.rows();
    for (std::size_t r = 0; r < rows; ++r) {
      T ss = 0;
      for (std::size_t c = 0; c < d; ++c) ss += t[r * d + c] * t[r * d + c];
      const T inv = T(1) / std::max(std::sqrt(ss), T(1e-12));
      for (std::size_t c = 0; c < d; ++c) t[r * d + c] *= inv;
    }
  }

  std::string name_;
  double temperature_ = 0.1;
  Tensor<T> slots_;
};

template <typename T>
struct Reconstruction {
  Var<T> v_hat;  // (H x W x 3), in (0, 1)
  Var<T> m_hat;  // (H x W x 3), in (-1, 1)
};

enum class DecoderHead { kAppearance, kMotion };

// Token grid (gh x gw x C_in) -> image (gh*2^s x gw*2^s x 3): a 1x1 conv to
// the model width, s stages of nearest 2x upsampling + 3x3 conv that halve
// the width, and a final 3x3 conv to 3 channels.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamStore<T>& store, const std::string& prefix, std::size_t c_in, std::size_t d,
          std::size_t upscale, DecoderHead head, Initializer& init)
      : head_(head) {
    if (upscale == 0 || (upscale & (upscale - 1)) != 0)
      throw ConfigError("Decoder: patch size " + std::to_string(upscale) + " is not a power of two");
    auto add_conv = [&](const std::string& name, std::size_t k, std::size_t cin, std::size_t cout) {
      Conv c{k, store.add(name + ".w", init.normal<T>({k * k * cin, cout}, std::sqrt(2.0 / double(k * k * cin)))),
             store.add(name + ".b", Initializer::constant<T>({cout}, 0.0))};
      convs_.push_back(c);
    };
    add_conv(prefix + ".in", 1, c_in, d);
    std::size_t ch = d;
    for (std::size_t s = 0; (std::size_t(1) << s) < upscale; ++s) {
      const std::size_t next = std::max<std::size_t>(ch / 2, 4);
      add_conv(prefix + ".up" + std::to_string(s), 3, ch, next);
      ch = next;
    }
    add_conv(prefix + ".out", 3, ch, 3);
    // start the output layer small so initial predictions sit near the midpoint
    for (auto& v : store[convs_.back().w].value.vec()) v *= T(0.1);
  }

  // x: (gh x gw x C_in)
  Var<T> forward(Session<T>& ss, const Var<T>& x) const {
    require(x.value().rank() == 3, "Decoder: input must be (gh x gw x C)");
    auto h = ops::silu(conv(ss, x, convs_[0]));
    for (std::size_t i = 1; i + 1 < convs_.size(); ++i)
      h = ops::silu(conv(ss, ops::upsample_nearest2x(h), convs_[i]));
    h = conv(ss, h, convs_.back());
    return head_ == DecoderHead::kAppearance ? ops::sigmoid(h) : ops::tanh(h);
  }

  std::size_t n_convs() const { return convs_.size(); }

 private:
  struct Conv {
    std::size_t k;
    ParamId w, b;
  };
  Var<T> conv(Session<T>& ss, const Var<T>& x, const Conv& c) const {
    return ops::conv2d(x, ss.param(c.w), ss.param(c.b), c.k);
  }

  DecoderHead head_ = DecoderHead::kAppearance;
  std::vector<Conv> convs_;
};

// Memory-filtered features: each feature concatenated with its prototype.
template <typename T>
Var<T> with_prototype(const Var<T>& feature, const MemoryBank<T>& bank) {
  return ops::concat_lastdim(std::vector<Var<T>>{feature, bank.read(feature).retrieved});
}

}  // namespace m2s2l
