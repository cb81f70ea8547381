// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

// Selective state-space scan and the blocks built on it.
//
// Recurrence, per channel e and state s:
//   decay[e,s] = exp(-exp(delta[e]) * lambda[e,s])
//   h_t[e,s]   = decay[e,s] * h_{t-1}[e,s] + delta[e] * b_t[s] * x_t[e]
//   y_t[e]     = sum_s c_t[s] * h_t[e,s]
// with b_t = silu(x_t . w_b), c_t = silu(x_t . w_c). delta and lambda are
// stored as logs so both stay positive under unconstrained updates.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <type_traits>
#include <vector>

#include "m2s2l/autodiff.hpp"
#include "m2s2l/init.hpp"
#include "m2s2l/ops.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l {

struct BlockConfig {
  std::size_t d_model = 256;
  std::size_t state_size = 16;
  std::vector<std::size_t> dw_kernels{1, 3, 5};
  std::size_t n_blocks = 2;
  std::size_t expansion = 2;
  std::size_t conv_kernel = 3;  // VSSB depthwise conv ahead of the scan
  bool bidirectional_scan = false;

  std::size_t inner() const { return expansion * d_model; }

  void validate() const {
    if (d_model == 0 || state_size == 0 || expansion == 0)
      throw ConfigError("BlockConfig: d_model, state_size and expansion must be positive");
    if (n_blocks < 1) throw ConfigError("BlockConfig: n_blocks must be >= 1");
    if (dw_kernels.empty()) throw ConfigError("BlockConfig: dw_kernels is empty");
    for (auto k : dw_kernels)
      if (k % 2 == 0) throw ConfigError("BlockConfig: dw_kernels must be odd, got " + std::to_string(k));
    if (conv_kernel % 2 == 0) throw ConfigError("BlockConfig: conv_kernel must be odd");
  }
};

template <typename T>
struct SelectiveScanParams {
  Tensor<T> log_delta;   // (D)
  Tensor<T> log_lambda;  // (D x S)
  Tensor<T> w_b;         // (D x S)
  Tensor<T> w_c;         // (D x S)

  std::size_t channels() const { return log_delta.size(); }
  std::size_t state_size() const { return w_b.cols(); }

  void validate() const {
    const std::size_t d = channels(), s = state_size();
    require(log_lambda.shape() == Shape{d, s} && w_b.shape() == Shape{d, s} &&
                w_c.shape() == Shape{d, s},
            "SelectiveScanParams: inconsistent shapes");
  }
};

template <typename T>
struct ScanState {
  Tensor<T> h;  // (D x S)
};

// Per-entry decay exp(A) with A = -exp(delta) * lambda. delta is (D), lambda
// is (D x S); both are the raw (not log) values.
template <typename T>
Tensor<T> discretize(const Tensor<T>& delta, const Tensor<T>& lambda) {
  require(lambda.rank() == 2 && lambda.dim(0) == delta.size(), "discretize: shape mismatch");
  if (!delta.all_finite() || !lambda.all_finite())
    throw ParameterDomainError("discretize: non-finite step or decay parameter");
  const std::size_t d = lambda.dim(0), s = lambda.dim(1);
  Tensor<T> out(lambda.shape());
  for (std::size_t e = 0; e < d; ++e) {
    const T ed = std::exp(delta[e]);
    for (std::size_t j = 0; j < s; ++j) out[e * s + j] = std::exp(-ed * lambda[e * s + j]);
  }
  return out;
}

template <typename T>
Tensor<T> exp_of(const Tensor<T>& t) {
  Tensor<T> out = t;
  for (auto& v : out.vec()) v = std::exp(v);
  return out;
}

template <typename T>
Tensor<T> discretize(const SelectiveScanParams<T>& p) {
  return discretize(exp_of(p.log_delta), exp_of(p.log_lambda));
}

namespace detail {

// Runs Bt independent sequences of length L. states, when given, receives
// h_t for every (sequence, t) so the backward pass can reuse it.
template <typename T>
void scan_forward(const T* x, const T* b, const T* c, const T* delta, const T* decay,
                  std::size_t bt, std::size_t len, std::size_t d, std::size_t s, const T* h0,
                  T* y, T* states) {
  std::vector<T> h(d * s);
  for (std::size_t q = 0; q < bt; ++q) {
    if (h0)
      std::copy_n(h0 + q * d * s, d * s, h.begin());
    else
      std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < len; ++t) {
      const std::size_t row = q * len + t;
      const T* xt = x + row * d;
      const T* btp = b + row * s;
      const T* ctp = c + row * s;
      T* yt = y + row * d;
      for (std::size_t e = 0; e < d; ++e) {
        const T u = delta[e] * xt[e];
        T* he = h.data() + e * s;
        const T* ae = decay + e * s;
        T acc = 0;
        for (std::size_t j = 0; j < s; ++j) {
          he[j] = ae[j] * he[j] + u * btp[j];
          acc += ctp[j] * he[j];
        }
        yt[e] = acc;
      }
      if (states) std::copy(h.begin(), h.end(), states + row * d * s);
    }
  }
}

}  // namespace detail

// Differentiable batched scan. x: (Bt x L x D) or (L x D); b, c: matching
// (... x S); log_delta: (D); log_lambda: (D x S). h0, when given, is a
// constant (Bt x D x S) initial state.
template <typename T>
Var<T> selective_scan(const Var<T>& x, const Var<T>& b, const Var<T>& c, const Var<T>& log_delta,
                      const Var<T>& log_lambda, const Tensor<T>* h0 = nullptr) {
  const auto& xs = x.shape();
  require(xs.size() == 2 || xs.size() == 3, "selective_scan: x must be (L x D) or (Bt x L x D)");
  const std::size_t d = xs.back();
  const std::size_t len = xs[xs.size() - 2];
  const std::size_t bt = xs.size() == 3 ? xs[0] : 1;
  require(len >= 1, "selective_scan: empty sequence");
  require(log_delta.size() == d, "selective_scan: delta length != channels");
  require(log_lambda.value().rank() == 2 && log_lambda.dim(0) == d,
          "selective_scan: lambda must be (D x S)");
  const std::size_t s = log_lambda.dim(1);
  Shape gate_shape = xs;
  gate_shape.back() = s;
  require(b.shape() == gate_shape && c.shape() == gate_shape,
          "selective_scan: gate shapes " + shape_str(b.shape()) + "/" + shape_str(c.shape()) +
              " != " + shape_str(gate_shape));
  if (h0) require(h0->size() == bt * d * s, "selective_scan: initial state size mismatch");

  const Tensor<T> delta = exp_of(log_delta.value());
  const Tensor<T> decay = discretize(delta, exp_of(log_lambda.value()));
  Tensor<T> y(xs);
  const bool need_grad = x.requires_grad() || b.requires_grad() || c.requires_grad() ||
                         log_delta.requires_grad() || log_lambda.requires_grad();
  Tensor<T> states;
  if (need_grad) states = Tensor<T>({bt * len * d * s});
  detail::scan_forward(x.value().data(), b.value().data(), c.value().data(), delta.data(),
                       decay.data(), bt, len, d, s, h0 ? h0->data() : nullptr, y.data(),
                       need_grad ? states.data() : nullptr);
  if (!need_grad) return Var<T>::constant(std::move(y));

  Tensor<T> h0_copy = h0 ? *h0 : Tensor<T>();
  return make_op<T>(
      std::move(y), {x, b, c, log_delta, log_lambda},
      [states = std::move(states), delta, decay, h0_copy = std::move(h0_copy), bt, len, d,
       s](Node<T>& self) {
        const T* xv = self.parents[0]->value.data();
        const T* bv = self.parents[1]->value.data();
        const T* cv = self.parents[2]->value.data();
        const T* lam_log = self.parents[4]->value.data();
        auto* gx = parent_grad(self, 0);
        auto* gb = parent_grad(self, 1);
        auto* gc = parent_grad(self, 2);
        auto* gld = parent_grad(self, 3);
        auto* gll = parent_grad(self, 4);
        std::vector<T> g_decay(d * s, T(0)), g_delta(d, T(0)), gh(d * s), zero(d * s, T(0));
        for (std::size_t q = 0; q < bt; ++q) {
          std::fill(gh.begin(), gh.end(), T(0));
          for (std::size_t tt = len; tt-- > 0;) {
            const std::size_t row = q * len + tt;
            const T* ht = states.data() + row * d * s;
            const T* hprev = tt > 0 ? states.data() + (row - 1) * d * s
                                    : (h0_copy.empty() ? zero.data() : h0_copy.data() + q * d * s);
            const T* xt = xv + row * d;
            const T* btp = bv + row * s;
            const T* ctp = cv + row * s;
            const T* gyt = self.grad.data() + row * d;
            for (std::size_t e = 0; e < d; ++e) {
              const T gy = gyt[e];
              const T u = delta[e] * xt[e];
              T gu = 0;
              T* ghe = gh.data() + e * s;
              const T* he = ht + e * s;
              const T* hp = hprev + e * s;
              const T* ae = decay.data() + e * s;
              T* gae = g_decay.data() + e * s;
              for (std::size_t j = 0; j < s; ++j) {
                const T g = ghe[j] + ctp[j] * gy;
                if (gc) (*gc)[row * s + j] += gy * he[j];
                if (gb) (*gb)[row * s + j] += g * u;
                gu += g * btp[j];
                gae[j] += g * hp[j];
                ghe[j] = g * ae[j];
              }
              if (gx) (*gx)[row * d + e] += gu * delta[e];
              g_delta[e] += gu * xt[e];
            }
          }
        }
        // decay = exp(-exp(delta) * lambda), delta = exp(ld), lambda = exp(ll)
        for (std::size_t e = 0; e < d; ++e) {
          const T ed = std::exp(delta[e]);
          for (std::size_t j = 0; j < s; ++j) {
            const T lam = std::exp(lam_log[e * s + j]);
            const T common = g_decay[e * s + j] * decay[e * s + j] * (-ed);
            if (gll) (*gll)[e * s + j] += common * lam;
            g_delta[e] += common * lam;
          }
          if (gld) (*gld)[e] += g_delta[e] * delta[e];
        }
      });
}

// Spec-level scan on plain tensors: x (L x D) with gates computed from the
// parameter set. Returns y (L x D); final_state receives h_L when non-null.
template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const SelectiveScanParams<T>& p,
                         const std::type_identity_t<ScanState<T>>* h0 = nullptr,
                         std::type_identity_t<ScanState<T>>* final_state = nullptr) {
  p.validate();
  require(x.rank() == 2 && x.dim(1) == p.channels(),
          "selective_scan: x must be (L x D) with D = " + std::to_string(p.channels()));
  require(x.dim(0) >= 1, "selective_scan: empty sequence");
  if (h0) require(h0->h.size() == p.channels() * p.state_size() && h0->h.all_finite(),
                  "selective_scan: invalid initial state");
  auto xv = Var<T>::constant(x);
  auto b = ops::silu(ops::linear(xv, Var<T>::constant(p.w_b)));
  auto c = ops::silu(ops::linear(xv, Var<T>::constant(p.w_c)));
  const std::size_t d = p.channels(), s = p.state_size(), len = x.dim(0);
  if (final_state) {
    const Tensor<T> delta = exp_of(p.log_delta);
    const Tensor<T> decay = discretize(delta, exp_of(p.log_lambda));
    Tensor<T> y({len, d}), states({len * d * s});
    detail::scan_forward(x.data(), b.value().data(), c.value().data(), delta.data(), decay.data(),
                         1, len, d, s, h0 ? h0->h.data() : nullptr, y.data(), states.data());
    final_state->h = Tensor<T>({d, s}, std::vector<T>(states.data() + (len - 1) * d * s,
                                                      states.data() + len * d * s));
    return y;
  }
  return selective_scan(xv, b, c, Var<T>::constant(p.log_delta), Var<T>::constant(p.log_lambda),
                        h0 ? &h0->h : nullptr)
      .value();
}

namespace ops {

// Reverse the order of axis 1 of a (A x L x C) tensor.
template <typename T>
Var<T> flip_axis1(const Var<T>& x) {
  require(x.value().rank() == 3, "flip_axis1: input must be 3-D");
  const std::size_t a = x.dim(0), l = x.dim(1), c = x.dim(2);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < a; ++i)
    for (std::size_t t = 0; t < l; ++t)
      std::copy_n(x.value().data() + (i * l + t) * c, c, out.data() + (i * l + (l - 1 - t)) * c);
  return make_op<T>(std::move(out), {x}, [a, l, c](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t q = 0; q < c; ++q)
          (*g)[(i * l + t) * c + q] += self.grad[(i * l + (l - 1 - t)) * c + q];
  });
}

}  // namespace ops

template <typename T>
struct ScanParamIds {
  ParamId log_delta, log_lambda, w_b, w_c;

  ScanParamIds() = default;
  ScanParamIds(ParamStore<T>& store, const std::string& prefix, std::size_t d, std::size_t s,
               Initializer& init) {
    log_delta = store.add(prefix + ".log_delta", init.log_uniform_log<T>({d}, 0.05, 0.5));
    log_lambda = store.add(prefix + ".log_lambda", init.log_uniform_log<T>({d, s}, 0.02, 1.0));
    const double std_in = 1.0 / std::sqrt(static_cast<double>(d));
    w_b = store.add(prefix + ".w_b", init.normal<T>({d, s}, std_in));
    w_c = store.add(prefix + ".w_c", init.normal<T>({d, s}, std_in));
  }

  SelectiveScanParams<T> values(const ParamStore<T>& store) const {
    return {store[log_delta].value, store[log_lambda].value, store[w_b].value, store[w_c].value};
  }
};

// Residual state-space block: x + out_proj(scan(act(pre(in_proj(LN(x))))) * silu(z)).
// Sequences are laid out (Bt x L x D). With a spatial conv the L axis is a
// raster-ordered (grid_h x grid_w) token grid and a depthwise conv mixes
// neighbours before the scan (VSSB); without it the scan runs directly over
// L (the temporal block).
template <typename T>
class StateSpaceBlock {
 public:
  StateSpaceBlock() = default;
  StateSpaceBlock(ParamStore<T>& store, const std::string& prefix, const BlockConfig& cfg,
                  Initializer& init, bool spatial_conv)
      : cfg_(cfg), spatial_conv_(spatial_conv) {
    const std::size_t d = cfg.d_model, e = cfg.inner(), s = cfg.state_size;
    ln_gamma_ = store.add(prefix + ".ln.gamma", Initializer::constant<T>({d}, 1.0));
    ln_beta_ = store.add(prefix + ".ln.beta", Initializer::constant<T>({d}, 0.0));
    in_proj_ = store.add(prefix + ".in_proj", init.normal<T>({d, 2 * e}, 1.0 / std::sqrt(double(d))));
    if (spatial_conv_) {
      const std::size_t k = cfg.conv_kernel;
      conv_kernel_ = store.add(prefix + ".conv.kernel", init.normal<T>({k, k, e}, 1.0 / double(k)));
      conv_bias_ = store.add(prefix + ".conv.bias", Initializer::constant<T>({e}, 0.0));
    }
    scan_ = ScanParamIds<T>(store, prefix + ".scan", e, s, init);
    if (cfg.bidirectional_scan) scan_rev_ = ScanParamIds<T>(store, prefix + ".scan_rev", e, s, init);
    const double out_std = 1.0 / std::sqrt(double(e) * 2.0 * double(cfg.n_blocks));
    out_proj_ = store.add(prefix + ".out_proj", init.normal<T>({e, d}, out_std));
  }

  // f(LN(x)) without the residual add.
  Var<T> branch(Session<T>& ss, const Var<T>& x, std::size_t grid_h = 0, std::size_t grid_w = 0) const {
    require(x.value().rank() == 3 && x.dim(2) == cfg_.d_model,
            "StateSpaceBlock: input must be (Bt x L x " + std::to_string(cfg_.d_model) + ")");
    const std::size_t bt = x.dim(0), len = x.dim(1), e = cfg_.inner();
    auto u = ops::layer_norm(x, ss.param(ln_gamma_), ss.param(ln_beta_));
    auto proj = ops::linear(u, ss.param(in_proj_));
    auto xb = ops::slice_lastdim(proj, 0, e);
    auto z = ops::slice_lastdim(proj, e, e);
    if (spatial_conv_) {
      require(grid_h * grid_w == len, "StateSpaceBlock: token count " + std::to_string(len) +
                                          " does not match grid " + std::to_string(grid_h) + "x" +
                                          std::to_string(grid_w));
      auto g = ops::reshape(xb, {bt, grid_h, grid_w, e});
      g = ops::dwconv2d(g, ss.param(conv_kernel_));
      xb = ops::add_bias(ops::reshape(g, {bt, len, e}), ss.param(conv_bias_));
    }
    xb = ops::silu(xb);
    auto y = scan(ss, xb, scan_);
    if (cfg_.bidirectional_scan) {
      auto rev = scan(ss, ops::flip_axis1(xb), scan_rev_);
      y = ops::add(y, ops::flip_axis1(rev));
    }
    y = ops::mul(y, ops::silu(z));
    return ops::linear(y, ss.param(out_proj_));
  }

  Var<T> forward(Session<T>& ss, const Var<T>& x, std::size_t grid_h = 0, std::size_t grid_w = 0) const {
    return ops::add(x, branch(ss, x, grid_h, grid_w));
  }

  const BlockConfig& config() const { return cfg_; }
  ParamId out_proj_id() const { return out_proj_; }
  const ScanParamIds<T>& scan_ids() const { return scan_; }

 private:
  Var<T> scan(Session<T>& ss, const Var<T>& xb, const ScanParamIds<T>& ids) const {
    auto b = ops::silu(ops::linear(xb, ss.param(ids.w_b)));
    auto c = ops::silu(ops::linear(xb, ss.param(ids.w_c)));
    return selective_scan(xb, b, c, ss.param(ids.log_delta), ss.param(ids.log_lambda));
  }

  BlockConfig cfg_;
  bool spatial_conv_ = false;
  ParamId ln_gamma_{}, ln_beta_{}, in_proj_{}, conv_kernel_{}, conv_bias_{}, out_proj_{};
  ScanParamIds<T> scan_{}, scan_rev_{};
};

// Visual state-space block over per-frame token grids: tokens (F x N x D).
template <typename T>
class VssBlock {
 public:
  VssBlock() = default;
  VssBlock(ParamStore<T>& store, const std::string& prefix, const BlockConfig& cfg, Initializer& init)
      : core_(store, prefix, cfg, init, true) {}

  Var<T> forward(Session<T>& ss, const Var<T>& tokens, std::size_t grid_h, std::size_t grid_w) const {
    return core_.forward(ss, tokens, grid_h, grid_w);
  }
  const StateSpaceBlock<T>& core() const { return core_; }

 private:
  StateSpaceBlock<T> core_;
};

// Multi-scale VSSB: X = sum_j DWConv_jxj(P), output = VSSB(X + P).
template <typename T>
class MsVssBlock {
 public:
  MsVssBlock() = default;
  MsVssBlock(ParamStore<T>& store, const std::string& prefix, const BlockConfig& cfg, Initializer& init)
      : cfg_(cfg) {
    for (auto k : cfg.dw_kernels)
      kernels_.push_back(store.add(prefix + ".dw" + std::to_string(k),
                                   init.normal<T>({k, k, cfg.d_model}, 0.5 / double(k))));
    vssb_ = VssBlock<T>(store, prefix + ".vssb", cfg, init);
  }

  // Sum of the depthwise branches on a (F x N x D) grid-ordered input.
  Var<T> multiscale_conv(Session<T>& ss, const Var<T>& patches, std::size_t grid_h, std::size_t grid_w) const {
    require(patches.value().rank() == 3 && patches.dim(1) == grid_h * grid_w,
            "MsVssBlock: token count " + std::to_string(patches.value().rank() == 3 ? patches.dim(1) : 0) +
                " is not the declared " + std::to_string(grid_h) + "x" + std::to_string(grid_w) + " grid");
    const std::size_t f = patches.dim(0), d = patches.dim(2);
    auto grid = ops::reshape(patches, {f, grid_h, grid_w, d});
    Var<T> sum;
    for (auto id : kernels_) {
      auto branch = ops::dwconv2d(grid, ss.param(id));
      sum = sum.defined() ? ops::add(sum, branch) : branch;
    }
    return ops::reshape(sum, {f, grid_h * grid_w, d});
  }

  Var<T> forward(Session<T>& ss, const Var<T>& patches, std::size_t grid_h, std::size_t grid_w) const {
    auto x = multiscale_conv(ss, patches, grid_h, grid_w);
    return vssb_.forward(ss, ops::add(x, patches), grid_h, grid_w);
  }

  const std::vector<ParamId>& kernel_ids() const { return kernels_; }
  const VssBlock<T>& vssb() const { return vssb_; }

 private:
  BlockConfig cfg_;
  std::vector<ParamId> kernels_;
  VssBlock<T> vssb_;
};

// Temporal Mamba block: scans each spatial token along time. The public
// layout is (w x N x D); forward_token_major takes (N x w x D) so a stack of
// blocks only transposes once.
template <typename T>
class TemporalMambaBlock {
 public:
  TemporalMambaBlock() = default;
  TemporalMambaBlock(ParamStore<T>& store, const std::string& prefix, const BlockConfig& cfg,
                     Initializer& init)
      : core_(store, prefix, cfg, init, false) {}

  Var<T> forward(Session<T>& ss, const Var<T>& diff_tokens) const {
    require(diff_tokens.value().rank() == 3, "TemporalMambaBlock: input must be (w x N x D)");
    return ops::swap_axes01(forward_token_major(ss, ops::swap_axes01(diff_tokens)));
  }
  Var<T> forward_token_major(Session<T>& ss, const Var<T>& x) const { return core_.forward(ss, x); }
  Var<T> branch_token_major(Session<T>& ss, const Var<T>& x) const { return core_.branch(ss, x); }
  const StateSpaceBlock<T>& core() const { return core_; }

 private:
  StateSpaceBlock<T> core_;
};

}  // namespace m2s2l
