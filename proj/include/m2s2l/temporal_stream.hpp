// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "m2s2l/autodiff.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/init.hpp"
#include "m2s2l/ops.hpp"
#include "m2s2l/spatial_stream.hpp"
#include "m2s2l/ssm_core.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l {

template <typename T>
struct MotionDifference {
  Tensor<T> d;  // (w x H x W x C)
  std::size_t window() const { return d.dim(0); }
};

template <typename T>
struct TemporalResult {
  Var<T> out;                   // (k x N_1 x D)
  Var<T> weights;               // (n_scales)
  std::vector<Var<T>> per_scale;  // (w_j x N_1 x D)
};

// The trailing w successive differences of a (T x H x W x C) clip:
// d_i = V[T-w+i] - V[T-w+i-1].
template <typename T>
MotionDifference<T> frame_difference(const Tensor<T>& clip, std::size_t w) {
  require(clip.rank() == 4, "frame_difference: clip must be (T x H x W x C)");
  require(w >= 1, "frame_difference: window must be >= 1");
  const std::size_t n = clip.dim(0);
  require(n >= w + 1, "frame_difference: clip has " + std::to_string(n) + " frames, window " +
                          std::to_string(w) + " needs " + std::to_string(w + 1));
  const std::size_t frame = clip.size() / n, first = n - w;
  Shape s = clip.shape();
  s[0] = w;
  MotionDifference<T> out{Tensor<T>(s)};
  for (std::size_t i = 0; i < w; ++i) {
    const T* cur = clip.data() + (first + i) * frame;
    const T* prev = cur - frame;
    T* dst = out.d.data() + i * frame;
    for (std::size_t q = 0; q < frame; ++q) dst[q] = cur[q] - prev[q];
  }
  return out;
}

// Fixed sinusoidal table (len x d): even channels sin, odd channels cos.
template <typename T>
Tensor<T> sinusoidal_encoding(std::size_t len, std::size_t d) {
  Tensor<T> pe({len, d});
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -double(i - i % 2) / double(d));
      const double a = double(t) * freq;
      pe.at(t, i) = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
    }
  return pe;
}

namespace ops {

// x (w x N x D) + pe (w x D) broadcast over tokens.
template <typename T>
Var<T> add_time_encoding(const Var<T>& x, const Tensor<T>& pe) {
  require(x.value().rank() == 3 && pe.rank() == 2 && pe.dim(0) == x.dim(0) && pe.dim(1) == x.dim(2),
          "add_time_encoding: shape mismatch");
  const std::size_t w = x.dim(0), n = x.dim(1), d = x.dim(2);
  Tensor<T> out = x.value();
  for (std::size_t t = 0; t < w; ++t)
    for (std::size_t q = 0; q < n; ++q)
      for (std::size_t c = 0; c < d; ++c) out[(t * n + q) * d + c] += pe[t * d + c];
  return make_op<T>(std::move(out), {x}, [](Node<T>& self) { detail::axpy(parent_grad(self, 0), self.grad); });
}

}  // namespace ops

struct TemporalConfig {
  std::vector<std::size_t> windows{4, 8, 16};
  std::size_t patch = 4;  // finest spatial patch size r_1
  std::size_t frame_h = 256, frame_w = 256;
  std::size_t k = 16;     // input frames per clip

  void validate() const {
    if (windows.empty()) throw ConfigError("TemporalConfig: no temporal windows");
    for (auto w : windows)
      if (w == 0) throw ConfigError("TemporalConfig: windows must be positive");
    if (k < 2) throw ConfigError("TemporalConfig: k must be >= 2 to form a frame difference");
    if (patch == 0 || frame_h % patch != 0 || frame_w % patch != 0)
      throw ConfigError("TemporalConfig: patch size does not divide the frame");
  }

  // k input frames give at most k - 1 differences.
  std::size_t effective_window(std::size_t j) const { return std::min(windows.at(j), k - 1); }
  std::size_t n_tokens() const { return (frame_h / patch) * (frame_w / patch); }
};

// Temporal stream: per-window difference embedding, TMB stack scanning along
// time, linear time resampling to k and attention over scales. With
// multi_temporal off only the first window is built.
template <typename T>
class TemporalStream {
 public:
  TemporalStream() = default;
  TemporalStream(ParamStore<T>& store, const std::string& prefix, const TemporalConfig& tcfg,
                 const BlockConfig& bcfg, bool multi_temporal, Initializer& init)
      : tcfg_(tcfg), bcfg_(bcfg) {
    tcfg_.validate();
    bcfg_.validate();
    n_scales_ = multi_temporal ? tcfg_.windows.size() : 1;
    if (multi_temporal && n_scales_ != 3)
      throw ConfigError("TemporalStream: multi-temporal aggregation needs exactly 3 windows, got " +
                        std::to_string(n_scales_));
    const std::size_t d = bcfg_.d_model;
    for (std::size_t j = 0; j < n_scales_; ++j) {
      const std::string sp = prefix + ".scale" + std::to_string(j + 1);
      embeds_.emplace_back(store, sp + ".embed", tcfg_.patch, 3, d, init);
      std::vector<TemporalMambaBlock<T>> stack;
      for (std::size_t b = 0; b < bcfg_.n_blocks; ++b)
        stack.emplace_back(store, sp + ".block" + std::to_string(b), bcfg_, init);
      blocks_.push_back(std::move(stack));
      pe_.push_back(sinusoidal_encoding<T>(tcfg_.effective_window(j), d));
    }
    if (multi_temporal) attn_ = ScalarHead<T>(store, prefix + ".attn", d, 0, init);
  }

  std::size_t n_scales() const { return n_scales_; }
  const TemporalConfig& config() const { return tcfg_; }

  // (w_j x N_1 x D) before time resampling.
  Var<T> encode_temporal_scale(Session<T>& ss, const MotionDifference<T>& diff, std::size_t j) const {
    require(j < n_scales_, "TemporalStream: scale index out of range");
    require(diff.window() == pe_[j].dim(0), "TemporalStream: difference window " +
                                                std::to_string(diff.window()) + " != scale window " +
                                                std::to_string(pe_[j].dim(0)));
    auto x = embeds_[j].forward(ss, Var<T>::constant(diff.d));
    x = ops::add_time_encoding(x, pe_[j]);
    x = ops::swap_axes01(x);
    for (const auto& blk : blocks_[j]) x = blk.forward_token_major(ss, x);
    return ops::swap_axes01(x);
  }

  // (w x N x D) -> (k x N x D) by linear interpolation with matched end points.
  Var<T> resample_time(const Var<T>& h) const {
    if (h.dim(0) == tcfg_.k) return h;
    return ops::left_matmul_const(ops::interpolation_matrix<T>(tcfg_.k, h.dim(0), true), h);
  }

  Var<T> aggregation_weights(Session<T>& ss, const std::vector<Var<T>>& resized) const {
    if (resized.size() != 3)
      throw ConfigError("aggregate_scales: expected 3 scales, got " + std::to_string(resized.size()));
    std::vector<Var<T>> logits;
    for (const auto& h : resized) logits.push_back(attn_.forward(ss, ops::mean_rows(h)));
    return ops::softmax(ops::concat_lastdim(logits));
  }

  // Each input is already resampled to (k x N_1 x D).
  FusionResult<T> aggregate_scales(Session<T>& ss, const std::vector<Var<T>>& resized) const {
    auto w = aggregation_weights(ss, resized);
    return {ops::weighted_sum(resized, w), w};
  }

  // inputs: the k input frames (k x H x W x 3).
  TemporalResult<T> forward(Session<T>& ss, const Tensor<T>& inputs) const {
    require(inputs.rank() == 4 && inputs.dim(0) == tcfg_.k && inputs.dim(1) == tcfg_.frame_h &&
                inputs.dim(2) == tcfg_.frame_w,
            "TemporalStream: expected (" + std::to_string(tcfg_.k) + " x " + std::to_string(tcfg_.frame_h) +
                " x " + std::to_string(tcfg_.frame_w) + " x 3) inputs, got " + shape_str(inputs.shape()));
    TemporalResult<T> res;
    std::vector<Var<T>> resized;
    for (std::size_t j = 0; j < n_scales_; ++j) {
      auto h = encode_temporal_scale(ss, frame_difference(inputs, tcfg_.effective_window(j)), j);
      res.per_scale.push_back(h);
      resized.push_back(resample_time(h));
    }
    if (n_scales_ == 1) {
      res.out = resized[0];
      res.weights = Var<T>::constant(Tensor<T>({1}, T(1)));
    } else {
      auto agg = aggregate_scales(ss, resized);
      res.out = agg.out;
      res.weights = agg.weights;
    }
    return res;
  }

 private:
  TemporalConfig tcfg_;
  BlockConfig bcfg_;
  std::size_t n_scales_ = 0;
  std::vector<PatchEmbed<T>> embeds_;
  std::vector<std::vector<TemporalMambaBlock<T>>> blocks_;
  std::vector<Tensor<T>> pe_;
  ScalarHead<T> attn_;
};

}  // namespace m2s2l
