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
#include "m2s2l/ssm_core.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l {

struct PatchConfig {
  std::vector<std::size_t> resolutions{4, 8, 16};
  std::size_t embed_dim = 256;
  std::size_t frame_h = 256, frame_w = 256;

  void validate() const {
    if (resolutions.empty()) throw ConfigError("PatchConfig: no patch resolutions");
    for (std::size_t i = 0; i < resolutions.size(); ++i) {
      const std::size_t r = resolutions[i];
      if (r == 0 || frame_h % r != 0 || frame_w % r != 0)
        throw ConfigError("PatchConfig: patch size " + std::to_string(r) + " does not divide " +
                          std::to_string(frame_h) + "x" + std::to_string(frame_w));
      if (i > 0 && r <= resolutions[i - 1])
        throw ConfigError("PatchConfig: resolutions must be strictly increasing");
    }
    if (embed_dim == 0) throw ConfigError("PatchConfig: embed_dim must be positive");
  }

  std::size_t grid_h(std::size_t i) const { return frame_h / resolutions.at(i); }
  std::size_t grid_w(std::size_t i) const { return frame_w / resolutions.at(i); }
  std::size_t n_tokens(std::size_t i) const { return grid_h(i) * grid_w(i); }
};

template <typename T>
struct ScaleFeatures {
  Var<T> g;  // (k x N_i x D)
  std::size_t scale_index = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::size_t n_tokens() const { return grid_h * grid_w; }
};

// Fused features and the weights that produced them.
template <typename T>
struct FusionResult {
  Var<T> out;      // (k x N_1 x D)
  Var<T> weights;  // (n_scales)
};

namespace ops {

// (F x H x W x C) -> (F x N x r*r*C): non-overlapping r x r patches in raster
// order, each flattened as (row, col, channel).
template <typename T>
Var<T> patchify(const Var<T>& x, std::size_t r) {
  require(x.value().rank() == 4, "patchify: input must be (F x H x W x C)");
  const std::size_t f = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (r == 0 || h % r != 0 || w % r != 0)
    throw ConfigError("patchify: patch size " + std::to_string(r) + " does not divide " +
                      std::to_string(h) + "x" + std::to_string(w));
  const std::size_t gh = h / r, gw = w / r, row = r * c;
  Tensor<T> out({f, gh * gw, r * r * c});
  auto src_offset = [=](std::size_t fi, std::size_t pi, std::size_t pj, std::size_t y) {
    return ((fi * h + pi * r + y) * w + pj * r) * c;
  };
  auto dst_offset = [=](std::size_t fi, std::size_t pi, std::size_t pj, std::size_t y) {
    return ((fi * gh + pi) * gw + pj) * r * row + y * row;
  };
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t pi = 0; pi < gh; ++pi)
      for (std::size_t pj = 0; pj < gw; ++pj)
        for (std::size_t y = 0; y < r; ++y)
          std::copy_n(x.value().data() + src_offset(fi, pi, pj, y), row,
                      out.data() + dst_offset(fi, pi, pj, y));
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    auto* g = parent_grad(self, 0);
    for (std::size_t fi = 0; fi < f; ++fi)
      for (std::size_t pi = 0; pi < gh; ++pi)
        for (std::size_t pj = 0; pj < gw; ++pj)
          for (std::size_t y = 0; y < r; ++y) {
            const T* s = self.grad.data() + dst_offset(fi, pi, pj, y);
            T* d = g->data() + src_offset(fi, pi, pj, y);
            for (std::size_t q = 0; q < row; ++q) d[q] += s[q];
          }
  });
}

}  // namespace ops

// Linear patch embedding r*r*C_in -> D with bias.
template <typename T>
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamStore<T>& store, const std::string& prefix, std::size_t r, std::size_t c_in,
             std::size_t d, Initializer& init)
      : r_(r) {
    const std::size_t fan_in = r * r * c_in;
    w_ = store.add(prefix + ".w", init.normal<T>({fan_in, d}, 1.0 / std::sqrt(double(fan_in))));
    b_ = store.add(prefix + ".b", Initializer::constant<T>({d}, 0.0));
  }

  Var<T> forward(Session<T>& ss, const Var<T>& frames) const {
    return ops::linear(ops::patchify(frames, r_), ss.param(w_), ss.param(b_));
  }
  std::size_t patch() const { return r_; }

 private:
  std::size_t r_ = 0;
  ParamId w_{}, b_{};
};

// clip (k x H x W x 3) -> embedded patches (k x N x C).
template <typename T>
Var<T> patch_partition(Session<T>& ss, const Var<T>& clip, const PatchEmbed<T>& embed) {
  return embed.forward(ss, clip);
}

// Scores a pooled (D) summary with a small MLP and returns a (1) logit.
template <typename T>
class ScalarHead {
 public:
  ScalarHead() = default;
  ScalarHead(ParamStore<T>& store, const std::string& prefix, std::size_t d, std::size_t hidden,
             Initializer& init)
      : hidden_(hidden) {
    if (hidden_ > 0) {
      w1_ = store.add(prefix + ".w1", init.normal<T>({d, hidden}, 1.0 / std::sqrt(double(d))));
      b1_ = store.add(prefix + ".b1", Initializer::constant<T>({hidden}, 0.0));
      w2_ = store.add(prefix + ".w2", init.normal<T>({hidden, 1}, 1.0 / std::sqrt(double(hidden))));
    } else {
      w2_ = store.add(prefix + ".w", init.normal<T>({d, 1}, 1.0 / std::sqrt(double(d))));
    }
    b2_ = store.add(prefix + ".b", Initializer::constant<T>({1}, 0.0));
  }

  Var<T> forward(Session<T>& ss, const Var<T>& summary) const {
    auto x = ops::reshape(summary, {1, summary.size()});
    if (hidden_ > 0) x = ops::silu(ops::linear(x, ss.param(w1_), ss.param(b1_)));
    return ops::reshape(ops::linear(x, ss.param(w2_), ss.param(b2_)), {1});
  }

 private:
  std::size_t hidden_ = 0;
  ParamId w1_{}, b1_{}, w2_{}, b2_{};
};

// Spatial stream: per-scale patch embedding and MS-VSSB encoders, fused to
// the finest grid by softmax importance weights. With multi_scale off only
// the finest scale is built and the fusion weight is 1.
template <typename T>
class SpatialStream {
 public:
  SpatialStream() = default;
  SpatialStream(ParamStore<T>& store, const std::string& prefix, const PatchConfig& pcfg,
                const BlockConfig& bcfg, bool multi_scale, Initializer& init)
      : pcfg_(pcfg), bcfg_(bcfg) {
    pcfg_.validate();
    bcfg_.validate();
    if (pcfg_.embed_dim != bcfg_.d_model)
      throw ConfigError("SpatialStream: embed_dim must equal d_model");
    if (multi_scale && pcfg_.resolutions.size() != 3)
      throw ConfigError("SpatialStream: multi-scale fusion needs exactly 3 patch resolutions, got " +
                        std::to_string(pcfg_.resolutions.size()));
    n_scales_ = multi_scale ? pcfg_.resolutions.size() : 1;
    const std::size_t d = bcfg_.d_model;
    for (std::size_t i = 0; i < n_scales_; ++i) {
      const std::string sp = prefix + ".scale" + std::to_string(i + 1);
      embeds_.emplace_back(store, sp + ".embed", pcfg_.resolutions[i], 3, d, init);
      std::vector<MsVssBlock<T>> stack;
      for (std::size_t b = 0; b < bcfg_.n_blocks; ++b)
        stack.emplace_back(store, sp + ".block" + std::to_string(b), bcfg_, init);
      blocks_.push_back(std::move(stack));
    }
    if (multi_scale) beta_ = ScalarHead<T>(store, prefix + ".beta", d, std::max<std::size_t>(d / 4, 1), init);
  }

  std::size_t n_scales() const { return n_scales_; }
  const PatchConfig& patch_config() const { return pcfg_; }

  ScaleFeatures<T> encode_scale(Session<T>& ss, const Var<T>& clip, std::size_t i) const {
    require(i < n_scales_, "SpatialStream: scale index out of range");
    ScaleFeatures<T> out{patch_partition(ss, clip, embeds_[i]), i, pcfg_.grid_h(i), pcfg_.grid_w(i)};
    for (const auto& blk : blocks_[i]) out.g = blk.forward(ss, out.g, out.grid_h, out.grid_w);
    return out;
  }

  // Softmax over the per-scale logits.
  Var<T> fusion_weights(Session<T>& ss, const std::vector<ScaleFeatures<T>>& feats) const {
    if (feats.size() != 3)
      throw ConfigError("fuse_scales: expected 3 scales, got " + std::to_string(feats.size()));
    std::vector<Var<T>> betas;
    for (const auto& f : feats) betas.push_back(beta_.forward(ss, ops::mean_rows(f.g)));
    return ops::softmax(ops::concat_lastdim(betas));
  }

  FusionResult<T> fuse_scales(Session<T>& ss, const std::vector<ScaleFeatures<T>>& feats) const {
    auto w = fusion_weights(ss, feats);
    return {resize_and_sum(feats, w), w};
  }

  FusionResult<T> forward(Session<T>& ss, const Var<T>& clip) const {
    std::vector<ScaleFeatures<T>> feats;
    for (std::size_t i = 0; i < n_scales_; ++i) feats.push_back(encode_scale(ss, clip, i));
    if (n_scales_ == 1) return {feats[0].g, Var<T>::constant(Tensor<T>({1}, T(1)))};
    return fuse_scales(ss, feats);
  }

  // Weighted sum of the scales after bilinear resizing to the finest grid.
  static Var<T> resize_and_sum(const std::vector<ScaleFeatures<T>>& feats, const Var<T>& w) {
    const std::size_t h1 = feats[0].grid_h, w1 = feats[0].grid_w;
    std::vector<Var<T>> resized;
    for (const auto& f : feats) {
      const std::size_t k = f.g.dim(0), d = f.g.dim(2);
      auto grid = ops::reshape(f.g, {k, f.grid_h, f.grid_w, d});
      resized.push_back(ops::reshape(ops::resize_bilinear(grid, h1, w1), {k, h1 * w1, d}));
    }
    return ops::weighted_sum(resized, w);
  }

 private:
  PatchConfig pcfg_;
  BlockConfig bcfg_;
  std::size_t n_scales_ = 0;
  std::vector<PatchEmbed<T>> embeds_;
  std::vector<std::vector<MsVssBlock<T>>> blocks_;
  ScalarHead<T> beta_;
};

}  // namespace m2s2l
