// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "m2s2l/autodiff.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/fusion_memory_decode.hpp"
#include "m2s2l/init.hpp"
#include "m2s2l/objective_scoring.hpp"
#include "m2s2l/ops.hpp"
#include "m2s2l/spatial_stream.hpp"
#include "m2s2l/ssm_core.hpp"
#include "m2s2l/temporal_stream.hpp"

namespace m2s2l {

// Architecture ladder: M1 = all three off, M2 = + multi_scale_spatial,
// M3 = + multi_temporal, M4 = + decompose.
struct AblationFlags {
  bool multi_scale_spatial = true;
  bool multi_temporal = true;
  bool decompose = true;
};

struct ModelConfig {
  std::size_t frame_h = 256, frame_w = 256;
  std::size_t k = 16;
  std::vector<std::size_t> patch_sizes{4, 8, 16};
  std::vector<std::size_t> windows{4, 8, 16};
  BlockConfig block;
  std::size_t memory_slots = 10;
  double memory_temperature = 0.1;
  AblationFlags ablation;

  PatchConfig patch_config() const {
    PatchConfig p;
    p.resolutions = patch_sizes;
    p.embed_dim = block.d_model;
    p.frame_h = frame_h;
    p.frame_w = frame_w;
    return p;
  }

  TemporalConfig temporal_config() const {
    TemporalConfig t;
    t.windows = windows;
    t.patch = patch_sizes.empty() ? 0 : patch_sizes[0];
    t.frame_h = frame_h;
    t.frame_w = frame_w;
    t.k = k;
    return t;
  }

  std::size_t grid_h() const { return frame_h / patch_sizes.at(0); }
  std::size_t grid_w() const { return frame_w / patch_sizes.at(0); }

  void validate() const {
    block.validate();
    patch_config().validate();
    temporal_config().validate();
    if (ablation.multi_scale_spatial && patch_sizes.size() != 3)
      throw ConfigError("model: multi-scale spatial fusion needs exactly 3 patch sizes");
    if (ablation.multi_temporal && windows.size() != 3)
      throw ConfigError("model: multi-temporal aggregation needs exactly 3 windows");
    if (memory_slots == 0) throw ConfigError("model: memory_slots must be >= 1");
    if (!(memory_temperature > 0)) throw ConfigError("model: memory_temperature must be > 0");
  }
};

template <typename T>
struct ForwardResult {
  Var<T> v_hat, m_hat;       // (H x W x 3)
  Tensor<T> v, m;            // targets: V_{t+1} and V_{t+1} - V_t
  FusedFeatures<T> feats;    // last time slice, (N_1 x D)
  Var<T> spatial_weights, temporal_weights;
  std::vector<Tensor<T>> queries;  // memory queries for common, app, motion (N_1 x D)
};

template <typename T>
struct LossValues {
  double frame = 0, motion = 0, separate = 0, total = 0;
};

template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Initializer init(seed);
    const std::size_t d = cfg_.block.d_model;
    spatial_ = SpatialStream<T>(store_, "spatial", cfg_.patch_config(), cfg_.block,
                                cfg_.ablation.multi_scale_spatial, init);
    temporal_ = TemporalStream<T>(store_, "temporal", cfg_.temporal_config(), cfg_.block,
                                  cfg_.ablation.multi_temporal, init);
    fusion_ = FusionDecomposer<T>(store_, "fusion", d, cfg_.ablation.decompose, init);
    const std::size_t r1 = cfg_.patch_sizes[0];
    dec_app_ = Decoder<T>(store_, "decoder_app", 4 * d, d, r1, DecoderHead::kAppearance, init);
    dec_motion_ = Decoder<T>(store_, "decoder_motion", 4 * d, d, r1, DecoderHead::kMotion, init);
    for (const char* name : {"memory.common", "memory.app", "memory.motion"})
      banks_.emplace_back(name, cfg_.memory_slots, d, cfg_.memory_temperature, init);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  std::vector<MemoryBank<T>>& banks() { return banks_; }
  const std::vector<MemoryBank<T>>& banks() const { return banks_; }
  const SpatialStream<T>& spatial() const { return spatial_; }
  const TemporalStream<T>& temporal() const { return temporal_; }

  // window: (k+1 x H x W x 3); the last frame is the prediction target.
  ForwardResult<T> forward(Session<T>& ss, const Tensor<T>& window) const {
    const std::size_t k = cfg_.k, h = cfg_.frame_h, w = cfg_.frame_w;
    require(window.rank() == 4 && window.dim(0) == k + 1 && window.dim(1) == h && window.dim(2) == w &&
                window.dim(3) == 3,
            "Model: expected a (" + std::to_string(k + 1) + " x " + std::to_string(h) + " x " +
                std::to_string(w) + " x 3) window, got " + shape_str(window.shape()));
    const std::size_t frame = h * w * 3;
    Tensor<T> inputs({k, h, w, 3}, std::vector<T>(window.data(), window.data() + k * frame));
    ForwardResult<T> r;
    r.v = Tensor<T>({h, w, 3}, std::vector<T>(window.data() + k * frame, window.data() + (k + 1) * frame));
    r.m = Tensor<T>({h, w, 3});
    for (std::size_t i = 0; i < frame; ++i) r.m[i] = r.v[i] - inputs[(k - 1) * frame + i];

    auto sp = spatial_.forward(ss, Var<T>::constant(inputs));
    auto tp = temporal_.forward(ss, inputs);
    r.spatial_weights = sp.weights;
    r.temporal_weights = tp.weights;

    // Normalization and decomposition act per token, so only the decoded
    // (last) time slice is carried forward.
    const std::size_t n = cfg_.grid_h() * cfg_.grid_w(), d = cfg_.block.d_model;
    auto last = [&](const Var<T>& x) { return ops::reshape(ops::slice_axis0(x, k - 1, 1), {n, d}); };
    r.feats = fusion_.decompose(ss, fusion_.fuse(ss, last(sp.out), last(tp.out)));

    auto common = with_prototype(r.feats.f_common, banks_[0]);
    auto app = with_prototype(r.feats.f_app, banks_[1]);
    auto motion = with_prototype(r.feats.f_motion, banks_[2]);
    const Shape grid{cfg_.grid_h(), cfg_.grid_w(), 4 * d};
    r.v_hat = dec_app_.forward(ss, ops::reshape(ops::concat_lastdim(std::vector<Var<T>>{common, app}), grid));
    r.m_hat = dec_motion_.forward(ss, ops::reshape(ops::concat_lastdim(std::vector<Var<T>>{common, motion}), grid));
    r.queries = {r.feats.f_common.value(), r.feats.f_app.value(), r.feats.f_motion.value()};
    return r;
  }

  // Separation is only meaningful when appearance and motion differ.
  LossFlags effective_flags(LossFlags f) const {
    if (!cfg_.ablation.decompose) f.use_separate_loss = false;
    return f;
  }

  LossParts<T> losses(const ForwardResult<T>& r, const LossWeights& w, const LossFlags& f) const {
    const LossFlags ef = effective_flags(f);
    LossParts<T> p;
    p.frame = loss_frame(r.v_hat, r.v, w.lambda_g);
    if (ef.use_motion_loss) p.motion = loss_motion(r.m_hat, r.m, w.lambda_ssim);
    if (ef.use_separate_loss) p.separate = loss_separate(r.feats.f_app, r.feats.f_motion);
    return p;
  }

  // Moves every bank toward the queries gathered over a batch.
  void write_memory(const std::vector<std::vector<Tensor<T>>>& batch_queries, Mode mode) {
    for (std::size_t b = 0; b < banks_.size(); ++b) {
      std::vector<T> rows;
      for (const auto& q : batch_queries) rows.insert(rows.end(), q[b].vec().begin(), q[b].vec().end());
      const std::size_t d = banks_[b].dim(), n = rows.size() / d;
      banks_[b].write(Tensor<T>({n, d}, std::move(rows)), mode);
    }
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  SpatialStream<T> spatial_;
  TemporalStream<T> temporal_;
  FusionDecomposer<T> fusion_;
  Decoder<T> dec_app_, dec_motion_;
  std::vector<MemoryBank<T>> banks_;
};

}  // namespace m2s2l
