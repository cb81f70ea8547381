// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "m2s2l/checkpoint.hpp"
#include "m2s2l/config.hpp"
#include "m2s2l/data_pipeline.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/fpenv.hpp"
#include "m2s2l/model.hpp"
#include "m2s2l/objective_scoring.hpp"
#include "m2s2l/optim.hpp"

namespace m2s2l {

struct LossLogRow {
  std::size_t step = 0;
  double frame = 0, motion = 0, separate = 0, total = 0;
};

inline constexpr const char* kLossLogHeader = "step,l_frame,l_motion,l_separate,l_total";

// Creates the file with a header when missing; rows at or after the first
// new step are dropped first so a resumed run never duplicates steps.
inline void append_loss_log(const std::filesystem::path& path, const std::vector<LossLogRow>& rows) {
  std::vector<std::string> keep;
  if (std::filesystem::exists(path) && !rows.empty()) {
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line))
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) < rows.front().step) keep.push_back(line);
  }
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << kLossLogHeader << "\n";
  for (const auto& l : keep) os << l << "\n";
  os << std::setprecision(9);
  for (const auto& r : rows)
    os << r.step << "," << r.frame << "," << r.motion << "," << r.separate << "," << r.total << "\n";
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<LossLogRow> read_loss_log(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kLossLogHeader) throw IoError(path.string() + ": bad loss log header");
  std::vector<LossLogRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    LossLogRow r;
    char c;
    std::istringstream ls(line);
    if (!(ls >> r.step >> c >> r.frame >> c >> r.motion >> c >> r.separate >> c >> r.total))
      throw IoError(path.string() + ": malformed row '" + line + "'");
    out.push_back(r);
  }
  return out;
}

namespace detail {

inline bool same_model_section(const RunConfig& a, const RunConfig& b) {
  const auto va = config_values(a), vb = config_values(b);
  for (const auto& [k, v] : va)
    if ((k.rfind("model.", 0) == 0 || k.rfind("ablation.", 0) == 0) && vb.at(k) != v) return false;
  return true;
}

}  // namespace detail

class Trainer {
 public:
  explicit Trainer(RunConfig cfg)
      : cfg_(std::move(cfg)), model_((cfg_.validate(), cfg_.model), cfg_.seed), adam_(model_.params(), cfg_.train.adam) {}

  const RunConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }
  const Model<float>& model() const { return model_; }
  const Adam<float>& optimizer() const { return adam_; }
  std::size_t step() const { return step_; }

  std::size_t steps_per_epoch(std::size_t n_windows) const {
    return (n_windows + cfg_.train.batch_size - 1) / cfg_.train.batch_size;
  }

  std::size_t total_steps(std::size_t n_windows) const {
    std::size_t t = cfg_.train.epochs * steps_per_epoch(n_windows);
    if (cfg_.train.max_steps > 0) t = std::min(t, cfg_.train.max_steps);
    return t;
  }

  // Window order for an epoch depends only on (seed, epoch).
  std::vector<std::size_t> epoch_order(std::size_t n_windows, std::size_t epoch) const {
    std::vector<std::size_t> order(n_windows);
    std::iota(order.begin(), order.end(), 0);
    std::seed_seq sq{std::uint32_t(cfg_.seed), std::uint32_t(cfg_.seed >> 32), std::uint32_t(epoch), 0x5eedu};
    std::mt19937_64 rng(sq);
    std::shuffle(order.begin(), order.end(), rng);
    return order;
  }

  // One optimizer step over the given windows.
  LossLogRow train_step(const std::vector<Tensor<float>>& batch, double lr) {
    require(!batch.empty(), "train_step: empty batch");
    const FlushSubnormals ftz;
    auto& store = model_.params();
    store.zero_grad();
    const float scale = 1.0f / float(batch.size());
    const LossFlags flags = model_.effective_flags(cfg_.loss_flags);
    LossLogRow row;
    row.step = step_;
    std::vector<std::vector<Tensor<float>>> queries;
    for (const auto& window : batch) {
      Session<float> ss(store, true);
      auto r = model_.forward(ss, window);
      auto parts = model_.losses(r, cfg_.loss, flags);
      const double lf = parts.frame.value()[0];
      const double lm = parts.motion.defined() ? double(parts.motion.value()[0]) : 0.0;
      const double ls = parts.separate.defined() ? double(parts.separate.value()[0]) : 0.0;
      for (auto [name, v] : {std::pair{"l_frame", lf}, std::pair{"l_motion", lm}, std::pair{"l_separate", ls}})
        if (!std::isfinite(v))
          throw NonFiniteLossError("non-finite " + std::string(name) + " at step " + std::to_string(step_));
      backward(loss_total(parts, cfg_.loss, flags));
      ss.accumulate_grads(store, scale);
      row.frame += lf / double(batch.size());
      row.motion += lm / double(batch.size());
      row.separate += ls / double(batch.size());
      queries.push_back(std::move(r.queries));
    }
    row.total = loss_total(row.frame, row.motion, row.separate, cfg_.loss, flags);
    adam_.step(store, lr);
    model_.write_memory(queries, Mode::kTrain);
    ++step_;
    return row;
  }

  // Runs from the current step to total_steps over stride-1 windows of the clips.
  std::vector<LossLogRow> fit(const std::vector<Clip>& clips,
                              const std::function<void(const LossLogRow&, std::size_t total)>& on_step = {}) {
    const std::size_t k = cfg_.model.k;
    const auto windows = iterate_windows(clips, k);
    if (windows.empty()) throw ConfigError("no training windows: every clip is shorter than k + 1 frames");
    const std::size_t spe = steps_per_epoch(windows.size()), total = total_steps(windows.size());
    std::vector<LossLogRow> rows;
    std::size_t cached_epoch = SIZE_MAX;
    std::vector<std::size_t> order;
    while (step_ < total) {
      const std::size_t epoch = step_ / spe, b = step_ % spe;
      if (epoch != cached_epoch) {
        order = epoch_order(windows.size(), epoch);
        cached_epoch = epoch;
      }
      std::vector<Tensor<float>> batch;
      const std::size_t bs = cfg_.train.batch_size;
      for (std::size_t i = b * bs; i < std::min(order.size(), (b + 1) * bs); ++i)
        batch.push_back(window_tensor<float>(clips, windows[order[i]], k));
      rows.push_back(train_step(batch, cfg_.train.decay.at(cfg_.train.adam.lr, epoch)));
      if (on_step) on_step(rows.back(), total);
    }
    return rows;
  }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.config_text = serialize_config(cfg_);
    ck.state["step"] = std::to_string(step_);
    ck.state["adam_steps"] = std::to_string(adam_.steps());
    const auto& store = model_.params();
    for (std::size_t id = 0; id < store.count(); ++id) {
      const auto& p = store[id];
      ck.add("param/" + p.name, p.value);
      ck.add("adam.m/" + p.name, adam_.first_moments()[id]);
      ck.add("adam.v/" + p.name, adam_.second_moments()[id]);
    }
    for (const auto& bank : model_.banks()) ck.add("memory/" + bank.name(), bank.slots());
    return ck;
  }

  void save(const std::filesystem::path& path) const { save_checkpoint(path, checkpoint()); }

  // Restores weights, optimizer moments, memory and the step counter.
  void restore(const Checkpoint& ck) {
    auto& store = model_.params();
    for (std::size_t id = 0; id < store.count(); ++id) {
      auto& p = store[id];
      auto load = [&](const std::string& key, Tensor<float>& dst) {
        const auto& src = ck.get(key + p.name);
        if (src.shape() != dst.shape())
          throw ConfigError("checkpoint entry " + key + p.name + " has shape " + shape_str(src.shape()) +
                            ", model expects " + shape_str(dst.shape()));
        dst = src;
      };
      load("param/", p.value);
      load("adam.m/", adam_.first_moments()[id]);
      load("adam.v/", adam_.second_moments()[id]);
    }
    for (auto& bank : model_.banks()) {
      const auto& s = ck.get("memory/" + bank.name());
      if (s.shape() != bank.slots().shape()) throw ConfigError("checkpoint memory bank " + bank.name() + " shape mismatch");
      bank.set_slots(s);
    }
    step_ = std::stoull(ck.state_value("step"));
    adam_.set_steps(std::stoull(ck.state_value("adam_steps")));
  }

  // Rebuilds a trainer from a checkpoint. overrides may change training and
  // scoring settings but not the architecture.
  static Trainer from_checkpoint(const Checkpoint& ck, const RunConfig* overrides = nullptr) {
    RunConfig saved = parse_config(ck.config_text);
    if (overrides && !detail::same_model_section(saved, *overrides))
      throw ConfigError("config does not match the architecture stored in the checkpoint");
    Trainer t(overrides ? *overrides : saved);
    t.restore(ck);
    return t;
  }

  static Trainer from_checkpoint(const std::filesystem::path& path, const RunConfig* overrides = nullptr) {
    return from_checkpoint(load_checkpoint(path), overrides);
  }

 private:
  RunConfig cfg_;
  Model<float> model_;
  Adam<float> adam_;
  std::size_t step_ = 0;
};

// ------------------------------------------------------------------ scoring

// Raw PSNRs for every window of a clip; frame_index is the target frame.
inline std::vector<ScoreRecord> score_clip(const Model<float>& model, const Clip& clip, double psnr_ceiling) {
  const FlushSubnormals ftz;
  const std::size_t k = model.config().k;
  if (clip.height != model.config().frame_h || clip.width != model.config().frame_w)
    throw ConfigError("clip " + clip.name + " is " + std::to_string(clip.height) + "x" + std::to_string(clip.width) +
                      " but the model expects " + std::to_string(model.config().frame_h) + "x" +
                      std::to_string(model.config().frame_w));
  std::vector<ScoreRecord> out;
  const std::vector<Clip> one{clip};
  for (const auto& w : iterate_windows(one, k)) {
    Session<float> ss(model.params(), false);
    const auto r = model.forward(ss, window_tensor<float>(one, w, k));
    ScoreRecord rec;
    rec.frame_index = long(w.target);
    rec.label = w.label;
    rec.psnr_frame = psnr(r.v_hat.value(), r.v, 1.0, psnr_ceiling);
    rec.psnr_motion = psnr(r.m_hat.value(), r.m, 1.0, psnr_ceiling);
    out.push_back(rec);
  }
  return out;
}

// Scores every clip and normalizes per clip or over all clips.
inline std::map<std::string, std::vector<ScoreRecord>> score_clips(
    const Model<float>& model, const std::vector<Clip>& clips, const ScoreConfig& sc,
    const std::function<void(const std::string&)>& on_clip = {}) {
  std::map<std::string, std::vector<ScoreRecord>> out;
  std::vector<std::vector<ScoreRecord>> seqs;
  std::vector<std::string> names;
  for (const auto& c : clips) {
    auto recs = score_clip(model, c, sc.psnr_ceiling);
    if (recs.empty()) continue;
    seqs.push_back(std::move(recs));
    names.push_back(c.name);
    if (on_clip) on_clip(c.name);
  }
  const double alpha = sc.effective_alpha();
  if (sc.global_normalization) {
    if (!seqs.empty()) combine_and_normalize_global(seqs, alpha);
  } else {
    for (auto& s : seqs) combine_and_normalize(s, alpha);
  }
  for (std::size_t i = 0; i < seqs.size(); ++i) out[names[i]] = std::move(seqs[i]);
  return out;
}

}  // namespace m2s2l
