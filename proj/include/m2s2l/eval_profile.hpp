// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "m2s2l/data_pipeline.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/fpenv.hpp"
#include "m2s2l/model.hpp"
#include "m2s2l/objective_scoring.hpp"

namespace m2s2l {

// ---------------------------------------------------------------------- AUC

// Mann-Whitney U / (n_pos * n_neg) with tied scores counted half.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), "roc_auc: scores and labels differ in length");
  std::size_t n_pos = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, "roc_auc: labels must be 0 or 1");
    n_pos += std::size_t(l);
  }
  const std::size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw UndefinedAucError("AUC is undefined: labels contain only " + std::string(n_pos ? "anomalous" : "normal") +
                            " frames");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // twice the rank sum keeps tied mid-ranks integral
  std::uint64_t rank2_pos = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const std::uint64_t mid2 = std::uint64_t(i + 1 + j);  // 2 * average 1-based rank
    for (std::size_t q = i; q < j; ++q)
      if (labels[idx[q]]) rank2_pos += mid2;
    i = j;
  }
  const std::uint64_t u2 = rank2_pos - std::uint64_t(n_pos) * (n_pos + 1);
  return double(u2) / (2.0 * double(n_pos) * double(n_neg));
}

struct EvalReport {
  double auc = 0;
  std::size_t n_frames = 0, n_anomalous = 0;
};

// scores: a scores CSV or a directory of <clip>.csv files.
// labels: a labels CSV (with a single scores file) or a clip store root.
inline EvalReport evaluate_scores(const std::filesystem::path& scores, const std::filesystem::path& labels) {
  namespace fs = std::filesystem;
  std::vector<std::pair<fs::path, fs::path>> pairs;
  if (fs::is_directory(scores)) {
    for (const auto& e : fs::directory_iterator(scores))
      if (e.path().extension() == ".csv") {
        const fs::path lab = fs::is_directory(labels) ? clip_dir(labels, e.path().stem().string()) / "labels.csv" : labels;
        pairs.emplace_back(e.path(), lab);
      }
    std::sort(pairs.begin(), pairs.end());
    if (pairs.empty()) throw IoError("no score CSVs in " + scores.string());
  } else {
    if (fs::is_directory(labels)) throw IoError("a single scores file needs a labels CSV, got directory " + labels.string());
    pairs.emplace_back(scores, labels);
  }
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& [sp, lp] : pairs) {
    const auto lab = read_labels(lp);
    for (const auto& r : read_scores_csv(sp)) {
      if (r.frame_index < 0 || std::size_t(r.frame_index) >= lab.size())
        throw IoError(sp.string() + ": frame " + std::to_string(r.frame_index) + " has no label in " + lp.string());
      s.push_back(r.anomaly_score);
      l.push_back(lab[std::size_t(r.frame_index)]);
    }
  }
  EvalReport rep;
  rep.n_frames = s.size();
  rep.n_anomalous = std::size_t(std::count(l.begin(), l.end(), 1));
  rep.auc = roc_auc(s, l);
  return rep;
}

// ------------------------------------------------------------------- params

template <typename T>
std::size_t count_params(const ParamStore<T>& store) {
  return store.numel();
}

template <typename T>
std::size_t count_params(const Model<T>& model) {
  return count_params(model.params());
}

// -------------------------------------------------------------------- FLOPs
// 2 FLOPs per multiply-accumulate. Normalization, activations, softmax,
// resizing and element-wise sums are not counted.

inline constexpr double kScanOpsPerState = 2;  // decay update + readout

namespace flops {

inline double linear(std::size_t d_in, std::size_t d_out, std::size_t tokens) {
  return 2.0 * double(d_in) * double(d_out) * double(tokens);
}
inline double conv(std::size_t k, std::size_t c_in, std::size_t c_out, std::size_t h, std::size_t w) {
  return 2.0 * double(k * k) * double(c_in) * double(c_out) * double(h) * double(w);
}
// one k x k filter per channel
inline double depthwise(std::size_t k, std::size_t c, std::size_t h, std::size_t w) {
  return 2.0 * double(k * k) * double(c) * double(h) * double(w);
}
inline double scan(std::size_t len, std::size_t d, std::size_t s) {
  return 2.0 * double(len) * double(d) * double(s) * kScanOpsPerState;
}

// n_seq sequences of length len; grid conv applied when gh * gw == len.
inline double ssm_block(const BlockConfig& b, std::size_t len, std::size_t n_seq, bool grid_conv, std::size_t gh = 0,
                        std::size_t gw = 0) {
  const std::size_t d = b.d_model, e = b.inner(), s = b.state_size, tokens = len * n_seq;
  const double dirs = b.bidirectional_scan ? 2 : 1;
  double f = linear(d, 2 * e, tokens) + linear(e, d, tokens);
  if (grid_conv) f += double(n_seq) * depthwise(b.conv_kernel, e, gh, gw);
  f += dirs * (2 * linear(e, s, tokens) + double(n_seq) * scan(len, e, s));
  return f;
}

inline double ms_vss_block(const BlockConfig& b, std::size_t gh, std::size_t gw, std::size_t frames) {
  double f = 0;
  for (auto k : b.dw_kernels) f += double(frames) * depthwise(k, b.d_model, gh, gw);
  return f + ssm_block(b, gh * gw, frames, true, gh, gw);
}

}  // namespace flops

struct FlopReport {
  std::vector<std::pair<std::string, double>> parts;  // in forward order
  double total() const {
    double t = 0;
    for (const auto& p : parts) t += p.second;
    return t;
  }
  double part(const std::string& name) const {
    for (const auto& p : parts)
      if (p.first == name) return p.second;
    throw ContractError("FlopReport: no part named " + name);
  }
};

// Per forward pass of one (k + 1)-frame window.
inline FlopReport estimate_flops(const ModelConfig& cfg) {
  if (cfg.frame_h == 0 || cfg.frame_w == 0 || cfg.k == 0)
    throw ConfigError("estimate_flops: frame size and k must be static and positive");
  cfg.validate();
  const auto& b = cfg.block;
  const std::size_t d = b.d_model, k = cfg.k, r1 = cfg.patch_sizes[0];
  const std::size_t gh1 = cfg.frame_h / r1, gw1 = cfg.frame_w / r1, n1 = gh1 * gw1;
  FlopReport rep;
  const std::size_t n_sp = cfg.ablation.multi_scale_spatial ? cfg.patch_sizes.size() : 1;
  for (std::size_t i = 0; i < n_sp; ++i) {
    const std::size_t r = cfg.patch_sizes[i], gh = cfg.frame_h / r, gw = cfg.frame_w / r;
    double f = flops::linear(r * r * 3, d, k * gh * gw);
    for (std::size_t blk = 0; blk < b.n_blocks; ++blk) f += flops::ms_vss_block(b, gh, gw, k);
    rep.parts.emplace_back("spatial.scale" + std::to_string(i + 1), f);
  }
  if (n_sp > 1) {
    const std::size_t hidden = std::max<std::size_t>(d / 4, 1);
    rep.parts.emplace_back("spatial.beta", double(n_sp) * (flops::linear(d, hidden, 1) + flops::linear(hidden, 1, 1)));
  }
  const auto tcfg = cfg.temporal_config();
  const std::size_t n_tp = cfg.ablation.multi_temporal ? cfg.windows.size() : 1;
  for (std::size_t j = 0; j < n_tp; ++j) {
    const std::size_t w = tcfg.effective_window(j);
    double f = flops::linear(r1 * r1 * 3, d, w * n1);
    for (std::size_t blk = 0; blk < b.n_blocks; ++blk) f += flops::ssm_block(b, w, n1, false);
    rep.parts.emplace_back("temporal.scale" + std::to_string(j + 1), f);
  }
  if (n_tp > 1) rep.parts.emplace_back("temporal.attn", double(n_tp) * flops::linear(d, 1, 1));
  if (cfg.ablation.decompose) rep.parts.emplace_back("fusion", 3 * 2 * flops::linear(d, d, n1));
  rep.parts.emplace_back("memory", 3 * 2 * flops::linear(d, cfg.memory_slots, n1));
  double dec = flops::conv(1, 4 * d, d, gh1, gw1);
  std::size_t ch = d, h = gh1, w = gw1;
  for (std::size_t s = 0; (std::size_t(1) << s) < r1; ++s) {
    const std::size_t next = std::max<std::size_t>(ch / 2, 4);
    h *= 2;
    w *= 2;
    dec += flops::conv(3, ch, next, h, w);
    ch = next;
  }
  dec += flops::conv(3, ch, 3, h, w);
  rep.parts.emplace_back("decoder_app", dec);
  rep.parts.emplace_back("decoder_motion", dec);
  return rep;
}

// ---------------------------------------------------------------------- FPS

struct FpsStats {
  double mean = 0, std = 0;
  std::vector<double> samples;
};

// Frames scored per second (one target frame per window) over repeats.
template <typename T>
FpsStats measure_fps(const Model<T>& model, const std::vector<Tensor<T>>& windows, std::size_t n_warmup,
                     std::size_t n_timed, std::size_t repeats = 5) {
  require(n_timed >= 1, "measure_fps: n_timed must be >= 1");
  const FlushSubnormals ftz;
  require(!windows.empty(), "measure_fps: no windows");
  require(repeats >= 1, "measure_fps: repeats must be >= 1");
  std::size_t next = 0;
  auto run = [&] {
    Session<T> ss(model.params(), false);
    auto r = model.forward(ss, windows[next++ % windows.size()]);
    volatile T sink = r.v_hat.value()[0];
    (void)sink;
  };
  for (std::size_t i = 0; i < n_warmup; ++i) run();
  FpsStats st;
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < n_timed; ++i) run();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    st.samples.push_back(double(n_timed) / secs);
  }
  st.mean = std::accumulate(st.samples.begin(), st.samples.end(), 0.0) / double(repeats);
  double var = 0;
  for (double s : st.samples) var += (s - st.mean) * (s - st.mean);
  st.std = repeats > 1 ? std::sqrt(var / double(repeats - 1)) : 0.0;
  return st;
}

struct ProfileReport {
  std::size_t params = 0;
  FlopReport flops;
  FpsStats fps;
  double params_m() const { return double(params) / 1e6; }
  double flops_g() const { return flops.total() / 1e9; }
};

// ------------------------------------------------------------------ reports

inline std::string eval_report_text(const EvalReport& r) {
  std::ostringstream os;
  os << "frame-level ROC AUC\n"
     << "  auc          " << std::fixed << std::setprecision(6) << r.auc << "\n"
     << "  frames       " << r.n_frames << "\n"
     << "  anomalous    " << r.n_anomalous << "\n";
  return os.str();
}

inline std::string profile_report_text(const ProfileReport& r) {
  std::ostringstream os;
  os << "efficiency profile (FLOPs counted as 2 x MAC, per window forward)\n" << std::fixed;
  os << "  params       " << r.params << " (" << std::setprecision(4) << r.params_m() << " M)\n";
  os << "  flops        " << std::setprecision(4) << r.flops_g() << " G\n";
  for (const auto& [name, f] : r.flops.parts)
    os << "    " << std::left << std::setw(20) << name << std::right << std::setprecision(4) << f / 1e9 << " G\n";
  os << "  fps          " << std::setprecision(3) << r.fps.mean << " +- " << r.fps.std << " (" << r.fps.samples.size()
     << " repeats)\n";
  return os.str();
}

inline std::map<std::string, std::string> read_kv(const std::filesystem::path& path) {
  std::map<std::string, std::string> kv;
  std::ifstream is(path);
  for (std::string line; std::getline(is, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// Merges into an existing key=value file so eval and profile share one report.
inline void update_kv(const std::filesystem::path& path, const std::map<std::string, std::string>& values) {
  auto kv = read_kv(path);
  for (const auto& [k, v] : values) kv[k] = v;
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

inline std::map<std::string, std::string> to_kv(const EvalReport& r) {
  return {{"auc", fmt(r.auc, 10)}, {"n_frames", std::to_string(r.n_frames)}, {"n_anomalous", std::to_string(r.n_anomalous)}};
}

inline std::map<std::string, std::string> to_kv(const ProfileReport& r) {
  return {{"params", std::to_string(r.params)},
          {"params_m", fmt(r.params_m(), 10)},
          {"flops", fmt(r.flops.total(), 15)},
          {"flops_g", fmt(r.flops_g(), 10)},
          {"fps_mean", fmt(r.fps.mean)},
          {"fps_std", fmt(r.fps.std)}};
}

}  // namespace m2s2l
