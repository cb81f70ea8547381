// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "m2s2l/autodiff.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/ops.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l {

struct LossWeights {
  double lambda_m = 0.5;
  double lambda_s = 0.1;
  double lambda_g = 0.2;
  double lambda_ssim = 0.5;

  void validate() const {
    if (lambda_m < 0 || lambda_s < 0 || lambda_g < 0 || lambda_ssim < 0)
      throw ConfigError("LossWeights: all weights must be >= 0");
  }
};

// Which terms enter the total (L1: frame only, L2: + motion, L3: + separate).
struct LossFlags {
  bool use_motion_loss = true;
  bool use_separate_loss = true;
};

template <typename T>
struct LossParts {
  Var<T> frame, motion, separate;  // motion/separate may be undefined when disabled
};

template <typename T>
Var<T> loss_frame(const Var<T>& v_hat, const Tensor<T>& v, double lambda_g) {
  require(v_hat.shape() == v.shape(), "loss_frame: shape mismatch");
  auto target = Var<T>::constant(v);
  auto l = ops::mean_square(ops::sub(v_hat, target));
  if (lambda_g == 0) return l;
  auto gx = ops::mean_abs(ops::sub(ops::forward_diff(v_hat, 1), ops::forward_diff(target, 1)));
  auto gy = ops::mean_abs(ops::sub(ops::forward_diff(v_hat, 0), ops::forward_diff(target, 0)));
  return ops::add(l, ops::scale(ops::add(gx, gy), T(lambda_g)));
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double data_range = 1.0;
  double k1 = 0.01, k2 = 0.03;
};

inline std::vector<double> gaussian_window(std::size_t n, double sigma) {
  std::vector<double> g(n);
  double z = 0;
  const double c = (double(n) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) z += (g[i] = std::exp(-(double(i) - c) * (double(i) - c) / (2 * sigma * sigma)));
  for (auto& v : g) v /= z;
  return g;
}

namespace detail {

// Gaussian-weighted local statistic over valid windows, per channel:
// out[(i*ow + j)*c + q] = sum_{u,v} g[u] g[v] a[((i+u)*w + j+v)*c + q].
inline std::vector<double> window_filter(const std::vector<double>& a, std::size_t h, std::size_t w, std::size_t c,
                                  const std::vector<double>& g) {
  const std::size_t n = g.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(oh * w * c, 0.0), out(oh * ow * c, 0.0);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t j = 0; j < w * c; ++j) rows[i * w * c + j] += g[u] * a[(i + u) * w * c + j];
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t v = 0; v < n; ++v)
        for (std::size_t q = 0; q < c; ++q) out[(i * ow + j) * c + q] += g[v] * rows[(i * w + j + v) * c + q];
  return out;
}

// Adjoint of window_filter: scatters per-window values back onto pixels.
inline std::vector<double> window_scatter(const std::vector<double>& b, std::size_t h, std::size_t w, std::size_t c,
                                          const std::vector<double>& g) {
  const std::size_t n = g.size(), oh = h - n + 1, ow = w - n + 1;
  std::vector<double> rows(oh * w * c, 0.0), out(h * w * c, 0.0);
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t v = 0; v < n; ++v)
        for (std::size_t q = 0; q < c; ++q) rows[(i * w + j + v) * c + q] += g[v] * b[(i * ow + j) * c + q];
  for (std::size_t i = 0; i < oh; ++i)
    for (std::size_t u = 0; u < n; ++u)
      for (std::size_t j = 0; j < w * c; ++j) out[(i + u) * w * c + j] += g[u] * rows[i * w * c + j];
  return out;
}

}  // namespace detail

// Mean SSIM between x (differentiable) and a fixed reference y, both
// (H x W x C), over all valid Gaussian windows and channels.
template <typename T>
Var<T> ssim(const Var<T>& x, const Tensor<T>& y, const SsimOptions& opt = {}) {
  require(x.shape() == y.shape() && y.rank() == 3, "ssim: inputs must be matching (H x W x C) images");
  const std::size_t h = y.dim(0), w = y.dim(1), c = y.dim(2), n = opt.window;
  require(h >= n && w >= n, "ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " is smaller than the " + std::to_string(n) + "x" + std::to_string(n) + " window");
  const auto g = gaussian_window(n, opt.sigma);
  const double c1 = std::pow(opt.k1 * opt.data_range, 2), c2 = std::pow(opt.k2 * opt.data_range, 2);
  const std::size_t px = h * w * c;
  std::vector<double> xv(px), yv(px), xx(px), yy(px), xy(px);
  for (std::size_t i = 0; i < px; ++i) {
    xv[i] = double(x.value()[i]);
    yv[i] = double(y[i]);
    xx[i] = xv[i] * xv[i];
    yy[i] = yv[i] * yv[i];
    xy[i] = xv[i] * yv[i];
  }
  auto mx = detail::window_filter(xv, h, w, c, g), my = detail::window_filter(yv, h, w, c, g);
  auto exx = detail::window_filter(xx, h, w, c, g), eyy = detail::window_filter(yy, h, w, c, g);
  auto exy = detail::window_filter(xy, h, w, c, g);
  const std::size_t m = mx.size();
  std::vector<double> d_mu(m), d_exx(m), d_exy(m);
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double a1 = 2 * mx[i] * my[i] + c1, a2 = 2 * (exy[i] - mx[i] * my[i]) + c2;
    const double b1 = mx[i] * mx[i] + my[i] * my[i] + c1;
    const double b2 = (exx[i] - mx[i] * mx[i]) + (eyy[i] - my[i] * my[i]) + c2;
    const double s = (a1 * a2) / (b1 * b2);
    total += s;
    d_mu[i] = s * (2 * my[i] / a1 - 2 * my[i] / a2 - 2 * mx[i] / b1 + 2 * mx[i] / b2);
    d_exx[i] = -s / b2;
    d_exy[i] = 2 * s / a2;
  }
  Tensor<T> out({1}, static_cast<T>(total / double(m)));
  return make_op<T>(std::move(out), {x}, [=](Node<T>& self) {
    const double scale = double(self.grad[0]) / double(m);
    auto s_mu = detail::window_scatter(d_mu, h, w, c, g);
    auto s_xx = detail::window_scatter(d_exx, h, w, c, g);
    auto s_xy = detail::window_scatter(d_exy, h, w, c, g);
    auto* gx = parent_grad(self, 0);
    for (std::size_t i = 0; i < px; ++i)
      (*gx)[i] += static_cast<T>(scale * (s_mu[i] + 2 * xv[i] * s_xx[i] + yv[i] * s_xy[i]));
  });
}

// Frame differences span [-1, 1].
inline SsimOptions motion_ssim_options() {
  SsimOptions o;
  o.data_range = 2.0;
  return o;
}

template <typename T>
Var<T> loss_motion(const Var<T>& m_hat, const Tensor<T>& m, double lambda_ssim,
                   const SsimOptions& opt = motion_ssim_options()) {
  require(m_hat.shape() == m.shape(), "loss_motion: shape mismatch");
  auto l = ops::mean_square(ops::sub(m_hat, Var<T>::constant(m)));
  if (lambda_ssim == 0) return l;
  auto dissim = ops::scale(ops::sub(Var<T>::constant(Tensor<T>({1}, T(1))), ssim(m_hat, m, opt)), T(lambda_ssim));
  return ops::add(l, dissim);
}

// -mean_t cos(a_t, m_t) + ||A_n M_n^T||_F^2 / N^2 on (N x D) token matrices,
// with A_n, M_n the row-normalized inputs.
template <typename T>
Var<T> loss_separate(const Var<T>& f_app, const Var<T>& f_motion) {
  require(f_app.shape() == f_motion.shape(), "loss_separate: shape mismatch");
  const std::size_t d = f_app.value().cols(), n = f_app.value().rows();
  auto a = ops::l2_normalize_rows(ops::reshape(f_app, {n, d}));
  auto b = ops::l2_normalize_rows(ops::reshape(f_motion, {n, d}));
  auto cos = ops::mean_all(ops::sum_lastdim(ops::mul(a, b)));
  auto frob = ops::mean_square(ops::matmul_nt(a, b));
  return ops::sub(frob, cos);
}

inline double loss_total(double frame, double motion, double separate, const LossWeights& w,
                         const LossFlags& f = {}) {
  double t = frame;
  if (f.use_motion_loss) t += w.lambda_m * motion;
  if (f.use_separate_loss) t += w.lambda_s * separate;
  return t;
}

template <typename T>
Var<T> loss_total(const LossParts<T>& p, const LossWeights& w, const LossFlags& f = {}) {
  Var<T> t = p.frame;
  if (f.use_motion_loss && p.motion.defined()) t = ops::add(t, ops::scale(p.motion, T(w.lambda_m)));
  if (f.use_separate_loss && p.separate.defined()) t = ops::add(t, ops::scale(p.separate, T(w.lambda_s)));
  return t;
}

// ------------------------------------------------------------------ scoring

inline constexpr double kPsnrCeiling = 60.0;

inline double psnr_from_mse(double mse, double max_val = 1.0, double ceiling = kPsnrCeiling) {
  if (mse < 1e-10) return ceiling;
  return std::min(ceiling, 10.0 * std::log10(max_val * max_val / mse));
}

template <typename T>
double psnr(const Tensor<T>& x_hat, const Tensor<T>& x, double max_val = 1.0, double ceiling = kPsnrCeiling) {
  require(x_hat.shape() == x.shape(), "psnr: shape mismatch");
  double mse = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = double(x_hat[i]) - double(x[i]);
    mse += d * d;
  }
  return psnr_from_mse(mse / double(x.size()), max_val, ceiling);
}

struct ScoreRecord {
  long frame_index = 0;
  double psnr_frame = 0, psnr_motion = 0, psnr_combined = 0;
  double anomaly_score = 0;
  int label = -1;  // -1 when unknown
};

// Combined PSNR per record. Does not normalize.
inline void combine(std::vector<ScoreRecord>& recs, double alpha) {
  require(alpha >= 0 && alpha <= 1, "combine: alpha must lie in [0, 1]");
  for (auto& r : recs) r.psnr_combined = alpha * r.psnr_frame + (1 - alpha) * r.psnr_motion;
}

// anomaly = 1 - (p - min) / (max - min) over the given range of records.
inline void normalize_scores(std::vector<ScoreRecord*>& recs) {
  require(!recs.empty(), "normalize_scores: empty sequence");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (auto* r : recs) {
    lo = std::min(lo, r->psnr_combined);
    hi = std::max(hi, r->psnr_combined);
  }
  for (auto* r : recs) r->anomaly_score = hi > lo ? 1.0 - (r->psnr_combined - lo) / (hi - lo) : 0.5;
}

inline void combine_and_normalize(std::vector<ScoreRecord>& recs, double alpha) {
  require(!recs.empty(), "combine_and_normalize: empty sequence");
  combine(recs, alpha);
  std::vector<ScoreRecord*> ptrs;
  for (auto& r : recs) ptrs.push_back(&r);
  normalize_scores(ptrs);
}

// One min-max range across every sequence instead of per sequence.
inline void combine_and_normalize_global(std::vector<std::vector<ScoreRecord>>& seqs, double alpha) {
  std::vector<ScoreRecord*> ptrs;
  for (auto& s : seqs) {
    combine(s, alpha);
    for (auto& r : s) ptrs.push_back(&r);
  }
  normalize_scores(ptrs);
}

inline const char* kScoresHeader = "frame_index,psnr_frame,psnr_motion,psnr_combined,anomaly_score";

inline void write_scores_csv(std::ostream& os, const std::vector<ScoreRecord>& recs) {
  os << kScoresHeader << "\n" << std::fixed << std::setprecision(6);
  for (const auto& r : recs)
    os << r.frame_index << "," << r.psnr_frame << "," << r.psnr_motion << "," << r.psnr_combined << ","
       << r.anomaly_score << "\n";
}

inline void write_scores_csv(const std::filesystem::path& path, const std::vector<ScoreRecord>& recs) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  write_scores_csv(os, recs);
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<ScoreRecord> read_scores_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != kScoresHeader)
    throw IoError(path.string() + ": expected header '" + std::string(kScoresHeader) + "'");
  std::vector<ScoreRecord> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ScoreRecord r;
    char c1, c2, c3, c4;
    if (!(ls >> r.frame_index >> c1 >> r.psnr_frame >> c2 >> r.psnr_motion >> c3 >> r.psnr_combined >> c4 >>
          r.anomaly_score) ||
        c1 != ',' || c2 != ',' || c3 != ',' || c4 != ',')
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed row");
    out.push_back(r);
  }
  return out;
}

}  // namespace m2s2l
