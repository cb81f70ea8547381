// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// nonzero if any criterion fails. Pass criterion numbers to run a subset.

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gradcheck.hpp"
#include "m2s2l/m2s2l.hpp"
#include "test_util.hpp"

namespace {

using namespace m2s2l;
using testing::check_input_gradients;
using testing::check_param_gradients;
using testing::random_projection;
using testing::random_tensor;
using V = Var<double>;
using Vs = std::vector<V>;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

// ------------------------------------------------------------ scan oracle

double silu(double v) { return v / (1.0 + std::exp(-v)); }

// One (t, channel, state) at a time, written from the recurrence alone.
Tensor<double> oracle_scan(const Tensor<double>& x, const SelectiveScanParams<double>& p) {
  const std::size_t len = x.dim(0), d = x.dim(1), s = p.w_b.dim(1);
  std::vector<double> h(d * s, 0.0);
  Tensor<double> y({len, d});
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t e = 0; e < d; ++e) {
      const double delta = std::exp(p.log_delta[e]);
      double acc = 0;
      for (std::size_t j = 0; j < s; ++j) {
        double ub = 0, uc = 0;
        for (std::size_t q = 0; q < d; ++q) {
          ub += x.at(t, q) * p.w_b.at(q, j);
          uc += x.at(t, q) * p.w_c.at(q, j);
        }
        const double a_bar = std::exp(-std::exp(delta) * std::exp(p.log_lambda.at(e, j)));
        double& hs = h[e * s + j];
        hs = a_bar * hs + delta * silu(ub) * x.at(t, e);
        acc += silu(uc) * hs;
      }
      y.at(t, e) = acc;
    }
  }
  return y;
}

SelectiveScanParams<double> random_scan_params(std::size_t d, std::size_t s, unsigned seed) {
  Initializer init(seed);
  SelectiveScanParams<double> p;
  p.log_delta = init.log_uniform_log<double>({d}, 0.05, 0.5);
  p.log_lambda = init.log_uniform_log<double>({d, s}, 0.02, 1.0);
  p.w_b = init.normal<double>({d, s}, 0.7);
  p.w_c = init.normal<double>({d, s}, 0.7);
  return p;
}

Outcome criterion_scan_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  std::mt19937 rng(2026);
  std::uniform_int_distribution<std::size_t> len(1, 32), dim(1, 8);
  double worst = 0;
  for (unsigned trial = 0; trial < 100; ++trial) {
    const std::size_t l = len(rng), d = dim(rng), s = dim(rng);
    const auto p = random_scan_params(d, s, 1000 + trial);
    const auto x = random_tensor({l, d}, 5000 + trial);
    const auto y = selective_scan(x, p), ref = oracle_scan(x, p);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      num += (y[i] - ref[i]) * (y[i] - ref[i]);
      den += ref[i] * ref[i];
    }
    worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-300));
  }
  const double el = seconds_since(t0);
  o.detail << "100 instances, worst rel err " << worst << ", " << el << " s";
  o.check(worst < 1e-6, "rel err < 1e-6");
  o.check(el < 10, "runtime < 10 s");
  return o;
}

// --------------------------------------------------------------- gradients

BlockConfig tiny_block(std::size_t d) {
  BlockConfig cfg;
  cfg.d_model = d;
  cfg.state_size = 3;
  cfg.n_blocks = 1;
  return cfg;
}

Tensor<double> uniform_image(std::size_t h, std::size_t w, unsigned seed, double lo, double hi) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t({h, w, 3});
  for (auto& v : t.vec()) v = u(rng);
  return t;
}

Outcome criterion_gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  std::vector<std::pair<std::string, double>> errs;
  auto record = [&](const std::string& name, const testing::GradCheckResult& r) {
    errs.emplace_back(name, r.rel_error);
    o.check(r.rel_error < 1e-3 && r.analytic_norm > 0, name);
  };

  {
    const std::size_t bt = 2, l = 6, d = 3, s = 4;
    const auto p = random_scan_params(d, s, 1);
    std::vector<Tensor<double>> in = {random_tensor({bt, l, d}, 2),
                                      ops::silu(V::constant(random_tensor({bt, l, s}, 3))).value(),
                                      random_tensor({bt, l, s}, 4), p.log_delta, p.log_lambda};
    record("selective_scan", check_input_gradients(
                                 [](const Vs& v) { return random_projection(selective_scan(v[0], v[1], v[2], v[3], v[4])); },
                                 in));
  }
  {
    ParamStore<double> store;
    Initializer init(5);
    MsVssBlock<double> blk(store, "m", tiny_block(4), init);
    const auto x = random_tensor({2, 9, 4}, 6);
    record("ms_vss_block.input", check_input_gradients(
                                     [&](const Vs& v) {
                                       Session<double> ss(store, false);
                                       return random_projection(blk.forward(ss, v[0], 3, 3));
                                     },
                                     {x}));
    record("ms_vss_block.params", check_param_gradients(store, [&](Session<double>& ss) {
             return random_projection(blk.forward(ss, V::constant(x), 3, 3));
           }));
  }
  {
    ParamStore<double> store;
    Initializer init(7);
    TemporalMambaBlock<double> blk(store, "t", tiny_block(4), init);
    const auto x = random_tensor({5, 3, 4}, 8);
    record("temporal_block.input", check_input_gradients(
                                       [&](const Vs& v) {
                                         Session<double> ss(store, false);
                                         return random_projection(blk.forward(ss, v[0]));
                                       },
                                       {x}));
    record("temporal_block.params", check_param_gradients(store, [&](Session<double>& ss) {
             return random_projection(blk.forward(ss, V::constant(x)));
           }));
  }
  {
    ParamStore<double> store;
    Initializer init(9);
    PatchConfig pc;
    pc.resolutions = {2, 4, 8};
    pc.embed_dim = 4;
    pc.frame_h = pc.frame_w = 16;
    SpatialStream<double> s(store, "spatial", pc, tiny_block(4), true, init);
    const std::vector<Tensor<double>> g = {random_tensor({2, 64, 4}, 10), random_tensor({2, 16, 4}, 11),
                                           random_tensor({2, 4, 4}, 12)};
    auto obj = [&](Session<double>& ss, const Vs& v) {
      std::vector<ScaleFeatures<double>> f = {{v[0], 0, 8, 8}, {v[1], 1, 4, 4}, {v[2], 2, 2, 2}};
      return random_projection(s.fuse_scales(ss, f).out);
    };
    record("fuse_scales.input", check_input_gradients(
                                    [&](const Vs& v) {
                                      Session<double> ss(store, false);
                                      return obj(ss, v);
                                    },
                                    g));
    record("fuse_scales.params", check_param_gradients(store, [&](Session<double>& ss) {
             return obj(ss, {V::constant(g[0]), V::constant(g[1]), V::constant(g[2])});
           }));
  }
  {
    ParamStore<double> store;
    Initializer init(13);
    FusionDecomposer<double> fd(store, "fusion", 4, true, init);
    const auto f = random_tensor({2, 3, 4}, 14);
    auto obj = [&](Session<double>& ss, const V& x) {
      auto out = fd.decompose(ss, x);
      return ops::add(random_projection(out.f_app, 1),
                      ops::add(random_projection(out.f_motion, 2), random_projection(out.f_common, 3)));
    };
    record("decompose.input", check_input_gradients(
                                  [&](const Vs& v) {
                                    Session<double> ss(store, false);
                                    return obj(ss, v[0]);
                                  },
                                  {f}));
    record("decompose.params",
           check_param_gradients(store, [&](Session<double>& ss) { return obj(ss, V::constant(f)); }));
  }
  {
    const auto target = uniform_image(12, 13, 15, 0, 1);
    record("loss_frame", check_input_gradients([&](const Vs& v) { return loss_frame(v[0], target, 0.2); },
                                               {uniform_image(12, 13, 16, 0, 1)}));
    const auto m = uniform_image(12, 13, 17, -1, 1);
    record("loss_motion", check_input_gradients([&](const Vs& v) { return loss_motion(v[0], m, 0.5); },
                                                {uniform_image(12, 13, 18, -1, 1)}, 128));
    record("loss_separate", check_input_gradients([](const Vs& v) { return loss_separate(v[0], v[1]); },
                                                  {random_tensor({6, 4}, 19), random_tensor({6, 4}, 20)}));
  }
  const double el = seconds_since(t0);
  double worst = 0;
  for (const auto& [n, e] : errs) worst = std::max(worst, e);
  o.detail << errs.size() << " checks, step " << testing::kFdStep << ", worst rel err " << worst << ", " << el << " s";
  o.check(el < 120, "runtime < 2 min");
  return o;
}

// ---------------------------------------------------------- loss identities

Outcome criterion_loss_identities() {
  Outcome o;
  const auto v = uniform_image(16, 16, 21, 0, 1);
  const auto m = uniform_image(16, 16, 22, -1, 1);
  const double lf = loss_frame(V::constant(v), v, 0.2).value()[0];
  const double lm = loss_motion(V::constant(m), m, 0.5).value()[0];
  o.check(lf == 0.0, "frame(V, V) == 0");
  o.check(std::abs(lm) < 1e-12, "motion(M, M) == 0");
  const LossWeights w;  // lambda_m 0.5, lambda_s 0.1
  const double l1 = loss_total(1, 2, 3, w, {false, false});
  const double l2 = loss_total(1, 2, 3, w, {true, false});
  const double l3 = loss_total(1, 2, 3, w, {true, true});
  o.check(l1 == 1.0, "L1 keeps only the frame term");
  o.check(std::abs(l2 - 2.0) < 1e-12, "L2 adds the motion term");
  o.check(std::abs(l3 - 2.3) < 1e-12, "(1, 2, 3) -> 2.3");
  LossParts<double> p{V::constant(Tensor<double>({1}, 1.0)), V::constant(Tensor<double>({1}, 2.0)),
                      V::constant(Tensor<double>({1}, 3.0))};
  o.check(loss_total(p, w, {false, false}).value()[0] == 1.0, "tensor L1");
  o.check(std::abs(loss_total(p, w).value()[0] - 2.3) < 1e-12, "tensor L3");
  o.detail << "frame(V,V)=" << lf << " motion(M,M)=" << lm << " ladder " << l1 << "/" << l2 << "/" << l3;
  return o;
}

// ------------------------------------------------------ probability vectors

Outcome criterion_probability_vectors() {
  Outcome o;
  BlockConfig b = tiny_block(4);
  PatchConfig pc;
  pc.resolutions = {2, 4, 8};
  pc.embed_dim = 4;
  pc.frame_h = pc.frame_w = 16;
  TemporalConfig tc;
  tc.windows = {2, 3, 5};
  tc.patch = 4;
  tc.frame_h = tc.frame_w = 8;
  tc.k = 6;
  double worst = 0, min_w = 1;
  auto inspect = [&](const Tensor<double>& w) {
    double sum = 0;
    for (double x : w.vec()) {
      min_w = std::min(min_w, x);
      sum += x;
    }
    worst = std::max(worst, std::abs(sum - 1.0));
  };
  for (unsigned i = 0; i < 100; ++i) {
    ParamStore<double> store;
    Initializer init(300 + i);
    SpatialStream<double> s(store, "spatial", pc, b, true, init);
    TemporalStream<double> t(store, "temporal", tc, b, true, init);
    const double scale = 0.1 + 0.1 * double(i % 30);
    Session<double> ss(store, false);
    std::vector<ScaleFeatures<double>> f = {{V::constant(random_tensor({2, 64, 4}, 3 * i, scale)), 0, 8, 8},
                                            {V::constant(random_tensor({2, 16, 4}, 3 * i + 1, scale)), 1, 4, 4},
                                            {V::constant(random_tensor({2, 4, 4}, 3 * i + 2, scale)), 2, 2, 2}};
    inspect(s.fusion_weights(ss, f).value());
    Vs hs;
    for (unsigned j = 0; j < 3; ++j) hs.push_back(V::constant(random_tensor({6, 4, 4}, 7000 + 3 * i + j, scale)));
    inspect(t.aggregation_weights(ss, hs).value());
  }
  o.detail << "200 vectors, min weight " << min_w << ", worst |sum - 1| " << worst;
  o.check(min_w >= 0, "nonnegative");
  o.check(worst <= 1e-6, "sum within 1e-6");
  return o;
}

// --------------------------------------------------------- scoring contract

// Every positive/negative pair, ties counted half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& l) {
  std::uint64_t twice = 0, np = 0, nn = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (l[i]) ++np; else ++nn;
    if (!l[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (!l[j]) twice += s[i] > s[j] ? 2 : s[i] == s[j] ? 1 : 0;
  }
  return double(twice) / (2.0 * double(np) * double(nn));
}

Outcome criterion_scoring() {
  Outcome o;
  std::mt19937 rng(77);
  std::uniform_real_distribution<double> u(10, 50);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ScoreRecord> r(12);
    for (auto& x : r) x.psnr_frame = u(rng), x.psnr_motion = u(rng);
    combine_and_normalize(r, 0.6);
    double lo = 1, hi = 0;
    for (const auto& x : r) lo = std::min(lo, x.anomaly_score), hi = std::max(hi, x.anomaly_score);
    o.check(lo == 0.0 && hi == 1.0, "normalized range [0, 1]");
    combine(r, 1.0);
    for (const auto& x : r) o.check(x.psnr_combined == x.psnr_frame, "alpha = 1 gives frame PSNR");
  }
  o.check(psnr_from_mse(1.0) == 0.0, "PSNR(MSE = MAX^2) = 0");
  o.check(psnr_from_mse(4.0, 2.0) == 0.0, "PSNR(MSE = MAX^2) = 0 for MAX = 2");
  std::uniform_int_distribution<int> n_dist(2, 20), level(0, 5);
  int exact = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = n_dist(rng);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (int i = 0; i < n; ++i) s[i] = level(rng) * 0.2, l[i] = rng() % 2;
    l[0] = 0;
    l[1] = 1;
    if (roc_auc(s, l) == pairwise_auc(s, l)) ++exact;
  }
  o.check(exact == 50, "AUC equals pairwise oracle");
  o.detail << "range/alpha/PSNR checks, AUC exact on " << exact << "/50";
  return o;
}

// ----------------------------------------------------------- desk benchmark

double pooled_auc(const std::map<std::string, std::vector<ScoreRecord>>& scores) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& [name, recs] : scores)
    for (const auto& r : recs) s.push_back(r.anomaly_score), l.push_back(r.label);
  return roc_auc(s, l);
}

double desk_auc(RunConfig cfg, const std::vector<Clip>& train, const std::vector<Clip>& test) {
  Trainer t(cfg);
  t.fit(train);
  return pooled_auc(score_clips(t.model(), test, cfg.score));
}

Outcome criterion_desk() {
  Outcome o;
  const auto t0 = Clock::now();
  const RunConfig base = load_config(std::string(M2S2L_SOURCE_DIR) + "/configs/desk.ini");
  std::vector<double> full, single;
  double slowest = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    RunConfig cfg = base;
    cfg.seed = seed;
    const auto spec = cfg.scene_spec();
    const auto train = generate_split(spec, "train", cfg.data.train_clips);
    const auto test = generate_split(spec, "test", cfg.data.test_clips);
    auto ts = Clock::now();
    full.push_back(desk_auc(cfg, train, test));
    slowest = std::max(slowest, seconds_since(ts));
    cfg.model.ablation = {false, false, false};
    ts = Clock::now();
    single.push_back(desk_auc(cfg, train, test));
    slowest = std::max(slowest, seconds_since(ts));
    std::cerr << "  desk seed " << seed << ": full " << full.back() << ", single-scale " << single.back() << " ("
              << seconds_since(t0) << " s)\n";
  }
  const double mf = std::accumulate(full.begin(), full.end(), 0.0) / 5;
  const double ms = std::accumulate(single.begin(), single.end(), 0.0) / 5;
  o.detail << std::setprecision(4) << "full AUC";
  for (double a : full) o.detail << " " << a;
  o.detail << " (mean " << mf << "), single-scale";
  for (double a : single) o.detail << " " << a;
  o.detail << " (mean " << ms << "), slowest run " << std::setprecision(3) << slowest << " s";
  o.check(mf >= 0.90, "full AUC >= 0.90");
  o.check(mf >= ms, "full >= single-scale");
  o.check(slowest <= 1800, "training within 30 min");
  return o;
}

// --------------------------------------------------------- linear complexity

Outcome criterion_linear() {
  Outcome o;
  const std::size_t d = 16, s = 16;
  const auto p = random_scan_params(d, s, 31);
  const std::vector<std::size_t> lens = {64, 128, 256, 512};
  std::vector<Tensor<double>> xs;
  for (std::size_t len : lens) xs.push_back(random_tensor({len, d}, unsigned(len)));
  std::vector<double> ls(lens.begin(), lens.end()), ts(lens.size(), 1e30);
  // lengths interleaved so background load hits every length alike
  for (int trial = 0; trial < 15; ++trial)
    for (std::size_t i = 0; i < lens.size(); ++i) {
      const int reps = int(16 * 512 / lens[i]);
      const auto t0 = Clock::now();
      double sink = 0;
      for (int r = 0; r < reps; ++r) sink += selective_scan(xs[i], p)[0];
      ts[i] = std::min(ts[i], seconds_since(t0) / reps);
      if (!std::isfinite(sink)) o.check(false, "finite output");
    }
  const double mx = std::accumulate(ls.begin(), ls.end(), 0.0) / 4, my = std::accumulate(ts.begin(), ts.end(), 0.0) / 4;
  double sxy = 0, sxx = 0, syy = 0;
  for (int i = 0; i < 4; ++i) {
    sxy += (ls[i] - mx) * (ts[i] - my);
    sxx += (ls[i] - mx) * (ls[i] - mx);
    syy += (ts[i] - my) * (ts[i] - my);
  }
  const double r2 = sxy * sxy / (sxx * syy);
  bool doubles = true;
  for (std::size_t len : {64, 128, 256})
    doubles = doubles && flops::scan(2 * len, d, s) == 2 * flops::scan(len, d, s);
  o.detail << "times (us)";
  for (double t : ts) o.detail << " " << std::setprecision(4) << t * 1e6;
  o.detail << ", R^2 " << std::setprecision(5) << r2 << ", scan FLOPs double exactly: " << (doubles ? "yes" : "no");
  o.check(r2 >= 0.98, "R^2 >= 0.98");
  o.check(doubles, "FLOPs double with L");
  return o;
}

// -------------------------------------------------- determinism, persistence

Outcome criterion_determinism() {
  Outcome o;
  testing::TempDir tmp("acceptance");
  RunConfig c = testing::tiny_config();
  c.train.epochs = 3;
  c.train.max_steps = 8;
  const auto clips = generate_split(c.scene_spec(), "train", 2);

  Trainer a(c), b(c);
  const auto ra = a.fit(clips), rb = b.fit(clips);
  append_loss_log(tmp.path / "a.csv", ra);
  append_loss_log(tmp.path / "b.csv", rb);
  const bool identical = testing::slurp(tmp.path / "a.csv") == testing::slurp(tmp.path / "b.csv");
  o.check(identical, "identical loss logs");

  RunConfig half = c;
  half.train.max_steps = 3;
  Trainer first(half);
  first.fit(clips);
  first.save(tmp.path / "mid.bin");
  Trainer resumed = Trainer::from_checkpoint(tmp.path / "mid.bin", &c);
  const auto rest = resumed.fit(clips);
  double worst = 0;
  o.check(rest.size() == 5, "resumed step count");
  for (std::size_t i = 0; i < rest.size() && i + 3 < ra.size(); ++i)
    worst = std::max(worst, std::abs(rest[i].total - ra[i + 3].total));
  for (std::size_t id = 0; id < a.model().params().count(); ++id) {
    const auto& x = a.model().params()[id].value;
    const auto& y = resumed.model().params()[id].value;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, double(std::abs(x[i] - y[i])));
  }
  o.check(worst <= 1e-5, "resume within 1e-5");

  Tensor<float> frames({3, 5, 7, 3});
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> u(0, 1);
  for (auto& v : frames.vec()) v = u(rng);
  frames[0] = std::numeric_limits<float>::denorm_min();
  frames[1] = -0.0f;
  write_raw(tmp.path / "clip.raw", frames);
  const auto back = read_raw(tmp.path / "clip.raw");
  const bool exact = back.shape() == frames.shape() &&
                     std::memcmp(back.data(), frames.data(), frames.size() * sizeof(float)) == 0;
  o.check(exact, "raw round trip bit-exact");
  o.detail << "logs identical: " << (identical ? "yes" : "no") << ", resume max diff " << worst
           << ", raw bit-exact: " << (exact ? "yes" : "no");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  Eigen::setNbThreads(1);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"scan matches step-by-step oracle", criterion_scan_oracle},
      {"gradients match finite differences", criterion_gradients},
      {"loss identities", criterion_loss_identities},
      {"fusion and aggregation weights are probability vectors", criterion_probability_vectors},
      {"scoring contract", criterion_scoring},
      {"desk benchmark", criterion_desk},
      {"scan cost is linear in sequence length", criterion_linear},
      {"determinism and persistence", criterion_determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int n = int(i) + 1;
    if (!only.empty() && !only.count(n)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << "exception: " << e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << n << " " << criteria[i].first << ": " << o.detail.str()
              << std::endl;
  }
  return failed ? 1 : 0;
}
