// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>
#include <Eigen/Core>

#include <chrono>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "m2s2l/m2s2l.hpp"

namespace fs = std::filesystem;
using namespace m2s2l;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  std::string out;
  bool deterministic = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "INI config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.sets, "override, section.key=value (repeatable)");
  cmd->add_option("--seed", c.seed, "random seed (overrides run.seed)");
  auto* o = cmd->add_option("--out", c.out, "output directory");
  if (out_required) o->required();
  cmd->add_flag("--deterministic", c.deterministic, "single-threaded, bit-reproducible execution");
  cmd->add_flag("-q,--quiet", c.quiet, "suppress progress output");
}

RunConfig resolve(const Common& c, RunConfig base = {}) {
  if (!c.config.empty()) {
    base = load_config(c.config);
  }
  for (const auto& s : c.sets) apply_override(base, s);
  if (c.seed >= 0) base.seed = std::uint64_t(c.seed);
  base.validate();
  return base;
}

void prepare_out(const Common& c, const RunConfig& cfg) {
  fs::create_directories(c.out);
  write_config(fs::path(c.out) / "config.ini", cfg);
}

int cmd_generate(const Common& c, std::int64_t train_clips, std::int64_t test_clips, bool raw) {
  RunConfig cfg = resolve(c);
  if (train_clips >= 0) cfg.data.train_clips = std::size_t(train_clips);
  if (test_clips >= 0) cfg.data.test_clips = std::size_t(test_clips);
  if (raw) cfg.data.write_raw = true;
  prepare_out(c, cfg);
  generate_dataset(c.out, cfg.scene_spec(), cfg.data.train_clips, cfg.data.test_clips, cfg.data.write_raw);
  if (!c.quiet)
    std::cout << "wrote " << cfg.data.train_clips << " train and " << cfg.data.test_clips << " test clips to " << c.out
              << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data, const std::string& resume) {
  std::optional<Trainer> trainer;
  if (!resume.empty()) {
    const Checkpoint ck = load_checkpoint(resume);
    const RunConfig cfg = resolve(c, parse_config(ck.config_text));
    trainer.emplace(Trainer::from_checkpoint(ck, &cfg));
  } else {
    trainer.emplace(resolve(c));
  }
  const RunConfig& cfg = trainer->config();
  prepare_out(c, cfg);
  const auto clips = load_clips(data, "train_");
  if (clips.empty()) throw IoError("no train_ clips under " + data);
  for (const auto& clip : clips)
    if (clip.height != cfg.model.frame_h || clip.width != cfg.model.frame_w)
      throw ConfigError("clip " + clip.name + " is " + std::to_string(clip.height) + "x" + std::to_string(clip.width) +
                        " but the model expects " + std::to_string(cfg.model.frame_h) + "x" +
                        std::to_string(cfg.model.frame_w));
  const fs::path log = fs::path(c.out) / "loss_log.csv";
  const auto t0 = std::chrono::steady_clock::now();
  auto rows = trainer->fit(clips, [&](const LossLogRow& r, std::size_t total) {
    if (c.quiet || (r.step % 10 != 0 && r.step + 1 != total)) return;
    const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cerr << "step " << r.step + 1 << "/" << total << "  l_total " << r.total << "  l_frame " << r.frame
              << "  l_motion " << r.motion << "  l_separate " << r.separate << "  (" << el << " s)\n";
  });
  append_loss_log(log, rows);
  trainer->save(fs::path(c.out) / "checkpoint.bin");
  if (!c.quiet) std::cout << "trained to step " << trainer->step() << "; checkpoint at " << c.out << "/checkpoint.bin\n";
  return 0;
}

int cmd_score(const Common& c, const std::string& ckpt, const std::string& data, const std::string& prefix) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const RunConfig cfg = resolve(c, parse_config(ck.config_text));
  Trainer t = Trainer::from_checkpoint(ck, &cfg);
  prepare_out(c, cfg);
  const auto clips = load_clips(data, prefix);
  if (clips.empty()) throw IoError("no " + prefix + " clips under " + data);
  const auto scores = score_clips(t.model(), clips, cfg.score, [&](const std::string& name) {
    if (!c.quiet) std::cerr << "scored " << name << "\n";
  });
  const fs::path dir = fs::path(c.out) / "scores";
  fs::create_directories(dir);
  for (const auto& [name, recs] : scores) write_scores_csv(dir / (name + ".csv"), recs);
  if (!c.quiet) std::cout << "wrote " << scores.size() << " score files to " << dir.string() << "\n";
  return 0;
}

int cmd_eval(const std::string& scores, const std::string& labels, const std::string& out) {
  const EvalReport rep = evaluate_scores(scores, labels);
  const std::string text = eval_report_text(rep);
  std::cout << text;
  if (!out.empty()) {
    fs::create_directories(out);
    std::ofstream(fs::path(out) / "eval_report.txt") << text;
    update_kv(fs::path(out) / "report.kv", to_kv(rep));
  }
  return 0;
}

int cmd_profile(const Common& c, const std::string& ckpt, std::size_t warmup, std::size_t timed,
                std::size_t repeats) {
  std::optional<Trainer> t;
  if (!ckpt.empty()) {
    const Checkpoint ck = load_checkpoint(ckpt);
    const RunConfig cfg = resolve(c, parse_config(ck.config_text));
    t.emplace(Trainer::from_checkpoint(ck, &cfg));
  } else {
    t.emplace(resolve(c));
  }
  const RunConfig& cfg = t->config();
  SyntheticSceneSpec spec = cfg.scene_spec();
  spec.clip_length = std::max(spec.clip_length, cfg.model.k + 2);
  const std::vector<Clip> clips{generate_clip(spec, "profile", spec.seed, AnomalyKind::kNone)};
  std::vector<Tensor<float>> windows;
  for (const auto& w : iterate_windows(clips, cfg.model.k)) windows.push_back(window_tensor<float>(clips, w, cfg.model.k));
  ProfileReport rep;
  rep.params = count_params(t->model());
  rep.flops = estimate_flops(cfg.model);
  rep.fps = measure_fps(t->model(), windows, warmup, timed, repeats);
  const std::string text = profile_report_text(rep);
  std::cout << text;
  if (!c.out.empty()) {
    prepare_out(c, cfg);
    std::ofstream(fs::path(c.out) / "profile_report.txt") << text;
    update_kv(fs::path(c.out) / "report.kv", to_kv(rep));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"m2s2l: multi-scale state-space video anomaly detection"};
  app.require_subcommand(1);

  Common gen_c, train_c, score_c, prof_c;
  std::int64_t train_clips = -1, test_clips = -1;
  bool raw = false;
  auto* gen = app.add_subcommand("generate", "render a synthetic clip store");
  add_common(gen, gen_c);
  gen->add_option("--train-clips", train_clips, "number of normal training clips");
  gen->add_option("--test-clips", test_clips, "number of test clips with anomalies");
  gen->add_flag("--raw", raw, "also write frames.raw per clip");

  std::string train_data, resume;
  auto* train = app.add_subcommand("train", "train on the normal clips of a store");
  add_common(train, train_c);
  train->add_option("--data", train_data, "clip store")->required()->check(CLI::ExistingDirectory);
  train->add_option("--resume", resume, "checkpoint to continue from")->check(CLI::ExistingFile);

  std::string ckpt, score_data, prefix = "test_";
  auto* score = app.add_subcommand("score", "write per-frame anomaly scores");
  add_common(score, score_c);
  score->add_option("--checkpoint", ckpt, "trained checkpoint")->required()->check(CLI::ExistingFile);
  score->add_option("--data", score_data, "clip store")->required()->check(CLI::ExistingDirectory);
  score->add_option("--clips", prefix, "clip name prefix to score");

  std::string eval_scores, eval_labels, eval_out;
  auto* eval = app.add_subcommand("eval", "frame-level AUC of scores against labels");
  eval->add_option("--scores", eval_scores, "scores CSV or directory of them")->required()->check(CLI::ExistingPath);
  eval->add_option("--labels", eval_labels, "labels CSV or clip store")->required()->check(CLI::ExistingPath);
  eval->add_option("--out", eval_out, "report directory");

  std::string prof_ckpt;
  std::size_t warmup = 2, timed = 10, repeats = 5;
  auto* prof = app.add_subcommand("profile", "parameters, FLOPs and throughput");
  add_common(prof, prof_c, false);
  prof->add_option("--checkpoint", prof_ckpt, "checkpoint (default: untrained model from config)")
      ->check(CLI::ExistingFile);
  prof->add_option("--warmup", warmup, "untimed warmup windows");
  prof->add_option("--timed", timed, "timed windows per repeat")->check(CLI::PositiveNumber);
  prof->add_option("--repeats", repeats, "timing repeats")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    // the library is single-threaded; this pins Eigen in case it was built with OpenMP
    Eigen::setNbThreads(1);
    if (*gen) return cmd_generate(gen_c, train_clips, test_clips, raw);
    if (*train) return cmd_train(train_c, train_data, resume);
    if (*score) return cmd_score(score_c, ckpt, score_data, prefix);
    if (*eval) return cmd_eval(eval_scores, eval_labels, eval_out);
    if (*prof) return cmd_profile(prof_c, prof_ckpt, warmup, timed, repeats);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NonFiniteLossError& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 2;
  } catch (const UndefinedAucError& e) {
    std::cerr << "eval error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
