// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "m2s2l/data_pipeline.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/model.hpp"
#include "m2s2l/objective_scoring.hpp"
#include "m2s2l/optim.hpp"

namespace m2s2l {

struct TrainConfig {
  AdamConfig adam;
  StepDecay decay;
  std::size_t epochs = 60;
  std::size_t batch_size = 4;
  std::size_t max_steps = 0;  // 0: no cap
};

struct ScoreConfig {
  std::string dataset_style = "ped2";  // ped2 | avenue | shanghai
  std::optional<double> alpha;         // overrides the style default
  bool global_normalization = false;
  double psnr_ceiling = kPsnrCeiling;

  double effective_alpha() const {
    if (alpha) return *alpha;
    if (dataset_style == "ped2") return 0.6;
    if (dataset_style == "avenue") return 0.4;
    if (dataset_style == "shanghai") return 0.5;
    throw ConfigError("score.dataset_style must be ped2, avenue or shanghai, got '" + dataset_style + "'");
  }
};

struct DataConfig {
  SyntheticSceneSpec scene;
  std::size_t train_clips = 16;
  std::size_t test_clips = 8;
  bool write_raw = false;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  LossWeights loss;
  LossFlags loss_flags;
  ScoreConfig score;

  RunConfig() {
    data.scene.min_size = 16;
    data.scene.max_size = 28;
    data.scene.min_speed = 3;
    data.scene.max_speed = 6;
    data.scene.clip_length = 80;
  }

  // Scene canvas and model input always agree.
  SyntheticSceneSpec scene_spec() const {
    SyntheticSceneSpec s = data.scene;
    s.height = model.frame_h;
    s.width = model.frame_w;
    s.seed = seed;
    return s;
  }

  void validate() const {
    model.validate();
    scene_spec().validate();
    loss.validate();
    const double a = score.effective_alpha();
    if (a < 0 || a > 1) throw ConfigError("score.alpha must lie in [0, 1]");
    if (train.batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(train.adam.lr > 0)) throw ConfigError("train.lr must be > 0");
    if (!(train.decay.factor > 0 && train.decay.factor <= 1)) throw ConfigError("train.lr_decay must lie in (0, 1]");
    if (!(score.psnr_ceiling > 0)) throw ConfigError("score.psnr_ceiling must be > 0");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename U>
U parse_number(const std::string& key, const std::string& s) {
  U v{};
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc{} || res.ptr != end) throw ConfigError(key + ": cannot parse '" + s + "' as a number");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + s + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n"), e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

struct Field {
  std::string section, key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
  std::string full() const { return section + "." + key; }
};

inline Field size_field(const std::string& sec, const std::string& key, std::size_t& v) {
  return {sec, key, [&v, k = sec + "." + key](const std::string& s) { v = parse_number<std::size_t>(k, s); },
          [&v] { return std::to_string(v); }};
}
inline Field u64_field(const std::string& sec, const std::string& key, std::uint64_t& v) {
  return {sec, key, [&v, k = sec + "." + key](const std::string& s) { v = parse_number<std::uint64_t>(k, s); },
          [&v] { return std::to_string(v); }};
}
inline Field double_field(const std::string& sec, const std::string& key, double& v) {
  return {sec, key, [&v, k = sec + "." + key](const std::string& s) { v = parse_number<double>(k, s); },
          [&v] { return fmt_double(v); }};
}
inline Field bool_field(const std::string& sec, const std::string& key, bool& v) {
  return {sec, key, [&v, k = sec + "." + key](const std::string& s) { v = parse_bool(k, s); },
          [&v] { return std::string(v ? "true" : "false"); }};
}
inline Field string_field(const std::string& sec, const std::string& key, std::string& v) {
  return {sec, key, [&v](const std::string& s) { v = s; }, [&v] { return v; }};
}
inline Field list_field(const std::string& sec, const std::string& key, std::vector<std::size_t>& v) {
  return {sec, key,
          [&v, k = sec + "." + key](const std::string& s) {
            std::vector<std::size_t> out;
            std::stringstream ss(s);
            std::string item;
            while (std::getline(ss, item, ',')) out.push_back(parse_number<std::size_t>(k, trim(item)));
            if (out.empty()) throw ConfigError(k + ": empty list");
            v = std::move(out);
          },
          [&v] {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
            return s;
          }};
}

// Every configurable value, in serialization order.
inline std::vector<Field> fields(RunConfig& c) {
  auto& sc = c.data.scene;
  auto& m = c.model;
  std::vector<Field> f = {
      u64_field("run", "seed", c.seed),
      size_field("data", "train_clips", c.data.train_clips),
      size_field("data", "test_clips", c.data.test_clips),
      size_field("data", "clip_length", sc.clip_length),
      size_field("data", "n_objects", sc.n_objects),
      double_field("data", "min_speed", sc.min_speed),
      double_field("data", "max_speed", sc.max_speed),
      double_field("data", "min_size", sc.min_size),
      double_field("data", "max_size", sc.max_size),
      double_field("data", "speed_jump_factor", sc.speed_jump_factor),
      double_field("data", "onset_fraction", sc.onset_fraction),
      bool_field("data", "write_raw", c.data.write_raw),
      size_field("model", "height", m.frame_h),
      size_field("model", "width", m.frame_w),
      size_field("model", "k", m.k),
      list_field("model", "patch_sizes", m.patch_sizes),
      list_field("model", "windows", m.windows),
      size_field("model", "d_model", m.block.d_model),
      size_field("model", "state_size", m.block.state_size),
      size_field("model", "n_blocks", m.block.n_blocks),
      list_field("model", "dw_kernels", m.block.dw_kernels),
      size_field("model", "conv_kernel", m.block.conv_kernel),
      size_field("model", "expansion", m.block.expansion),
      bool_field("model", "bidirectional_scan", m.block.bidirectional_scan),
      size_field("model", "memory_slots", m.memory_slots),
      double_field("model", "memory_temperature", m.memory_temperature),
      {"train", "optimizer",
       [](const std::string& s) {
         if (s != "adam") throw ConfigError("train.optimizer: only 'adam' is supported, got '" + s + "'");
       },
       [] { return std::string("adam"); }},
      double_field("train", "lr", c.train.adam.lr),
      double_field("train", "beta1", c.train.adam.beta1),
      double_field("train", "beta2", c.train.adam.beta2),
      double_field("train", "eps", c.train.adam.eps),
      double_field("train", "lr_decay", c.train.decay.factor),
      size_field("train", "lr_decay_every", c.train.decay.every),
      size_field("train", "epochs", c.train.epochs),
      size_field("train", "batch_size", c.train.batch_size),
      size_field("train", "max_steps", c.train.max_steps),
      double_field("loss", "lambda_m", c.loss.lambda_m),
      double_field("loss", "lambda_s", c.loss.lambda_s),
      double_field("loss", "lambda_g", c.loss.lambda_g),
      double_field("loss", "lambda_ssim", c.loss.lambda_ssim),
      string_field("score", "dataset_style", c.score.dataset_style),
      {"score", "alpha",
       [&c](const std::string& s) {
         c.score.alpha = s.empty() ? std::nullopt : std::optional<double>(parse_number<double>("score.alpha", s));
       },
       [&c] { return c.score.alpha ? fmt_double(*c.score.alpha) : std::string(); }},
      {"score", "normalization",
       [&c](const std::string& s) {
         if (s == "per_video") c.score.global_normalization = false;
         else if (s == "global") c.score.global_normalization = true;
         else throw ConfigError("score.normalization must be per_video or global, got '" + s + "'");
       },
       [&c] { return std::string(c.score.global_normalization ? "global" : "per_video"); }},
      double_field("score", "psnr_ceiling", c.score.psnr_ceiling),
      bool_field("ablation", "multi_scale_spatial", m.ablation.multi_scale_spatial),
      bool_field("ablation", "multi_temporal", m.ablation.multi_temporal),
      bool_field("ablation", "decompose", m.ablation.decompose),
      bool_field("ablation", "use_motion_loss", c.loss_flags.use_motion_loss),
      bool_field("ablation", "use_separate_loss", c.loss_flags.use_separate_loss),
  };
  return f;
}

}  // namespace detail

// Applies "section.key=value".
inline void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not section.key=value");
  const std::string name = detail::trim(assignment.substr(0, eq)), value = detail::trim(assignment.substr(eq + 1));
  for (auto& f : detail::fields(cfg))
    if (f.full() == name) {
      f.set(value);
      return;
    }
  throw ConfigError("unknown config key '" + name + "'");
}

inline void apply_ini(RunConfig& cfg, std::istream& is, const std::string& source = "config") {
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  auto fs = detail::fields(cfg);
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty())
      throw ConfigError(source + ": key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const std::string name = section + "." + key;
      auto it = std::find_if(fs.begin(), fs.end(), [&](const detail::Field& f) { return f.full() == name; });
      if (it == fs.end()) throw ConfigError(source + ": unknown config key '" + name + "'");
      it->set(detail::trim(value.data()));
    }
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  apply_ini(cfg, is);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string());
  RunConfig cfg;
  apply_ini(cfg, is, path.string());
  return cfg;
}

inline std::string serialize_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::fields(copy)) {
    if (f.section != section) {
      os << (section.empty() ? "" : "\n") << "[" << f.section << "]\n";
      section = f.section;
    }
    os << f.key << " = " << f.get() << "\n";
  }
  return os.str();
}

// Values of every field, for semantic comparison.
inline std::map<std::string, std::string> config_values(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::map<std::string, std::string> out;
  for (const auto& f : detail::fields(copy)) out[f.full()] = f.get();
  return out;
}

inline void write_config(const std::filesystem::path& path, const RunConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << serialize_config(cfg);
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace m2s2l
