// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "m2s2l/errors.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l {

namespace fs = std::filesystem;

enum class AnomalyKind { kNone, kSpeedJump, kShapeSwap, kIntruder };

inline std::string anomaly_name(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::kSpeedJump: return "speed_jump";
    case AnomalyKind::kShapeSwap: return "shape_swap";
    case AnomalyKind::kIntruder: return "intruder";
    default: return "none";
  }
}

struct SyntheticSceneSpec {
  std::size_t height = 64, width = 64;
  std::size_t clip_length = 48;
  std::size_t n_objects = 3;
  double min_speed = 0.75, max_speed = 1.5;  // px / frame
  double min_size = 4.0, max_size = 7.0;     // disc radius or rectangle half-extent, px
  double speed_jump_factor = 4.0;
  double onset_fraction = 0.5;
  std::uint64_t seed = 0;

  std::size_t onset() const { return static_cast<std::size_t>(onset_fraction * double(clip_length)); }

  void validate() const {
    if (height < 8 || width < 8) throw ConfigError("scene: canvas must be at least 8x8");
    if (clip_length < 2) throw ConfigError("scene: clip_length must be >= 2");
    if (n_objects == 0) throw ConfigError("scene: n_objects must be >= 1");
    if (!(min_speed >= 0 && max_speed >= min_speed)) throw ConfigError("scene: invalid speed range");
    if (!(min_size > 0 && max_size >= min_size)) throw ConfigError("scene: invalid size range");
    if (2 * max_size >= double(std::min(height, width))) throw ConfigError("scene: objects larger than canvas");
    if (!(onset_fraction > 0 && onset_fraction < 1) || onset() == 0 || onset() >= clip_length)
      throw ConfigError("scene: anomaly onset must fall inside the clip");
  }
};

// 8-bit RGB clip with per-frame labels.
struct Clip {
  std::string name;
  std::size_t frames = 0, height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // frames x H x W x 3
  std::vector<int> labels;           // one per frame

  const std::uint8_t* frame(std::size_t t) const { return pixels.data() + t * height * width * 3; }

  // Frames [first, first + count) normalized to [0, 1].
  template <typename T>
  Tensor<T> to_tensor(std::size_t first, std::size_t count) const {
    require(first + count <= frames, "Clip::to_tensor: range out of bounds");
    const std::size_t fs = height * width * 3;
    Tensor<T> t({count, height, width, 3});
    const std::uint8_t* src = pixels.data() + first * fs;
    for (std::size_t i = 0; i < count * fs; ++i) t[i] = static_cast<T>(src[i]) / static_cast<T>(255);
    return t;
  }
};

namespace detail {

struct SceneObject {
  double x, y, vx, vy, size;
  bool disc;
  std::uint8_t rgb[3];
};

// Exact area coverage of pixel (px, py) by an axis-aligned box.
inline double box_coverage(double px, double py, double cx, double cy, double half) {
  auto overlap = [](double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); };
  return overlap(px, px + 1, cx - half, cx + half) * overlap(py, py + 1, cy - half, cy + half);
}

// Approximate coverage from the distance of the pixel centre to the rim.
inline double disc_coverage(double px, double py, double cx, double cy, double r) {
  const double d = std::hypot(px + 0.5 - cx, py + 0.5 - cy);
  return std::clamp(r + 0.5 - d, 0.0, 1.0);
}

inline void reflect(double& p, double& v, double lo, double hi) {
  if (p < lo) {
    p = 2 * lo - p;
    v = -v;
  } else if (p > hi) {
    p = 2 * hi - p;
    v = -v;
  }
  p = std::clamp(p, lo, hi);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(a), std::uint32_t(b)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

}  // namespace detail

// Static textured background shared by every clip of a dataset.
inline std::vector<std::uint8_t> render_background(const SyntheticSceneSpec& spec) {
  std::mt19937_64 rng(detail::mix_seed(spec.seed, 0xB6, 0));
  std::uniform_real_distribution<double> u(0, 1);
  const double fx = 1 + 2 * u(rng), fy = 1 + 2 * u(rng), phase = 6.283 * u(rng);
  std::vector<std::uint8_t> bg(spec.height * spec.width * 3);
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const double gx = double(x) / double(spec.width), gy = double(y) / double(spec.height);
      const double base = 0.35 + 0.1 * gy + 0.05 * std::sin(6.283 * fx * gx + phase) * std::cos(6.283 * fy * gy);
      const double noise = 0.02 * (u(rng) - 0.5);
      const double tint[3] = {0.95, 1.0, 1.08};
      for (std::size_t c = 0; c < 3; ++c)
        bg[(y * spec.width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(255 * std::clamp((base + noise) * tint[c], 0.0, 1.0)));
    }
  return bg;
}

// One clip. anomaly kNone gives normal constant-velocity motion; otherwise
// the anomaly starts at spec.onset() and lasts to the end of the clip.
inline Clip generate_clip(const SyntheticSceneSpec& spec, const std::string& name, std::uint64_t clip_seed,
                          AnomalyKind anomaly) {
  spec.validate();
  std::mt19937_64 rng(clip_seed);
  std::uniform_real_distribution<double> u(0, 1);
  const double w = double(spec.width), h = double(spec.height);
  auto make_object = [&](double speed_scale) {
    detail::SceneObject o;
    o.size = spec.min_size + (spec.max_size - spec.min_size) * u(rng);
    o.x = o.size + (w - 2 * o.size) * u(rng);
    o.y = o.size + (h - 2 * o.size) * u(rng);
    const double speed = speed_scale * (spec.min_speed + (spec.max_speed - spec.min_speed) * u(rng));
    const double ang = 6.283185307179586 * u(rng);
    o.vx = speed * std::cos(ang);
    o.vy = speed * std::sin(ang);
    o.disc = u(rng) < 0.5;
    for (auto& c : o.rgb) c = static_cast<std::uint8_t>(40 + 200 * u(rng));
    return o;
  };
  std::vector<detail::SceneObject> objs;
  for (std::size_t i = 0; i < spec.n_objects; ++i) objs.push_back(make_object(1.0));
  detail::SceneObject intruder = make_object(3.0);
  intruder.size = spec.max_size;
  intruder.disc = false;
  intruder.rgb[0] = 250, intruder.rgb[1] = 30, intruder.rgb[2] = 30;

  const auto bg = render_background(spec);
  Clip clip;
  clip.name = name;
  clip.frames = spec.clip_length;
  clip.height = spec.height;
  clip.width = spec.width;
  clip.pixels.resize(clip.frames * spec.height * spec.width * 3);
  clip.labels.assign(clip.frames, 0);
  const std::size_t onset = spec.onset();
  for (std::size_t t = 0; t < clip.frames; ++t) {
    const bool anomalous = anomaly != AnomalyKind::kNone && t >= onset;
    clip.labels[t] = anomalous ? 1 : 0;
    if (anomalous && anomaly == AnomalyKind::kSpeedJump && t == onset) {
      objs[0].vx *= spec.speed_jump_factor;
      objs[0].vy *= spec.speed_jump_factor;
    }
    if (anomalous && anomaly == AnomalyKind::kShapeSwap) {
      objs[0].disc = !objs[0].disc;
    }
    std::vector<const detail::SceneObject*> visible;
    for (const auto& o : objs) visible.push_back(&o);
    if (anomalous && anomaly == AnomalyKind::kIntruder) visible.push_back(&intruder);

    std::vector<double> img(bg.begin(), bg.end());
    for (auto& v : img) v /= 255.0;
    for (const auto* o : visible) {
      const int x0 = std::max(0, int(std::floor(o->x - o->size - 1))), x1 = std::min(int(w) - 1, int(o->x + o->size + 1));
      const int y0 = std::max(0, int(std::floor(o->y - o->size - 1))), y1 = std::min(int(h) - 1, int(o->y + o->size + 1));
      for (int py = y0; py <= y1; ++py)
        for (int px = x0; px <= x1; ++px) {
          const double a = o->disc ? detail::disc_coverage(px, py, o->x, o->y, o->size)
                                   : detail::box_coverage(px, py, o->x, o->y, o->size);
          if (a <= 0) continue;
          double* p = img.data() + (std::size_t(py) * spec.width + std::size_t(px)) * 3;
          for (int c = 0; c < 3; ++c) p[c] = (1 - a) * p[c] + a * (o->rgb[c] / 255.0);
        }
    }
    std::uint8_t* dst = clip.pixels.data() + t * spec.height * spec.width * 3;
    for (std::size_t i = 0; i < img.size(); ++i) dst[i] = static_cast<std::uint8_t>(std::lround(255 * img[i]));

    auto advance = [&](detail::SceneObject& o) {
      o.x += o.vx;
      o.y += o.vy;
      detail::reflect(o.x, o.vx, o.size, w - o.size);
      detail::reflect(o.y, o.vy, o.size, h - o.size);
    };
    for (auto& o : objs) advance(o);
    if (anomalous && anomaly == AnomalyKind::kIntruder) advance(intruder);
  }
  return clip;
}

// ---------------------------------------------------------------- PNG I/O

inline void write_png(const fs::path& path, std::size_t height, std::size_t width, const std::uint8_t* rgb) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw IoError("PNG encode failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) png_write_row(png, rgb + y * width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError("write failed: " + path.string());
}

// Returns RGB8 pixels; gray, palette and alpha inputs are converted.
inline std::vector<std::uint8_t> read_png(const fs::path& path, std::size_t& height, std::size_t& width) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  std::vector<std::uint8_t> out;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw IoError("PNG decode failed: " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  out.resize(height * width * 3);
  for (std::size_t y = 0; y < height; ++y) png_read_row(png, out.data() + y * width * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return out;
}

// ------------------------------------------------------------ raw container

inline constexpr char kRawMagic[4] = {'M', '2', 'S', 'L'};
inline constexpr std::uint16_t kRawVersion = 1;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>((std::uint64_t(v) >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char b[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(b), sizeof(U))) throw IoError("unexpected end of file");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return static_cast<U>(v);
}

inline void put_f32(std::ostream& os, float f) { put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f)); }
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_le<std::uint32_t>(is)); }

}  // namespace detail

// frames: (k x H x W x C)
inline void write_raw(const fs::path& path, const Tensor<float>& frames) {
  require(frames.rank() == 4, "write_raw: tensor must be (k x H x W x C)");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os.write(kRawMagic, 4);
  detail::put_le<std::uint16_t>(os, kRawVersion);
  for (std::size_t i = 0; i < 4; ++i) detail::put_le<std::uint32_t>(os, std::uint32_t(frames.dim(i)));
  for (float v : frames.vec()) detail::put_f32(os, v);
  if (!os) throw IoError("write failed: " + path.string());
}

inline Tensor<float> read_raw(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kRawMagic, 4) != 0) throw IoError(path.string() + ": bad magic");
  const auto version = detail::get_le<std::uint16_t>(is);
  if (version != kRawVersion) throw IoError(path.string() + ": unsupported version " + std::to_string(version));
  Shape s(4);
  for (auto& d : s) d = detail::get_le<std::uint32_t>(is);
  const auto pos = is.tellg();
  is.seekg(0, std::ios::end);
  const auto payload = std::uint64_t(is.tellg() - pos);
  if (payload != shape_numel(s) * 4)
    throw IoError(path.string() + ": payload is " + std::to_string(payload) + " bytes, dims need " +
                  std::to_string(shape_numel(s) * 4));
  is.seekg(pos);
  Tensor<float> t(s);
  for (auto& v : t.vec()) v = detail::get_f32(is);
  return t;
}

// --------------------------------------------------------------- clip store

inline fs::path clip_dir(const fs::path& root, const std::string& name) { return root / "clips" / name; }

inline std::string frame_filename(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.png", t);
  return buf;
}

inline void write_labels(const fs::path& path, const std::vector<int>& labels) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << "frame_index,label\n";
  for (std::size_t i = 0; i < labels.size(); ++i) os << i << "," << labels[i] << "\n";
  if (!os) throw IoError("write failed: " + path.string());
}

inline std::vector<int> read_labels(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read " + path.string());
  std::string line;
  if (!std::getline(is, line) || line != "frame_index,label") throw IoError(path.string() + ": bad header");
  std::vector<int> labels;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::size_t idx;
    int lab;
    char comma;
    std::istringstream ls(line);
    if (!(ls >> idx >> comma >> lab) || comma != ',' || idx != labels.size() || (lab != 0 && lab != 1))
      throw IoError(path.string() + ": malformed row '" + line + "'");
    labels.push_back(lab);
  }
  return labels;
}

inline void save_clip(const fs::path& root, const Clip& clip, bool with_raw) {
  const fs::path dir = clip_dir(root, clip.name);
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  if (ec) throw IoError("cannot create " + (dir / "frames").string() + ": " + ec.message());
  for (std::size_t t = 0; t < clip.frames; ++t)
    write_png(dir / "frames" / frame_filename(t), clip.height, clip.width, clip.frame(t));
  write_labels(dir / "labels.csv", clip.labels);
  if (with_raw) write_raw(dir / "frames.raw", clip.to_tensor<float>(0, clip.frames));
}

inline Clip load_clip(const fs::path& root, const std::string& name) {
  const fs::path dir = clip_dir(root, name);
  Clip clip;
  clip.name = name;
  clip.labels = read_labels(dir / "labels.csv");
  clip.frames = clip.labels.size();
  for (std::size_t t = 0; t < clip.frames; ++t) {
    std::size_t h, w;
    auto px = read_png(dir / "frames" / frame_filename(t), h, w);
    if (t == 0) {
      clip.height = h;
      clip.width = w;
      clip.pixels.reserve(clip.frames * h * w * 3);
    } else if (h != clip.height || w != clip.width) {
      throw IoError(name + ": frame " + std::to_string(t) + " has a different size");
    }
    clip.pixels.insert(clip.pixels.end(), px.begin(), px.end());
  }
  return clip;
}

// Sorted clip names with the given prefix ("train_" / "test_").
inline std::vector<std::string> list_clips(const fs::path& root, const std::string& prefix) {
  std::vector<std::string> names;
  const fs::path dir = root / "clips";
  if (!fs::is_directory(dir)) throw IoError("no clip store at " + root.string());
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && e.path().filename().string().rfind(prefix, 0) == 0) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  return names;
}

inline std::vector<Clip> load_clips(const fs::path& root, const std::string& prefix) {
  std::vector<Clip> clips;
  for (const auto& n : list_clips(root, prefix)) clips.push_back(load_clip(root, n));
  return clips;
}

// Train clips are normal; test clip i carries anomaly kind i mod 3.
inline std::vector<Clip> generate_split(const SyntheticSceneSpec& spec, const std::string& split, std::size_t n) {
  spec.validate();
  require(split == "train" || split == "test", "generate_split: split must be train or test");
  const bool test = split == "test";
  const AnomalyKind kinds[3] = {AnomalyKind::kSpeedJump, AnomalyKind::kShapeSwap, AnomalyKind::kIntruder};
  std::vector<Clip> out;
  char buf[32];
  for (std::size_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "%s_%03zu", split.c_str(), i);
    out.push_back(generate_clip(spec, buf, detail::mix_seed(spec.seed, test ? 2 : 1, i),
                                test ? kinds[i % 3] : AnomalyKind::kNone));
  }
  return out;
}

inline void generate_dataset(const fs::path& root, const SyntheticSceneSpec& spec, std::size_t n_train,
                             std::size_t n_test, bool with_raw = false) {
  for (const auto& c : generate_split(spec, "train", n_train)) save_clip(root, c, with_raw);
  for (const auto& c : generate_split(spec, "test", n_test)) save_clip(root, c, with_raw);
}

// ------------------------------------------------------------------ windows

struct WindowRef {
  std::size_t clip = 0;    // index into the clip list
  std::size_t start = 0;   // first input frame
  std::size_t target = 0;  // start + k
  int label = 0;           // label of the target frame
};

// Stride-1 windows of k inputs + 1 target. Clips shorter than k + 1 frames
// are skipped and reported through warn.
inline std::vector<WindowRef> iterate_windows(const std::vector<Clip>& clips, std::size_t k,
                                              const std::function<void(const std::string&)>& warn = {}) {
  require(k >= 1, "iterate_windows: k must be >= 1");
  std::vector<WindowRef> out;
  for (std::size_t c = 0; c < clips.size(); ++c) {
    if (clips[c].frames < k + 1) {
      const std::string msg = "skipping clip " + clips[c].name + ": " + std::to_string(clips[c].frames) +
                              " frames < k + 1 = " + std::to_string(k + 1);
      if (warn) warn(msg); else std::cerr << "warning: " << msg << "\n";
      continue;
    }
    for (std::size_t s = 0; s + k < clips[c].frames; ++s) out.push_back({c, s, s + k, clips[c].labels[s + k]});
  }
  return out;
}

template <typename T>
Tensor<T> window_tensor(const std::vector<Clip>& clips, const WindowRef& w, std::size_t k) {
  return clips.at(w.clip).to_tensor<T>(w.start, k + 1);
}

}  // namespace m2s2l
