// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include <unistd.h>

#include "m2s2l/data_pipeline.hpp"

namespace m2s2l {
namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("m2s2l_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

SyntheticSceneSpec small_spec(std::uint64_t seed = 3) {
  SyntheticSceneSpec s;
  s.height = s.width = 32;
  s.clip_length = 12;
  s.min_size = 3;
  s.max_size = 5;
  s.seed = seed;
  return s;
}

TEST(Generator, SameSeedGivesByteIdenticalStores) {
  TempDir a("gen_a"), b("gen_b");
  generate_dataset(a.path, small_spec(), 2, 2);
  generate_dataset(b.path, small_spec(), 2, 2);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a.path);
    ASSERT_TRUE(fs::exists(b.path / rel)) << rel;
    EXPECT_EQ(slurp(e.path()), slurp(b.path / rel)) << rel;
    ++files;
  }
  EXPECT_EQ(files, 4u * (12 + 1));
}

TEST(Generator, DifferentSeedsDiffer) {
  auto a = generate_clip(small_spec(1), "x", 11, AnomalyKind::kNone);
  auto b = generate_clip(small_spec(2), "x", 12, AnomalyKind::kNone);
  EXPECT_NE(a.pixels, b.pixels);
}

TEST(Generator, TrainOnlyStoreHasNoPositiveLabels) {
  TempDir d("gen_train");
  generate_dataset(d.path, small_spec(), 3, 0);
  EXPECT_TRUE(list_clips(d.path, "test_").empty());
  for (const auto& c : load_clips(d.path, "train_"))
    for (int l : c.labels) EXPECT_EQ(l, 0);
}

TEST(Generator, LabelsStartAtOnset) {
  auto spec = small_spec();
  spec.clip_length = 80;
  spec.height = spec.width = 64;
  for (auto kind : {AnomalyKind::kSpeedJump, AnomalyKind::kShapeSwap, AnomalyKind::kIntruder}) {
    auto clip = generate_clip(spec, "t", 5, kind);
    ASSERT_EQ(clip.labels.size(), 80u);
    for (std::size_t t = 0; t < 80; ++t) EXPECT_EQ(clip.labels[t], t >= 40 ? 1 : 0) << anomaly_name(kind);
  }
}

TEST(Generator, AnomalyLeavesPrefixUntouchedAndChangesSuffix) {
  auto spec = small_spec();
  spec.clip_length = 20;
  auto normal = generate_clip(spec, "n", 9, AnomalyKind::kNone);
  const std::size_t fs = 32 * 32 * 3, onset = spec.onset();
  for (auto kind : {AnomalyKind::kSpeedJump, AnomalyKind::kShapeSwap, AnomalyKind::kIntruder}) {
    auto anom = generate_clip(spec, "a", 9, kind);
    EXPECT_TRUE(std::equal(normal.pixels.begin(), normal.pixels.begin() + onset * fs, anom.pixels.begin()));
    EXPECT_FALSE(std::equal(normal.pixels.begin() + (onset + 1) * fs, normal.pixels.end(),
                            anom.pixels.begin() + (onset + 1) * fs))
        << anomaly_name(kind);
  }
}

TEST(Generator, ObjectsStayInCanvasAndMove) {
  auto spec = small_spec();
  spec.clip_length = 200;
  spec.n_objects = 1;
  auto clip = generate_clip(spec, "c", 4, AnomalyKind::kNone);
  auto bg = render_background(spec);
  const std::size_t fs = 32 * 32 * 3;
  for (std::size_t t = 0; t < clip.frames; ++t) {
    std::size_t changed = 0;
    for (std::size_t i = 0; i < fs; ++i) changed += clip.frame(t)[i] != bg[i];
    EXPECT_GT(changed, 3u * 9) << "object left the canvas at frame " << t;
  }
  EXPECT_NE(std::vector<std::uint8_t>(clip.frame(0), clip.frame(0) + fs),
            std::vector<std::uint8_t>(clip.frame(10), clip.frame(10) + fs));
}

TEST(Generator, InvalidSpecIsConfigError) {
  auto s = small_spec();
  s.max_size = 20;
  EXPECT_THROW(s.validate(), ConfigError);
  s = small_spec();
  s.onset_fraction = 1.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Generator, UnwritableDestinationIsIoError) {
  TempDir d("gen_ro");
  std::ofstream(d.path / "clips") << "not a directory";
  EXPECT_THROW(generate_dataset(d.path, small_spec(), 1, 0), IoError);
}

TEST(Png, RoundTrip) {
  TempDir d("png");
  std::vector<std::uint8_t> px(5 * 7 * 3);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = std::uint8_t(i * 37 % 256);
  write_png(d.path / "a.png", 5, 7, px.data());
  std::size_t h, w;
  EXPECT_EQ(read_png(d.path / "a.png", h, w), px);
  EXPECT_EQ(h, 5u);
  EXPECT_EQ(w, 7u);
  EXPECT_THROW(read_png(d.path / "missing.png", h, w), IoError);
}

TEST(RawContainer, RoundTripIsBitExact) {
  TempDir d("raw");
  Tensor<float> t({3, 4, 5, 3});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(i) / 7.0f - 3.0f;
  t[5] = -0.0f;
  t[6] = 1e-38f;
  write_raw(d.path / "x.raw", t);
  auto back = read_raw(d.path / "x.raw");
  EXPECT_EQ(back.shape(), t.shape());
  EXPECT_EQ(std::memcmp(back.data(), t.data(), t.size() * 4), 0);
  EXPECT_EQ(fs::file_size(d.path / "x.raw"), 4 + 2 + 16 + t.size() * 4);
}

TEST(RawContainer, HeaderLayout) {
  TempDir d("raw_hdr");
  write_raw(d.path / "x.raw", Tensor<float>({2, 1, 1, 3}, 1.0f));
  auto bytes = slurp(d.path / "x.raw");
  EXPECT_EQ(bytes.substr(0, 4), "M2SL");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[18], 3);
  // 1.0f little endian
  EXPECT_EQ(std::uint8_t(bytes[22 + 3]), 0x3F);
  EXPECT_EQ(std::uint8_t(bytes[22 + 2]), 0x80);
}

TEST(RawContainer, TruncatedOrBadMagicIsIoError) {
  TempDir d("raw_bad");
  write_raw(d.path / "x.raw", Tensor<float>({2, 2, 2, 3}, 0.5f));
  fs::resize_file(d.path / "x.raw", fs::file_size(d.path / "x.raw") - 4);
  EXPECT_THROW(read_raw(d.path / "x.raw"), IoError);
  std::ofstream(d.path / "y.raw") << "NOPE";
  EXPECT_THROW(read_raw(d.path / "y.raw"), IoError);
}

TEST(ClipStore, SavedRawMatchesPngFrames) {
  TempDir d("store");
  auto clip = generate_clip(small_spec(), "test_000", 1, AnomalyKind::kIntruder);
  save_clip(d.path, clip, true);
  auto loaded = load_clip(d.path, "test_000");
  EXPECT_EQ(loaded.pixels, clip.pixels);
  EXPECT_EQ(loaded.labels, clip.labels);
  auto raw = read_raw(clip_dir(d.path, "test_000") / "frames.raw");
  EXPECT_EQ(raw, loaded.to_tensor<float>(0, loaded.frames));
}

TEST(ClipStore, LabelsFormat) {
  TempDir d("labels");
  write_labels(d.path / "labels.csv", {0, 0, 1});
  EXPECT_EQ(slurp(d.path / "labels.csv"), "frame_index,label\n0,0\n1,0\n2,1\n");
  EXPECT_EQ(read_labels(d.path / "labels.csv"), (std::vector<int>{0, 0, 1}));
}

Clip dummy_clip(std::size_t frames) {
  Clip c;
  c.name = "c" + std::to_string(frames);
  c.frames = frames;
  c.height = c.width = 2;
  c.pixels.resize(frames * 12);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t i = 0; i < 12; ++i) c.pixels[t * 12 + i] = std::uint8_t(t);
  c.labels.assign(frames, 0);
  return c;
}

TEST(Windows, CountsAndTargets) {
  std::vector<Clip> clips = {dummy_clip(17), dummy_clip(20)};
  auto w = iterate_windows(clips, 16);
  ASSERT_EQ(w.size(), 1u + 4u);
  EXPECT_EQ(w[0].target, 16u);
  for (const auto& r : w) {
    EXPECT_EQ(r.target, r.start + 16);
    auto t = window_tensor<float>(clips, r, 16);
    EXPECT_EQ(t.shape(), (Shape{17, 2, 2, 3}));
    EXPECT_FLOAT_EQ(t[16 * 12], float(r.target) / 255.0f);
    for (float v : t.vec()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Windows, ShortClipIsSkippedWithWarning) {
  std::vector<Clip> clips = {dummy_clip(5), dummy_clip(9)};
  std::vector<std::string> warnings;
  auto w = iterate_windows(clips, 8, [&](const std::string& m) { warnings.push_back(m); });
  EXPECT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0].clip, 1u);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("c5"), std::string::npos);
}

}  // namespace
}  // namespace m2s2l
