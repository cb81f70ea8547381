// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include <unistd.h>

#include "m2s2l/config.hpp"

namespace m2s2l::testing {

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("m2s2l_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// 16x16 frames, D = 8: small enough for many training steps in a unit test.
inline RunConfig tiny_config() {
  RunConfig c;
  c.model.frame_h = c.model.frame_w = 16;
  c.model.k = 4;
  c.model.patch_sizes = {4, 8, 16};
  c.model.windows = {2, 3, 4};
  c.model.block.d_model = 8;
  c.model.block.state_size = 4;
  c.model.block.n_blocks = 1;
  c.model.memory_slots = 4;
  c.data.scene.clip_length = 10;
  c.data.scene.n_objects = 2;
  c.data.scene.min_size = 2;
  c.data.scene.max_size = 3;
  c.data.scene.min_speed = 0.5;
  c.data.scene.max_speed = 1.0;
  c.data.train_clips = 2;
  c.data.test_clips = 3;
  c.train.batch_size = 2;
  c.train.epochs = 1;
  c.train.adam.lr = 1e-3;
  return c;
}

}  // namespace m2s2l::testing
