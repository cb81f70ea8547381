// Copyright 2026 The m2s2l Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "m2s2l/data_pipeline.hpp"
#include "m2s2l/errors.hpp"
#include "m2s2l/tensor.hpp"

namespace m2s2l {

// Layout (little endian):
//   "M2SLCKPT" u16 version
//   u32 len + config text, u32 len + state text (key=value lines)
//   u32 n_entries, per entry: u16 name len, name, u8 dtype (0 = f32), u8 ndim, u32 dims[ndim], u64 offset
//   f32 payload
inline constexpr char kCkptMagic[8] = {'M', '2', 'S', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint16_t kCkptVersion = 1;

struct Checkpoint {
  std::string config_text;
  std::map<std::string, std::string> state;
  std::vector<std::pair<std::string, Tensor<float>>> entries;

  void add(std::string name, Tensor<float> t) { entries.emplace_back(std::move(name), std::move(t)); }

  const Tensor<float>& get(const std::string& name) const {
    for (const auto& [n, t] : entries)
      if (n == name) return t;
    throw IoError("checkpoint has no entry '" + name + "'");
  }

  const std::string& state_value(const std::string& key) const {
    auto it = state.find(key);
    if (it == state.end()) throw IoError("checkpoint state has no key '" + key + "'");
    return it->second;
  }
};

namespace detail {

inline void put_blob(std::ostream& os, const std::string& s) {
  put_le<std::uint32_t>(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}

inline std::string get_blob(std::istream& is, std::uint64_t limit) {
  const auto n = get_le<std::uint32_t>(is);
  if (n > limit) throw IoError("checkpoint: blob length exceeds file size");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw IoError("checkpoint: truncated blob");
  return s;
}

}  // namespace detail

// Written to a temporary file first and renamed into place.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  namespace fs = std::filesystem;
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(kCkptMagic, 8);
    detail::put_le<std::uint16_t>(os, kCkptVersion);
    detail::put_blob(os, ck.config_text);
    std::string st;
    for (const auto& [k, v] : ck.state) st += k + "=" + v + "\n";
    detail::put_blob(os, st);
    detail::put_le<std::uint32_t>(os, std::uint32_t(ck.entries.size()));
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ck.entries) {
      require(name.size() < 65536 && t.rank() < 256, "save_checkpoint: entry '" + name + "' too large");
      detail::put_le<std::uint16_t>(os, std::uint16_t(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      detail::put_le<std::uint8_t>(os, 0);
      detail::put_le<std::uint8_t>(os, std::uint8_t(t.rank()));
      for (std::size_t d = 0; d < t.rank(); ++d) detail::put_le<std::uint32_t>(os, std::uint32_t(t.dim(d)));
      detail::put_le<std::uint64_t>(os, offset);
      offset += 4 * std::uint64_t(t.size());
    }
    for (const auto& e : ck.entries)
      for (float v : e.second.vec()) detail::put_f32(os, v);
    os.flush();
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  is.seekg(0, std::ios::end);
  const auto file_size = std::uint64_t(is.tellg());
  is.seekg(0);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCkptMagic, 8) != 0) throw IoError(path.string() + ": not a checkpoint");
  const auto version = detail::get_le<std::uint16_t>(is);
  if (version != kCkptVersion) throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.config_text = detail::get_blob(is, file_size);
  std::istringstream st(detail::get_blob(is, file_size));
  for (std::string line; std::getline(st, line);) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) ck.state[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto n = detail::get_le<std::uint32_t>(is);
  struct Meta {
    std::string name;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Meta> metas;
  for (std::uint32_t i = 0; i < n; ++i) {
    Meta m;
    m.name.resize(detail::get_le<std::uint16_t>(is));
    if (!is.read(m.name.data(), std::streamsize(m.name.size()))) throw IoError(path.string() + ": truncated manifest");
    if (detail::get_le<std::uint8_t>(is) != 0) throw IoError(path.string() + ": unsupported dtype for " + m.name);
    m.shape.resize(detail::get_le<std::uint8_t>(is));
    for (auto& d : m.shape) d = detail::get_le<std::uint32_t>(is);
    m.offset = detail::get_le<std::uint64_t>(is);
    metas.push_back(std::move(m));
  }
  const auto base = std::uint64_t(is.tellg());
  for (const auto& m : metas) {
    const std::uint64_t bytes = 4 * shape_numel(m.shape);
    if (base + m.offset + bytes > file_size) throw IoError(path.string() + ": payload truncated at " + m.name);
    is.seekg(std::streamoff(base + m.offset));
    Tensor<float> t(m.shape);
    for (auto& v : t.vec()) v = detail::get_f32(is);
    ck.add(m.name, std::move(t));
  }
  return ck;
}

}  // namespace m2s2l
