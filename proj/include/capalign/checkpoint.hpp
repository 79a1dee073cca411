// Copyright 2026 The Capalign Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capalign/optim.hpp"
#include "capalign/saliency.hpp"
#include "capalign/tape.hpp"

namespace capalign {

// Versioned parameter container: a fixed magic, a JSON manifest listing
// array names and shapes plus a free-form meta object, then the raw array
// payloads as little-endian float64, row-major, in manifest order. The
// writer is canonical (compact manifest, fixed field order), so saving a
// loaded checkpoint reproduces the input file byte for byte.
struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, Mat>> arrays;

  void add(const std::string& name, const Mat& value) {
    require(!name.empty(), "checkpoint: array name must be nonempty");
    require(value.size() > 0, "checkpoint: array '" + name + "' is empty");
    require(!has(name), "checkpoint: duplicate array '" + name + "'");
    arrays.emplace_back(name, value);
  }

  bool has(const std::string& name) const {
    for (const auto& [n, m] : arrays) {
      if (n == name) return true;
    }
    return false;
  }

  const Mat& get(const std::string& name) const {
    for (const auto& [n, m] : arrays) {
      if (n == name) return m;
    }
    throw std::invalid_argument("checkpoint: no array named '" + name + "'");
  }
};

namespace ckpt_detail {

inline constexpr char kMagic[8] = {'C', 'A', 'P', 'A', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path)
      : bytes_(std::move(bytes)), path_(std::move(path)) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(raw(4)); }
  std::uint64_t u64() { return raw(8); }
  double f64() { return std::bit_cast<double>(raw(8)); }

  std::string chunk(std::uint64_t len) {
    need(len);
    std::string out = bytes_.substr(pos_, len);
    pos_ += len;
    return out;
  }

  void expect_magic() {
    need(sizeof(kMagic));
    if (std::memcmp(bytes_.data(), kMagic, sizeof(kMagic)) != 0)
      throw std::runtime_error("checkpoint: " + path_ + " has the wrong magic bytes");
    pos_ = sizeof(kMagic);
  }

  void expect_done() const {
    if (pos_ != bytes_.size())
      throw std::runtime_error("checkpoint: " + path_ + " has trailing bytes");
  }

 private:
  void need(std::uint64_t len) const {
    if (pos_ + len > bytes_.size())
      throw std::runtime_error("checkpoint: " + path_ + " is truncated");
  }

  std::uint64_t raw(int width) {
    need(static_cast<std::uint64_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }

  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace ckpt_detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::ordered_json manifest;
  manifest["dtype"] = "float64";
  auto list = nlohmann::ordered_json::array();
  for (const auto& [name, mat] : ckpt.arrays) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["rows"] = mat.rows();
    entry["cols"] = mat.cols();
    list.push_back(entry);
  }
  manifest["arrays"] = list;
  manifest["meta"] = ckpt.meta;
  const std::string manifest_bytes = manifest.dump();

  std::string out;
  out.append(ckpt_detail::kMagic, sizeof(ckpt_detail::kMagic));
  ckpt_detail::put_u32(out, ckpt_detail::kVersion);
  ckpt_detail::put_u64(out, manifest_bytes.size());
  out += manifest_bytes;
  for (const auto& [name, mat] : ckpt.arrays) {
    for (Eigen::Index r = 0; r < mat.rows(); ++r)
      for (Eigen::Index c = 0; c < mat.cols(); ++c) ckpt_detail::put_f64(out, mat(r, c));
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw std::runtime_error("checkpoint: cannot write " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  file.flush();
  if (!file) throw std::runtime_error("checkpoint: short write to " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(file)),
                    std::istreambuf_iterator<char>());

  ckpt_detail::Reader reader(std::move(bytes), path);
  reader.expect_magic();
  const std::uint32_t version = reader.u32();
  if (version != ckpt_detail::kVersion)
    throw std::runtime_error("checkpoint: " + path + " has unsupported version " +
                             std::to_string(version));
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(reader.chunk(reader.u64()));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("checkpoint: " + path + " has a bad manifest: " + e.what());
  }
  if (manifest.value("dtype", "") != "float64")
    throw std::runtime_error("checkpoint: " + path + " has unsupported dtype");

  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::ordered_json::object());
  for (const auto& entry : manifest.at("arrays")) {
    const auto name = entry.at("name").get<std::string>();
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    if (rows <= 0 || cols <= 0)
      throw std::runtime_error("checkpoint: " + path + " array '" + name +
                               "' has a bad shape");
    Mat mat(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) mat(r, c) = reader.f64();
    ckpt.add(name, mat);
  }
  reader.expect_done();
  return ckpt;
}

// Parameter adapters. Restoring is strict: every parameter must be present
// with its exact shape, so loading a checkpoint from a differently sized
// model fails instead of truncating.

inline void add_parameters(Checkpoint& ckpt, const std::vector<NamedParam>& params) {
  for (const auto& p : params) ckpt.add(p.name, *p.mat);
}

inline void restore_parameters(const Checkpoint& ckpt,
                               const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    const Mat& stored = ckpt.get(p.name);
    require_shape(stored.rows() == p.mat->rows() && stored.cols() == p.mat->cols(),
                  "checkpoint: shape mismatch for '" + p.name + "'");
    *p.mat = stored;
  }
}

// Optimizer moments ride along under `<prefix>.m.<param>` / `.v.<param>`
// with the step count in meta, so a resumed run continues the exact
// moment estimates of the interrupted one.

inline void add_optimizer(Checkpoint& ckpt, const Adam& opt,
                          const std::string& prefix = "adam") {
  ckpt.meta[prefix + ".step_count"] = opt.step_count();
  for (const auto& [name, moments] : opt.state()) {
    ckpt.add(prefix + ".m." + name, moments.m);
    ckpt.add(prefix + ".v." + name, moments.v);
  }
}

inline void restore_optimizer(const Checkpoint& ckpt, Adam& opt,
                              const std::string& prefix = "adam") {
  require(ckpt.meta.contains(prefix + ".step_count"),
          "checkpoint: missing optimizer state '" + prefix + "'");
  std::map<std::string, Adam::Moments> state;
  const std::string m_prefix = prefix + ".m.";
  for (const auto& [name, mat] : ckpt.arrays) {
    if (name.rfind(m_prefix, 0) != 0) continue;
    const std::string param = name.substr(m_prefix.size());
    state[param] = {mat, ckpt.get(prefix + ".v." + param)};
  }
  opt.restore(ckpt.meta.at(prefix + ".step_count").get<long long>(), std::move(state));
}

// Saliency-target adapters: one array per (image, category) pair holding
// the k-vector, with the identifying fields and the degenerate flag in a
// meta list. Array order follows the table's key order.

inline void add_saliency_targets(Checkpoint& ckpt, const SaliencyTable& table) {
  auto list = nlohmann::ordered_json::array();
  for (const auto& [key, target] : table) {
    const std::string name =
        "target." + std::to_string(key.first) + "." + std::to_string(key.second);
    ckpt.add(name, target.alpha);
    nlohmann::ordered_json entry;
    entry["image_id"] = key.first;
    entry["category"] = key.second;
    entry["k"] = target.alpha.size();
    entry["degenerate"] = target.degenerate;
    list.push_back(entry);
  }
  ckpt.meta["saliency_targets"] = list;
}

inline SaliencyTable restore_saliency_targets(const Checkpoint& ckpt) {
  require(ckpt.meta.contains("saliency_targets"),
          "checkpoint: missing saliency target manifest");
  SaliencyTable table;
  for (const auto& entry : ckpt.meta.at("saliency_targets")) {
    const auto image_id = entry.at("image_id").get<long long>();
    const auto category = entry.at("category").get<int>();
    const std::string name =
        "target." + std::to_string(image_id) + "." + std::to_string(category);
    const Mat& stored = ckpt.get(name);
    require_shape(stored.cols() == 1 && stored.rows() == entry.at("k").get<Eigen::Index>(),
                  "checkpoint: saliency target '" + name + "' has a bad shape");
    SaliencyTarget target;
    target.alpha = stored.col(0);
    target.category = category;
    target.degenerate = entry.at("degenerate").get<bool>();
    table[{image_id, category}] = std::move(target);
  }
  return table;
}

}  // namespace capalign
