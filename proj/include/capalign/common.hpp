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

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace capalign {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// splitmix64; used to derive independent sub-streams from one run seed so
// that every stage of a run is a pure function of (seed, stream, index).
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream,
                              std::uint64_t index = 0) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1) +
                    0xbf58476d1ce4e5b9ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream,
                                std::uint64_t index = 0) {
  return std::mt19937_64(mix_seed(seed, stream, index));
}

// Stream tags for run-level RNG derivation. Resuming a run re-derives the
// same generators from (seed, stream, epoch) without serializing RNG state.
namespace streams {
constexpr std::uint64_t kToyData = 1;
constexpr std::uint64_t kEncoderInit = 2;
constexpr std::uint64_t kCaptionerInit = 3;
constexpr std::uint64_t kClassifierEpoch = 4;
constexpr std::uint64_t kCaptionEpoch = 5;
}  // namespace streams

// Fan-in scaled uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline void init_uniform(Mat& m, int fan_in, std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(fan_in > 0 ? fan_in : 1));
  std::uniform_real_distribution<double> dist(-s, s);
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = dist(rng);
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace capalign
