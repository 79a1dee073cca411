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

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "capalign/tape.hpp"

namespace capalign {

// Adaptive-moment optimizer with optional global-norm gradient clipping.
// Moment state is keyed by parameter name so it can ride along in
// checkpoints; parameters first seen mid-run start with fresh moments.
class Adam {
 public:
  struct Moments {
    Mat m;
    Mat v;
  };

  explicit Adam(double lr, double clip_norm = 0.0, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), clip_norm_(clip_norm), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(const std::vector<NamedParam>& params, std::vector<Mat> grads) {
    require(params.size() == grads.size(), "Adam: parameter/gradient count mismatch");
    if (clip_norm_ > 0.0) {
      double sq = 0.0;
      for (const Mat& g : grads) sq += g.squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > clip_norm_) {
        const double s = clip_norm_ / norm;
        for (Mat& g : grads) g *= s;
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Mat& p = *params[i].mat;
      const Mat& g = grads[i];
      require_shape(p.rows() == g.rows() && p.cols() == g.cols(),
                    "Adam: gradient shape mismatch for " + params[i].name);
      auto [it, fresh] = state_.try_emplace(params[i].name);
      if (fresh) {
        it->second.m = Mat::Zero(p.rows(), p.cols());
        it->second.v = Mat::Zero(p.rows(), p.cols());
      }
      Mat& m = it->second.m;
      Mat& v = it->second.v;
      m = beta1_ * m + (1.0 - beta1_) * g;
      v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
      p.array() -= lr_ * (m.array() / bc1) /
                   ((v.array() / bc2).sqrt() + eps_);
    }
  }

  double learning_rate() const { return lr_; }
  long long step_count() const { return t_; }
  const std::map<std::string, Moments>& state() const { return state_; }

  // checkpoint restore
  void restore(long long step_count, std::map<std::string, Moments> state) {
    t_ = step_count;
    state_ = std::move(state);
  }

 private:
  double lr_;
  double clip_norm_;
  double beta1_;
  double beta2_;
  double eps_;
  long long t_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace capalign
