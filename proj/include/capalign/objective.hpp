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

#include <map>
#include <random>
#include <vector>

#include "capalign/model.hpp"

namespace capalign {

struct LossConfig {
  double lambda = 100.0;
  double epsilon_clamp = 1e-8;
  bool skip_degenerate_targets = false;

  void validate() const {
    require(lambda >= 0.0, "lambda must be non-negative");
    require(epsilon_clamp > 0.0, "epsilon clamp must be positive");
  }
};

struct LossBreakdown {
  double caption_loss = 0.0;    // sum over steps
  double alignment_loss = 0.0;  // sum over steps with a target
  double total = 0.0;           // caption + lambda * alignment
  std::vector<double> caption_per_step;
  std::vector<double> alignment_per_step;  // 0 at steps without a target
};

// Per-step negative log-likelihood of the target tokens; padded steps
// contribute zero. Returns (sum, per-step losses).
inline std::pair<double, std::vector<double>> caption_nll(
    const std::vector<Vec>& step_log_probs, const std::vector<int>& targets,
    const std::vector<bool>& pad_mask) {
  require(step_log_probs.size() == targets.size() && targets.size() == pad_mask.size(),
          "caption_nll: step count mismatch");
  double sum = 0.0;
  std::vector<double> per_step;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (pad_mask[t]) {
      per_step.push_back(0.0);
      continue;
    }
    require(targets[t] >= 0 &&
                targets[t] < static_cast<int>(step_log_probs[t].size()),
            "caption_nll: target id outside vocabulary");
    const double loss = -step_log_probs[t](targets[t]);
    per_step.push_back(loss);
    sum += loss;
  }
  return {sum, per_step};
}

// Cross entropy from a saliency target onto the predicted map, with the
// epsilon clamp inside the log. A step whose word has no target scores
// exactly zero; callers encode that by not calling this at all.
inline double alignment_loss(const Vec& alpha_hat, const Vec& alpha_target, double eps) {
  require_shape(alpha_hat.size() == alpha_target.size(),
                "alignment_loss: length mismatch");
  double loss = 0.0;
  for (Eigen::Index i = 0; i < alpha_hat.size(); ++i)
    loss -= alpha_target(i) * std::log(std::max(alpha_hat(i), eps));
  return loss;
}

inline LossBreakdown total_loss(double caption, double alignment, const LossConfig& config) {
  config.validate();
  LossBreakdown b;
  b.caption_loss = caption;
  b.alignment_loss = alignment;
  b.total = caption + config.lambda * alignment;
  return b;
}

// Per-timestep saliency targets of one caption: step index -> distribution
// over the k regions. Steps absent from the map carry no alignment term.
using StepTargets = std::map<int, Vec>;

struct SequenceLossVars {
  Var caption;  // 1x1, sum over steps
  Var total;    // 1x1; equals caption when no alignment terms were built
  std::vector<Var> alphas;         // predicted attention per step
  std::vector<Var> caption_steps;  // 1x1 per step
  std::vector<std::pair<int, Var>> alignment_steps;  // (step, 1x1 loss)
  bool has_alignment = false;
};

struct UnrollOptions {
  double teacher_prob = 1.0;        // probability of feeding the true previous token
  std::mt19937_64* rng = nullptr;   // required when teacher_prob < 1
};

// Unrolls the captioner over one caption and builds the combined training
// objective on the tape. With lambda == 0 (or no targets) the alignment
// term is not built at all, so the ablated objective is the caption graph
// alone. Saliency targets enter as constants; no gradient reaches them.
inline SequenceLossVars sequence_loss_graph(Tape& tape, const BoundParams& bound,
                                            const Captioner& model, Var V,
                                            const TokenSequence& seq,
                                            const StepTargets& targets,
                                            const LossConfig& config,
                                            const UnrollOptions& opts = {}) {
  config.validate();
  require(seq.steps() >= 1, "caption sequence has no decode steps");
  require(opts.teacher_prob >= 0.0 && opts.teacher_prob <= 1.0,
          "teacher_prob must lie in [0, 1]");
  require(opts.teacher_prob >= 1.0 || opts.rng != nullptr,
          "sampled unrolling needs an RNG");

  SequenceLossVars out;
  Var v_bar = tape.mean_rows_as_col(V);
  LstmState att = model.zero_state_vars(tape, model.config().attn_hidden_dim);
  LstmState lang = model.zero_state_vars(tape, model.config().hidden_dim);
  const bool build_alignment = config.lambda > 0.0 && !targets.empty();

  int prev_token = seq.ids.front();
  Var align_sum{};
  for (int t = 0; t < seq.steps(); ++t) {
    auto sv = model.step_graph(tape, bound, V, v_bar, prev_token, att, lang);
    att = sv.att;
    lang = sv.lang;
    out.alphas.push_back(sv.alpha);

    const int target_token = seq.ids[static_cast<std::size_t>(t) + 1];
    Var step_loss = tape.neg(tape.pick(sv.log_probs, target_token));
    out.caption_steps.push_back(step_loss);
    out.caption = (t == 0) ? step_loss : tape.add(out.caption, step_loss);

    if (build_alignment) {
      auto it = targets.find(t);
      if (it != targets.end()) {
        Var a = tape.cross_entropy_const(sv.alpha, it->second, config.epsilon_clamp);
        out.alignment_steps.emplace_back(t, a);
        align_sum = out.has_alignment ? tape.add(align_sum, a) : a;
        out.has_alignment = true;
      }
    }

    if (t + 1 < seq.steps()) {
      const int truth = seq.ids[static_cast<std::size_t>(t) + 1];
      if (opts.teacher_prob >= 1.0) {
        prev_token = truth;
      } else {
        std::uniform_real_distribution<double> coin(0.0, 1.0);
        if (coin(*opts.rng) < opts.teacher_prob) {
          prev_token = truth;
        } else {
          const Mat& lp = tape.value(sv.log_probs);
          std::vector<double> probs(static_cast<std::size_t>(lp.rows()));
          for (Eigen::Index i = 0; i < lp.rows(); ++i)
            probs[static_cast<std::size_t>(i)] = std::exp(lp(i, 0));
          std::discrete_distribution<int> dist(probs.begin(), probs.end());
          prev_token = dist(*opts.rng);
        }
      }
    }
  }
  out.total = out.has_alignment
                  ? tape.add(out.caption, tape.scale(align_sum, config.lambda))
                  : out.caption;
  return out;
}

inline LossBreakdown breakdown_from(const Tape& tape, const SequenceLossVars& vars,
                                    const LossConfig& config) {
  LossBreakdown b;
  b.caption_per_step.reserve(vars.caption_steps.size());
  b.alignment_per_step.assign(vars.caption_steps.size(), 0.0);
  for (Var v : vars.caption_steps) b.caption_per_step.push_back(tape.value(v)(0, 0));
  b.caption_loss = tape.value(vars.caption)(0, 0);
  for (const auto& [step, v] : vars.alignment_steps) {
    b.alignment_per_step[static_cast<std::size_t>(step)] = tape.value(v)(0, 0);
    b.alignment_loss += tape.value(v)(0, 0);
  }
  b.total = b.caption_loss + config.lambda * b.alignment_loss;
  return b;
}

}  // namespace capalign
