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

#include <algorithm>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capalign/model.hpp"

namespace capalign {

// Language half of a decode step: consumes an externally attended context
// plus the previous word, advances only the language LSTM, and returns
// log-probabilities over the vocabulary.
inline std::pair<Vec, DecoderState> decode_step(const Captioner& model, const Vec& context,
                                                int prev_token, const DecoderState& state) {
  require(prev_token >= 0 && prev_token < model.config().vocab_size,
          "token id " + std::to_string(prev_token) + " outside vocabulary of size " +
              std::to_string(model.config().vocab_size));
  require_shape(context.size() == model.config().feature_dim,
                "decode_step: context length mismatch");
  Tape tape;
  BoundParams bound(tape, model.parameters(), false);
  Var embed = tape.row_as_col(bound[model.embedding()], prev_token);
  Var lang_in = tape.vstack({tape.constant(context), embed, tape.constant(state.att_h)});
  LstmState lang_prev{tape.constant(state.lang_h), tape.constant(state.lang_c)};
  LstmState lang = lstm_step(tape, bound, model.lang_lstm(), lang_in, lang_prev);
  Var log_probs = tape.log_softmax_col(
      tape.add(tape.matmul(bound[model.out_weight()], lang.h), bound[model.out_bias()]));
  DecoderState next = state;
  next.lang_h = tape.value(lang.h).col(0);
  next.lang_c = tape.value(lang.c).col(0);
  next.prev_token = prev_token;
  return {tape.value(log_probs).col(0), next};
}

struct SamplingSchedule {
  double p_start = 1.0;
  double p_floor = 0.75;
  int decay_epochs = 20;
};

// Probability of feeding the ground-truth previous token: linear decay
// from p_start to p_floor over decay_epochs, then flat.
inline double scheduled_sampling_prob(int epoch, const SamplingSchedule& s) {
  require(epoch >= 0, "epoch must be non-negative");
  require(s.decay_epochs > 0, "decay_epochs must be positive");
  if (epoch >= s.decay_epochs) return s.p_floor;
  return s.p_start +
         (s.p_floor - s.p_start) * static_cast<double>(epoch) / s.decay_epochs;
}

struct Hypothesis {
  std::vector<int> tokens;  // generated ids; ends with the end marker once done
  double log_prob = 0.0;
  DecoderState state;
  std::vector<AttentionMap> attention;  // one map per generated token
};

struct DecodeResult {
  std::vector<int> tokens;  // generated ids including the end marker if reached
  double log_prob = 0.0;
  std::vector<AttentionMap> attention;
  bool truncated = false;  // no hypothesis finished within max_len
};

namespace decode_detail {

// Score order: higher log-probability first; ties prefer the sequence with
// smaller token ids, which also puts earlier completion first.
inline bool better(double lp_a, const std::vector<int>& tok_a, double lp_b,
                   const std::vector<int>& tok_b) {
  if (lp_a != lp_b) return lp_a > lp_b;
  return std::lexicographical_compare(tok_a.begin(), tok_a.end(), tok_b.begin(),
                                      tok_b.end());
}

}  // namespace decode_detail

inline DecodeResult beam_search(const Captioner& model, const Mat& V, int beam_size,
                                int max_len) {
  require(beam_size >= 1, "beam size must be at least 1");
  require(max_len >= 1, "max_len must be at least 1");
  const int m = model.config().vocab_size;

  std::vector<Hypothesis> live(1);
  live[0].state = model.initial_state();
  std::vector<Hypothesis> completed;

  for (int t = 0; t < max_len && !live.empty(); ++t) {
    struct Candidate {
      double log_prob;
      std::vector<int> tokens;
      std::size_t parent;
      int token;
    };
    std::vector<Candidate> candidates;
    std::vector<Captioner::StepResult> results(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      results[i] = model.step(V, live[i].state);
      for (int w = 0; w < m; ++w) {
        Candidate c;
        c.log_prob = live[i].log_prob + results[i].log_probs(w);
        c.tokens = live[i].tokens;
        c.tokens.push_back(w);
        c.parent = i;
        c.token = w;
        candidates.push_back(std::move(c));
      }
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      return decode_detail::better(a.log_prob, a.tokens, b.log_prob, b.tokens);
    });
    if (candidates.size() > static_cast<std::size_t>(beam_size))
      candidates.resize(static_cast<std::size_t>(beam_size));

    std::vector<Hypothesis> next_live;
    for (auto& c : candidates) {
      Hypothesis h;
      h.tokens = std::move(c.tokens);
      h.log_prob = c.log_prob;
      h.attention = live[c.parent].attention;
      h.attention.push_back(results[c.parent].alpha);
      if (c.token == Vocabulary::kEnd) {
        completed.push_back(std::move(h));
      } else {
        h.state = results[c.parent].state;
        h.state.prev_token = c.token;
        next_live.push_back(std::move(h));
      }
    }
    live = std::move(next_live);
  }

  const Hypothesis* best = nullptr;
  bool truncated = false;
  for (const auto& h : completed)
    if (!best ||
        decode_detail::better(h.log_prob, h.tokens, best->log_prob, best->tokens))
      best = &h;
  if (!best) {
    truncated = true;
    for (const auto& h : live)
      if (!best ||
          decode_detail::better(h.log_prob, h.tokens, best->log_prob, best->tokens))
        best = &h;
  }
  require(best != nullptr, "beam search produced no hypotheses");
  DecodeResult out;
  out.tokens = best->tokens;
  out.log_prob = best->log_prob;
  out.attention = best->attention;
  out.truncated = truncated;
  return out;
}

// Independent argmax loop; ties go to the smaller token id. Kept separate
// from beam_search so the two can be cross-checked.
inline DecodeResult greedy_decode(const Captioner& model, const Mat& V, int max_len) {
  DecodeResult out;
  DecoderState state = model.initial_state();
  for (int t = 0; t < max_len; ++t) {
    auto res = model.step(V, state);
    int w = 0;
    res.log_probs.maxCoeff(&w);
    out.tokens.push_back(w);
    out.log_prob += res.log_probs(w);
    out.attention.push_back(res.alpha);
    if (w == Vocabulary::kEnd) return out;
    state = res.state;
    state.prev_token = w;
  }
  out.truncated = true;
  return out;
}

// One decoded caption as a JSON line.
inline std::string caption_json_line(long long image_id, const std::string& caption,
                                     double log_prob,
                                     const std::vector<AttentionMap>& attention) {
  nlohmann::ordered_json line;
  line["image_id"] = image_id;
  line["caption"] = caption;
  line["log_prob"] = log_prob;
  auto maps = nlohmann::ordered_json::array();
  for (const auto& a : attention) {
    std::vector<double> row(a.data(), a.data() + a.size());
    maps.push_back(row);
  }
  line["attention"] = maps;
  return line.dump();
}

}  // namespace capalign
