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

#include <string>
#include <vector>

#include "capalign/attention.hpp"
#include "capalign/corpus.hpp"

namespace capalign {

struct ModelConfig {
  int vocab_size = 0;         // m
  int feature_dim = 64;       // d, must match the encoder
  int embed_dim = 512;        // e
  int hidden_dim = 1024;      // n, language LSTM
  int attn_hidden_dim = 1024; // n_att, attention LSTM
  int attn_width = 512;       // a
  int max_caption_tokens = 20;

  void validate() const {
    require(vocab_size > Vocabulary::kNumSpecials, "vocabulary too small");
    require(feature_dim > 0 && embed_dim > 0 && hidden_dim > 0 &&
                attn_hidden_dim > 0 && attn_width > 0,
            "model dimensions must be positive");
    require(max_caption_tokens > 0, "max caption length must be positive");
  }
};

// Recurrent state carried across decode steps, in plain value form.
struct DecoderState {
  Vec att_h, att_c;    // attention LSTM
  Vec lang_h, lang_c;  // language LSTM
  int prev_token = Vocabulary::kStart;
};

// Two-LSTM captioner. Per step: the attention LSTM reads the previous
// language hidden state, the mean region feature, and the previous word
// embedding; its hidden state conditions additive attention over the k
// regions; the language LSTM reads the attended context, the embedding,
// and the attention hidden state, and an affine layer over its hidden
// state yields word log-probabilities.
class Captioner {
 public:
  Captioner(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    auto rng = make_rng(seed, streams::kCaptionerInit);
    const int m = config_.vocab_size;
    const int d = config_.feature_dim;
    const int e = config_.embed_dim;
    const int n = config_.hidden_dim;
    const int n_att = config_.attn_hidden_dim;
    embedding_ = Mat(m, e);
    init_uniform(embedding_, e, rng);
    att_lstm_ = LstmParams::init(n + d + e, n_att, rng);
    attn_ = AttentionParams::init(config_.attn_width, d, n_att, rng);
    lang_lstm_ = LstmParams::init(d + e + n_att, n, rng);
    out_w_ = Mat(m, n);
    init_uniform(out_w_, n, rng);
    out_b_ = Mat::Zero(m, 1);
  }

  const ModelConfig& config() const { return config_; }

  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out = {{"captioner.embedding", &embedding_}};
    for (auto& p : att_lstm_.parameters("captioner.att_lstm")) out.push_back(p);
    for (auto& p : attn_.parameters("captioner.attn")) out.push_back(p);
    for (auto& p : lang_lstm_.parameters("captioner.lang_lstm")) out.push_back(p);
    out.push_back({"captioner.out.weight", &out_w_});
    out.push_back({"captioner.out.bias", &out_b_});
    return out;
  }

  std::vector<NamedParam> parameters() const {
    return const_cast<Captioner*>(this)->parameters();
  }

  struct StepVars {
    Var alpha;      // k x 1 predicted attention
    Var context;    // d x 1
    Var log_probs;  // m x 1
    LstmState att;
    LstmState lang;
  };

  // One decode step on a caller-owned tape. V is k x d, v_bar its row mean.
  StepVars step_graph(Tape& tape, const BoundParams& bound, Var V, Var v_bar,
                      int prev_token, LstmState att_prev, LstmState lang_prev) const {
    require(prev_token >= 0 && prev_token < config_.vocab_size,
            "token id " + std::to_string(prev_token) + " outside vocabulary of size " +
                std::to_string(config_.vocab_size));
    Var embed = tape.row_as_col(bound[embedding_], prev_token);
    StepVars sv;
    Var att_in = tape.vstack({lang_prev.h, v_bar, embed});
    sv.att = lstm_step(tape, bound, att_lstm_, att_in, att_prev);
    sv.alpha = attention_map_graph(tape, bound, attn_, V, sv.att.h);
    sv.context = attend_graph(tape, V, sv.alpha);
    Var lang_in = tape.vstack({sv.context, embed, sv.att.h});
    sv.lang = lstm_step(tape, bound, lang_lstm_, lang_in, lang_prev);
    sv.log_probs = tape.log_softmax_col(
        tape.add(tape.matmul(bound[out_w_], sv.lang.h), bound[out_b_]));
    return sv;
  }

  LstmState zero_state_vars(Tape& tape, int n) const {
    LstmState s;
    s.h = tape.constant(Mat::Zero(n, 1));
    s.c = tape.constant(Mat::Zero(n, 1));
    return s;
  }

  DecoderState initial_state() const {
    DecoderState s;
    s.att_h = Vec::Zero(config_.attn_hidden_dim);
    s.att_c = Vec::Zero(config_.attn_hidden_dim);
    s.lang_h = Vec::Zero(config_.hidden_dim);
    s.lang_c = Vec::Zero(config_.hidden_dim);
    s.prev_token = Vocabulary::kStart;
    return s;
  }

  struct StepResult {
    AttentionMap alpha;
    Vec context;
    Vec log_probs;
    DecoderState state;  // prev_token left untouched; caller sets it
  };

  // Value-level step for decoding: same graph on a fresh tape without
  // gradient bookkeeping, so decoding and training share the arithmetic.
  StepResult step(const Mat& V, const DecoderState& prev) const {
    Tape tape;
    BoundParams bound(tape, parameters(), false);
    Var v = tape.constant(V);
    Var v_bar = tape.mean_rows_as_col(v);
    LstmState att_prev{tape.constant(prev.att_h), tape.constant(prev.att_c)};
    LstmState lang_prev{tape.constant(prev.lang_h), tape.constant(prev.lang_c)};
    StepVars sv = step_graph(tape, bound, v, v_bar, prev.prev_token, att_prev, lang_prev);
    StepResult out;
    out.alpha = tape.value(sv.alpha).col(0);
    out.context = tape.value(sv.context).col(0);
    out.log_probs = tape.value(sv.log_probs).col(0);
    out.state.att_h = tape.value(sv.att.h).col(0);
    out.state.att_c = tape.value(sv.att.c).col(0);
    out.state.lang_h = tape.value(sv.lang.h).col(0);
    out.state.lang_c = tape.value(sv.lang.c).col(0);
    out.state.prev_token = prev.prev_token;
    return out;
  }

  Mat& embedding() { return embedding_; }
  LstmParams& att_lstm() { return att_lstm_; }
  LstmParams& lang_lstm() { return lang_lstm_; }
  AttentionParams& attention() { return attn_; }
  Mat& out_weight() { return out_w_; }
  Mat& out_bias() { return out_b_; }
  const Mat& embedding() const { return embedding_; }
  const LstmParams& att_lstm() const { return att_lstm_; }
  const LstmParams& lang_lstm() const { return lang_lstm_; }
  const AttentionParams& attention() const { return attn_; }
  const Mat& out_weight() const { return out_w_; }
  const Mat& out_bias() const { return out_b_; }

 private:
  ModelConfig config_;
  Mat embedding_;  // m x e
  LstmParams att_lstm_;
  AttentionParams attn_;
  LstmParams lang_lstm_;
  Mat out_w_;  // m x n
  Mat out_b_;  // m x 1
};

}  // namespace capalign
