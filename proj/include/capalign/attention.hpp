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

#include <random>
#include <string>
#include <vector>

#include "capalign/tape.hpp"

namespace capalign {

// Predicted attention over the k regions: strictly positive, sums to 1.
using AttentionMap = Vec;

inline bool is_distribution(const Vec& v, double tol = 1e-9) {
  if (v.size() == 0) return false;
  if (v.minCoeff() < 0.0) return false;
  return std::abs(v.sum() - 1.0) <= tol;
}

// Single LSTM cell. Gate pre-activations are stacked as 4n rows in the
// order [input; forget; cell candidate; output]; the forget slice of the
// bias starts at 1.
struct LstmParams {
  Mat w_x;   // 4n x input_dim
  Mat w_h;   // 4n x n
  Mat bias;  // 4n x 1

  int hidden_dim() const { return static_cast<int>(w_h.cols()); }
  int input_dim() const { return static_cast<int>(w_x.cols()); }

  static LstmParams init(int input_dim, int n, std::mt19937_64& rng) {
    LstmParams p;
    p.w_x = Mat(4 * n, input_dim);
    init_uniform(p.w_x, input_dim, rng);
    p.w_h = Mat(4 * n, n);
    init_uniform(p.w_h, n, rng);
    p.bias = Mat::Zero(4 * n, 1);
    p.bias.block(n, 0, n, 1).setOnes();
    return p;
  }

  std::vector<NamedParam> parameters(const std::string& prefix) {
    return {{prefix + ".w_x", &w_x}, {prefix + ".w_h", &w_h}, {prefix + ".bias", &bias}};
  }
};

struct LstmState {
  Var h;
  Var c;
};

inline LstmState lstm_step(Tape& tape, const BoundParams& bound, const LstmParams& p,
                           Var x, LstmState prev) {
  const int n = p.hidden_dim();
  Var z = tape.add(tape.add(tape.matmul(bound[p.w_x], x), tape.matmul(bound[p.w_h], prev.h)),
                   bound[p.bias]);
  Var i = tape.sigmoid_(tape.rows(z, 0, n));
  Var f = tape.sigmoid_(tape.rows(z, n, n));
  Var g = tape.tanh_(tape.rows(z, 2 * n, n));
  Var o = tape.sigmoid_(tape.rows(z, 3 * n, n));
  LstmState next;
  next.c = tape.add(tape.cmul(f, prev.c), tape.cmul(i, g));
  next.h = tape.cmul(o, tape.tanh_(next.c));
  return next;
}

// Additive attention: score_i = omega' tanh(U_v v_i + U_h h), softmaxed
// over the k regions.
struct AttentionParams {
  Mat u_v;    // a x d
  Mat u_h;    // a x n
  Mat omega;  // a x 1

  static AttentionParams init(int a, int d, int n, std::mt19937_64& rng) {
    AttentionParams p;
    p.u_v = Mat(a, d);
    init_uniform(p.u_v, d, rng);
    p.u_h = Mat(a, n);
    init_uniform(p.u_h, n, rng);
    p.omega = Mat(a, 1);
    init_uniform(p.omega, a, rng);
    return p;
  }

  std::vector<NamedParam> parameters(const std::string& prefix) {
    return {{prefix + ".u_v", &u_v}, {prefix + ".u_h", &u_h}, {prefix + ".omega", &omega}};
  }
};

// V is k x d (one region feature per row); h is the conditioning hidden
// state. Returns the k x 1 attention distribution.
inline Var attention_map_graph(Tape& tape, const BoundParams& bound,
                               const AttentionParams& p, Var V, Var h) {
  Var projected = tape.add_colwise(tape.matmul_nt(bound[p.u_v], V),
                                   tape.matmul(bound[p.u_h], h));
  Var scores = tape.matmul_tn(tape.tanh_(projected), bound[p.omega]);  // k x 1
  return tape.softmax_col(scores);
}

// Context vector: sum_i alpha_i v_i = V' alpha.
inline Var attend_graph(Tape& tape, Var V, Var alpha) {
  return tape.matmul_tn(V, alpha);
}

// One-shot evaluation of the non-recurrent attention variant (conditioned
// on an externally supplied hidden state).
inline AttentionMap mlp_attention(const Mat& V, const Vec& h, AttentionParams& params) {
  Tape tape;
  BoundParams bound(tape, params.parameters("attn"), false);
  Var alpha = attention_map_graph(tape, bound, params, tape.constant(V),
                                  tape.constant(h));
  return tape.value(alpha).col(0);
}

inline Vec attend(const Mat& V, const Vec& alpha) {
  require_shape(V.rows() == alpha.size(), "attend: region count mismatch");
  return V.transpose() * alpha;
}

}  // namespace capalign
