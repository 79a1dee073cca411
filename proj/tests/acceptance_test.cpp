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

// Acceptance gate. Each test covers one shipped guarantee end to end and
// prints a single pass/fail line with its measured runtime, so a plain run
// of this binary doubles as the release report. Tolerances are pinned in
// the checks, not configurable.

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "capalign/attention.hpp"
#include "capalign/checkpoint.hpp"
#include "capalign/decoder.hpp"
#include "capalign/metrics.hpp"
#include "capalign/objective.hpp"
#include "capalign/saliency.hpp"
#include "capalign/toy_data.hpp"
#include "capalign/train.hpp"
#include "test_util.hpp"

namespace capalign {
namespace {

namespace fs = std::filesystem;

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_)
        .count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

// Collects a verdict and prints the one-line report when finished. Budgets
// are part of the verdict: overrunning one fails the criterion.
struct Criterion {
  std::string label;
  std::string name;
  double budget_seconds;
  Stopwatch timer;
  bool ok = true;
  std::string detail;

  Criterion(std::string label_in, std::string name_in, double budget = 0.0)
      : label(std::move(label_in)), name(std::move(name_in)), budget_seconds(budget) {}

  void check(bool cond, const std::string& what) {
    EXPECT_TRUE(cond) << what;
    if (!cond) ok = false;
  }

  void finish() {
    const double sec = timer.seconds();
    if (budget_seconds > 0.0)
      check(sec < budget_seconds, "runtime " + fmt(sec, 4) + "s exceeds the " +
                                      fmt(budget_seconds, 4) + "s budget");
    std::ostringstream os;
    os << '[' << label << "] " << (ok ? "PASS" : "FAIL") << "  " << std::fixed
       << std::setprecision(1) << sec << 's';
    if (budget_seconds > 0.0) os << " / " << std::setprecision(0) << budget_seconds << 's';
    os << "  " << name;
    if (!detail.empty()) os << ": " << detail;
    std::cout << os.str() << '\n' << std::flush;
  }
};

std::string file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in.good()) << path;
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

bool is_simplex(const Vec& a, double tol = 1e-9) {
  if (a.size() == 0 || !a.allFinite()) return false;
  if (a.minCoeff() < 0.0) return false;
  return std::abs(a.sum() - 1.0) <= tol;
}

double sigma(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// Gate-by-gate scalar LSTM evaluation, written against the published
// update equations rather than the library's matrix layout.
void scalar_lstm(const LstmParams& p, const Vec& x, const Vec& h_prev,
                 const Vec& c_prev, Vec& h_out, Vec& c_out) {
  const int n = p.hidden_dim();
  h_out = Vec(n);
  c_out = Vec(n);
  for (int r = 0; r < n; ++r) {
    double zi = p.bias(r, 0), zf = p.bias(n + r, 0), zg = p.bias(2 * n + r, 0),
           zo = p.bias(3 * n + r, 0);
    for (int j = 0; j < p.input_dim(); ++j) {
      zi += p.w_x(r, j) * x(j);
      zf += p.w_x(n + r, j) * x(j);
      zg += p.w_x(2 * n + r, j) * x(j);
      zo += p.w_x(3 * n + r, j) * x(j);
    }
    for (int j = 0; j < n; ++j) {
      zi += p.w_h(r, j) * h_prev(j);
      zf += p.w_h(n + r, j) * h_prev(j);
      zg += p.w_h(2 * n + r, j) * h_prev(j);
      zo += p.w_h(3 * n + r, j) * h_prev(j);
    }
    c_out(r) = sigma(zf) * c_prev(r) + sigma(zi) * std::tanh(zg);
    h_out(r) = sigma(zo) * std::tanh(c_out(r));
  }
}

// Depth-first enumeration of every caption up to max_len, tracking the
// best finished sequence under the decoder's own tie rule.
void enumerate_sequences(const Captioner& model, const Mat& V, const DecoderState& state,
                         std::vector<int>& tokens, double lp, int max_len, bool& found,
                         double& best_lp, std::vector<int>& best_tokens) {
  auto res = model.step(V, state);
  for (int w = 0; w < model.config().vocab_size; ++w) {
    const double lp2 = lp + res.log_probs(w);
    tokens.push_back(w);
    if (w == Vocabulary::kEnd) {
      if (!found || decode_detail::better(lp2, tokens, best_lp, best_tokens)) {
        found = true;
        best_lp = lp2;
        best_tokens = tokens;
      }
    } else if (static_cast<int>(tokens.size()) < max_len) {
      DecoderState next = res.state;
      next.prev_token = w;
      enumerate_sequences(model, V, next, tokens, lp2, max_len, found, best_lp,
                          best_tokens);
    }
    tokens.pop_back();
  }
}

// Mean attention mass that decoded visual words place on the cells of the
// named shape, over every (image, step) where the decoded word names a
// shape that is actually present.
struct MaskMass {
  double mean = 0.0;
  int events = 0;
};

MaskMass attention_mask_mass(const TrainedBundle& b, const Dataset& ds,
                             const MaskTable& masks, int beam_size) {
  double sum = 0.0;
  int events = 0;
  for (const auto& s : ds.samples) {
    FeatureGrid grid = b.encoder.extract_features(s.image);
    DecodeResult d =
        beam_search(b.model, grid.V, beam_size, b.model.config().max_caption_tokens);
    auto image_masks = masks.find(s.image_id);
    if (image_masks == masks.end()) continue;
    for (std::size_t t = 0; t < d.tokens.size(); ++t) {
      const int id = d.tokens[t];
      if (id < Vocabulary::kNumSpecials) continue;
      const int category = b.mapping.category(b.vocab.word(id));
      if (category < 0) continue;
      auto cells = image_masks->second.find(category);
      if (cells == image_masks->second.end()) continue;
      double mass = 0.0;
      for (int cell : cells->second) mass += d.attention[t](cell);
      sum += mass;
      ++events;
    }
  }
  MaskMass out;
  out.events = events;
  if (events > 0) out.mean = sum / events;
  return out;
}

// ---------------------------------------------------------------------------
// 1. Analytic gradients of the combined training objective match central
//    finite differences at the pinned model size, and the saliency targets
//    stay outside the differentiated graph.
// ---------------------------------------------------------------------------

TEST(Acceptance, C1GradientSuite) {
  Criterion crit("criterion 1", "combined-objective gradient check", 120.0);

  ModelConfig cfg;
  cfg.vocab_size = 20;
  cfg.feature_dim = 8;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 32;
  cfg.attn_hidden_dim = 8;
  cfg.attn_width = 8;
  cfg.max_caption_tokens = 8;
  const int k = 4;
  const int kSeeds = 20;

  struct SeedOutcome {
    double rel_err = 1.0;
    int entries = 0;
    double target_grad = 1.0;
    double model_grad = 0.0;
  };
  std::vector<SeedOutcome> outcome(kSeeds);
  std::atomic<int> next{0};

  auto worker = [&]() {
    for (int s; (s = next.fetch_add(1)) < kSeeds;) {
      std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(s));
      Captioner model(cfg, 7000 + static_cast<std::uint64_t>(s));
      Mat V = test::random_mat(k, cfg.feature_dim, rng);
      std::uniform_int_distribution<int> word(Vocabulary::kNumSpecials,
                                              cfg.vocab_size - 1);
      TokenSequence seq;
      seq.ids = {Vocabulary::kStart, word(rng), word(rng), word(rng), Vocabulary::kEnd};
      StepTargets targets;
      targets[0] = test::random_simplex(k, rng);
      targets[2] = test::random_simplex(k, rng);
      LossConfig loss;
      loss.lambda = 100.0;

      std::vector<NamedParam> params = model.parameters();
      params.push_back({"V", &V});
      auto build = [&](Tape& tape, const BoundParams& bound) {
        return sequence_loss_graph(tape, bound, model, bound[V], seq, targets, loss)
            .total;
      };
      auto res = test::check_param_gradients(params, build, 1e-6);
      outcome[static_cast<std::size_t>(s)].rel_err = res.max_rel_err;
      outcome[static_cast<std::size_t>(s)].entries = res.entries;

      // feed one target through a differentiable leaf: its gradient must
      // stay exactly zero while the model still receives one
      Tape tape;
      BoundParams bound(tape, model.parameters(), true);
      Var target_leaf = tape.leaf(Mat(targets.at(0)), true);
      StepTargets wired = targets;
      wired[0] = tape.value(target_leaf).col(0);
      auto vars =
          sequence_loss_graph(tape, bound, model, tape.constant(V), seq, wired, loss);
      tape.backward(vars.total);
      outcome[static_cast<std::size_t>(s)].target_grad =
          tape.grad(target_leaf).cwiseAbs().maxCoeff();
      outcome[static_cast<std::size_t>(s)].model_grad =
          tape.grad(bound[model.embedding()]).cwiseAbs().maxCoeff();
    }
  };

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const unsigned pool = std::min<unsigned>(hw, kSeeds);
  std::vector<std::thread> threads;
  for (unsigned i = 0; i + 1 < pool; ++i) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();

  double worst = 0.0;
  int entries = 0;
  for (int s = 0; s < kSeeds; ++s) {
    const auto& o = outcome[static_cast<std::size_t>(s)];
    crit.check(o.entries > 0, "seed " + std::to_string(s) + " checked no entries");
    crit.check(o.rel_err < 1e-4, "seed " + std::to_string(s) + " max relative error " +
                                     fmt(o.rel_err) + " >= 1e-4");
    crit.check(o.target_grad == 0.0, "seed " + std::to_string(s) +
                                         " leaked gradient into a saliency target");
    crit.check(o.model_grad > 0.0,
               "seed " + std::to_string(s) + " produced no embedding gradient");
    worst = std::max(worst, o.rel_err);
    entries += o.entries;
  }
  crit.detail = std::to_string(kSeeds) + " seeds, " + std::to_string(entries) +
                " entries, max rel err " + fmt(worst) + ", target grad 0";
  crit.finish();
}

// ---------------------------------------------------------------------------
// 2. Ten thousand randomized calls across the attention module, the
//    saliency module, and the decoder only ever produce valid probability
//    simplexes and finite losses.
// ---------------------------------------------------------------------------

TEST(Acceptance, C2DistributionInvariants) {
  Criterion crit("criterion 2", "randomized simplex and finiteness sweep");
  int calls = 0;
  int violations = 0;
  std::mt19937_64 rng(2024);

  // attention maps over random features, hidden states, and parameters
  {
    AttentionParams params;
    int a = 0, d = 0, n = 0;
    for (int i = 0; i < 3400; ++i) {
      if (i % 100 == 0) {
        a = std::uniform_int_distribution<int>(2, 8)(rng);
        d = std::uniform_int_distribution<int>(2, 9)(rng);
        n = std::uniform_int_distribution<int>(2, 8)(rng);
        params = AttentionParams::init(a, d, n, rng);
      }
      const int k = std::uniform_int_distribution<int>(1, 12)(rng);
      Mat V = test::random_mat(k, d, rng, 3.0);
      Vec h = test::random_mat(n, 1, rng, 3.0);
      Vec alpha = mlp_attention(V, h, params);
      ++calls;
      if (!is_simplex(alpha)) ++violations;
    }
  }

  // saliency maps from random activation/gradient pairs, including bursts
  // of all-negative gradients that force the degenerate fallback
  for (int i = 0; i < 3300; ++i) {
    const int d = std::uniform_int_distribution<int>(1, 6)(rng);
    const int k = std::uniform_int_distribution<int>(1, 12)(rng);
    Mat A = test::random_mat(d, k, rng, 2.0);
    Mat G = test::random_mat(d, k, rng, 2.0);
    if (i % 8 == 0) G = -G.cwiseAbs();
    SaliencyTarget t = gradcam_from(A, G);
    ++calls;
    if (!is_simplex(t.alpha)) ++violations;
    if (t.degenerate &&
        (t.alpha - Vec::Constant(k, 1.0 / k)).cwiseAbs().maxCoeff() != 0.0)
      ++violations;
    const double ce = alignment_loss(t.alpha, test::random_simplex(k, rng), 1e-8);
    if (!std::isfinite(ce) || ce < 0.0) ++violations;
  }

  // decoder steps (attention map and next-word distribution) plus periodic
  // full sequence losses
  {
    ModelConfig cfg;
    cfg.vocab_size = 6;
    cfg.feature_dim = 4;
    cfg.embed_dim = 4;
    cfg.hidden_dim = 5;
    cfg.attn_hidden_dim = 4;
    cfg.attn_width = 4;
    cfg.max_caption_tokens = 6;
    Captioner model(cfg, 1);
    int k = 4;
    for (int i = 0; i < 3300; ++i) {
      if (i % 50 == 0) {
        cfg.vocab_size = std::uniform_int_distribution<int>(5, 9)(rng);
        cfg.feature_dim = std::uniform_int_distribution<int>(3, 6)(rng);
        cfg.embed_dim = std::uniform_int_distribution<int>(3, 5)(rng);
        cfg.hidden_dim = std::uniform_int_distribution<int>(4, 7)(rng);
        cfg.attn_hidden_dim = std::uniform_int_distribution<int>(3, 6)(rng);
        cfg.attn_width = std::uniform_int_distribution<int>(3, 5)(rng);
        cfg.max_caption_tokens = 6;
        model = Captioner(cfg, 50 + static_cast<std::uint64_t>(i));
        k = std::uniform_int_distribution<int>(2, 8)(rng);
      }
      Mat V = test::random_mat(k, cfg.feature_dim, rng, 2.0);
      DecoderState s = model.initial_state();
      s.att_h = test::random_mat(cfg.attn_hidden_dim, 1, rng);
      s.att_c = test::random_mat(cfg.attn_hidden_dim, 1, rng);
      s.lang_h = test::random_mat(cfg.hidden_dim, 1, rng);
      s.lang_c = test::random_mat(cfg.hidden_dim, 1, rng);
      s.prev_token =
          std::uniform_int_distribution<int>(0, cfg.vocab_size - 1)(rng);
      auto res = model.step(V, s);
      ++calls;
      if (!is_simplex(res.alpha)) ++violations;
      if (!res.log_probs.allFinite()) ++violations;
      if (std::abs(res.log_probs.array().exp().sum() - 1.0) > 1e-9) ++violations;

      if (i % 10 == 0) {
        std::uniform_int_distribution<int> word(Vocabulary::kNumSpecials,
                                                cfg.vocab_size - 1);
        TokenSequence seq;
        seq.ids = {Vocabulary::kStart, word(rng), word(rng), Vocabulary::kEnd};
        StepTargets targets;
        targets[0] = test::random_simplex(k, rng);
        LossConfig loss;
        loss.lambda = 100.0;
        Tape tape;
        BoundParams bound(tape, model.parameters(), false);
        auto vars = sequence_loss_graph(tape, bound, model, tape.constant(V), seq,
                                        targets, loss);
        const double total = tape.value(vars.total)(0, 0);
        if (!std::isfinite(total)) ++violations;
        for (Var av : vars.alphas)
          if (!is_simplex(tape.value(av).col(0))) ++violations;
      }
    }
  }

  crit.check(calls == 10000, "expected 10000 calls, made " + std::to_string(calls));
  crit.check(violations == 0, std::to_string(violations) + " invariant violations");
  crit.detail = std::to_string(calls) + " calls, " + std::to_string(violations) +
                " violations";
  crit.finish();
}

// ---------------------------------------------------------------------------
// 3. Oracle equivalences: beam search vs exhaustive enumeration, the
//    saliency map vs its linear-head closed form, the LSTM step vs scalar
//    gate equations, and the metrics vs hand-worked examples.
// ---------------------------------------------------------------------------

TEST(Acceptance, C3OracleEquivalences) {
  Criterion crit("criterion 3", "oracle equivalences", 180.0);
  std::mt19937_64 rng(3030);

  // (a) full-width beam search returns the global argmax sequence
  int beam_mismatches = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int m = 5 + (trial % 2);
    const int len = 3 + ((trial / 2) % 2);
    ModelConfig cfg;
    cfg.vocab_size = m;
    cfg.feature_dim = 5;
    cfg.embed_dim = 4;
    cfg.hidden_dim = 6;
    cfg.attn_hidden_dim = 5;
    cfg.attn_width = 3;
    cfg.max_caption_tokens = len;
    Captioner model(cfg, 9000 + static_cast<std::uint64_t>(trial));
    Mat V = test::random_mat(4, cfg.feature_dim, rng, 2.0);

    bool found = false;
    double best_lp = 0.0;
    std::vector<int> best_tokens, scratch;
    enumerate_sequences(model, V, model.initial_state(), scratch, 0.0, len, found,
                        best_lp, best_tokens);
    ASSERT_TRUE(found);

    int width = 1;
    for (int i = 0; i < len; ++i) width *= m;
    auto beam = beam_search(model, V, width, len);
    if (beam.tokens != best_tokens || beam.log_prob != best_lp) ++beam_mismatches;
  }
  crit.check(beam_mismatches == 0,
             std::to_string(beam_mismatches) + " beam/enumeration mismatches");

  // (b) saliency vs the linear-head closed form. Integer activations, a
  // dyadic head, and a power-of-two grid keep every intermediate exactly
  // representable, so the comparison is bitwise.
  int closed_mismatches = 0;
  {
    const int d = 8, k = 16;
    std::uniform_int_distribution<int> small(-8, 8);
    for (int trial = 0; trial < 50; ++trial) {
      Mat A(d, k), G(d, k);
      Vec u(d);
      for (int r = 0; r < d; ++r) u(r) = small(rng);
      for (int c = 0; c < k; ++c)
        for (int r = 0; r < d; ++r) {
          A(r, c) = small(rng);
          G(r, c) = u(r) / 16.0;
        }
      SaliencyTarget got = gradcam_from(A, G, 0);

      Vec theta(d);
      for (int r = 0; r < d; ++r) {
        double s = 0.0;
        for (int c = 0; c < k; ++c) s += G(r, c);
        theta(r) = s / k;
      }
      Vec pre(k);
      for (int c = 0; c < k; ++c) {
        double s = 0.0;
        for (int r = 0; r < d; ++r) s += A(r, c) * theta(r);
        pre(c) = std::max(0.0, s);
      }
      const double mass = pre.sum();
      Vec expected =
          mass > 0.0 ? Vec(pre / mass) : Vec(Vec::Constant(k, 1.0 / k));
      if ((got.alpha - expected).cwiseAbs().maxCoeff() != 0.0) ++closed_mismatches;
      if (got.degenerate != (mass <= 0.0)) ++closed_mismatches;
    }
  }
  crit.check(closed_mismatches == 0,
             std::to_string(closed_mismatches) + " exact closed-form mismatches");

  // the same closed form through the real pooled-head encoder, where conv
  // arithmetic leaves only float-rounding noise
  {
    EncoderConfig cfg;
    cfg.input_size = 16;
    cfg.channels = {5, 7};
    cfg.num_categories = 4;
    cfg.frozen_blocks = 1;
    for (int trial = 0; trial < 10; ++trial) {
      ConvEncoder enc(cfg, 400 + static_cast<std::uint64_t>(trial));
      const Mat* head = nullptr;
      for (const auto& p : enc.parameters())
        if (p.name == "encoder.head.weight") head = p.mat;
      ASSERT_NE(head, nullptr);

      ImageRgb img;
      img.width = img.height = 16;
      img.pixels = test::random_mat(3, 256, rng).cwiseAbs();
      const int category = trial % cfg.num_categories;

      auto grid = enc.extract_features(img);
      Vec w = head->row(category).transpose();
      Vec pre = (grid.activations.transpose() * w).cwiseMax(0.0);
      auto got = gradcam(enc, img, category);
      if (pre.sum() > 0.0) {
        Vec expected = pre / pre.sum();
        crit.check((got.alpha - expected).cwiseAbs().maxCoeff() < 1e-12,
                   "encoder closed form diverged on trial " + std::to_string(trial));
      } else {
        crit.check(got.degenerate, "missing degenerate flag on trial " +
                                       std::to_string(trial));
      }
    }
  }

  // (c) LSTM step vs an independent scalar gate-equation reference
  double worst_lstm = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int in = std::uniform_int_distribution<int>(1, 7)(rng);
    const int n = std::uniform_int_distribution<int>(1, 8)(rng);
    LstmParams p = LstmParams::init(in, n, rng);
    Vec x = test::random_mat(in, 1, rng, 2.0);
    Vec h0 = test::random_mat(n, 1, rng, 2.0);
    Vec c0 = test::random_mat(n, 1, rng, 2.0);

    Tape tape;
    auto params = p.parameters("l");
    BoundParams bound(tape, params, false);
    LstmState prev{tape.constant(h0), tape.constant(c0)};
    LstmState out = lstm_step(tape, bound, p, tape.constant(x), prev);

    Vec h_ref, c_ref;
    scalar_lstm(p, x, h0, c0, h_ref, c_ref);
    worst_lstm = std::max(worst_lstm,
                          (tape.value(out.h).col(0) - h_ref).cwiseAbs().maxCoeff());
    worst_lstm = std::max(worst_lstm,
                          (tape.value(out.c).col(0) - c_ref).cwiseAbs().maxCoeff());
  }
  crit.check(worst_lstm < 1e-10,
             "LSTM scalar-reference deviation " + fmt(worst_lstm) + " >= 1e-10");

  // (d) metric scores vs hand-worked examples, to six decimals
  const double b1 =
      bleu_n({{"the", "cat", "sat"}}, {{{"the", "cat", "sat", "down"}}}, 1);
  crit.check(std::abs(b1 - 0.716531) < 1e-6,
             "BLEU-1 hand example got " + fmt(b1, 9));
  const double rl = rouge_l({{"a", "b", "c"}}, {{{"a", "c", "d"}}});
  crit.check(std::abs(rl - 0.666667) < 1e-6,
             "ROUGE-L hand example got " + fmt(rl, 9));

  crit.detail = "beam 100/100, closed form bitwise 50/50 + encoder 1e-12, LSTM " +
                fmt(worst_lstm) + ", metrics 6 decimals";
  crit.finish();
}

// ---------------------------------------------------------------------------
// 4. The alignment penalty is minimized exactly at the target map.
// ---------------------------------------------------------------------------

TEST(Acceptance, C4AlignmentLossMinimum) {
  Criterion crit("criterion 4", "alignment-loss minimum at the target");
  std::mt19937_64 rng(4040);
  const int k = 49;
  int comparisons = 0;
  int violations = 0;
  double worst_equality = 0.0;

  for (int t = 0; t < 100; ++t) {
    Vec target = test::random_simplex(k, rng);
    const double at_target = alignment_loss(target, target, 1e-8);
    for (int p = 0; p < 100; ++p) {
      Vec pred = test::random_simplex(k, rng);
      ++comparisons;
      if (alignment_loss(pred, target, 1e-8) < at_target) ++violations;
    }
    Vec copy = target;
    worst_equality =
        std::max(worst_equality, std::abs(alignment_loss(copy, target, 1e-8) - at_target));
  }

  crit.check(comparisons == 10000, "expected 10000 comparisons");
  crit.check(violations == 0,
             std::to_string(violations) + " predictions scored below the target");
  crit.check(worst_equality <= 1e-9,
             "loss at the target off by " + fmt(worst_equality));
  crit.detail = "10000 comparisons, 0 below CE(target,target), equality gap " +
                fmt(worst_equality);
  crit.finish();
}

// ---------------------------------------------------------------------------
// 5. Toy end-to-end ablation: supervising attention must not cost caption
//    quality and must move attention mass into the ground-truth shape
//    cells. The fine-tuned encoder's saliency maps must also land inside
//    those cells, which is what makes the targets worth imitating.
// ---------------------------------------------------------------------------

TEST(Acceptance, C5ToyAblationAndGrounding) {
  Criterion crit("criterion 5", "toy ablation, supervised vs unsupervised attention",
                 1200.0);
  const fs::path root = fs::temp_directory_path() / "capalign_acceptance_ablation";
  fs::remove_all(root);
  fs::create_directories(root);

  ToyConfig toy_cfg;  // 200 images, 7x7 cells of 8 px, matching the encoder grid
  write_toy_dataset(generate_toy_dataset(toy_cfg, 301), (root / "train").string());
  ToyConfig test_cfg = toy_cfg;
  test_cfg.num_images = 50;
  write_toy_dataset(generate_toy_dataset(test_cfg, 302), (root / "test").string());

  RunConfig base;
  base.epochs = 40;
  base.seed = 9;
  base.dataset_json = (root / "train" / "dataset.json").string();
  base.image_dir = (root / "train" / "images").string();
  base.mapping_path = (root / "train" / "mapping.tsv").string();

  RunConfig supervised = base;
  supervised.lambda = 100.0;
  supervised.output_dir = (root / "lam100").string();
  RunResult run_supervised = run_training(supervised);

  // the two runs share stage A byte for byte, so the ablation differs in
  // nothing but the alignment term
  RunConfig ablated = base;
  ablated.lambda = 0.0;
  ablated.output_dir = (root / "lam0").string();
  fs::create_directories(ablated.output_dir);
  fs::copy_file(fs::path(supervised.output_dir) / "encoder.ckpt",
                fs::path(ablated.output_dir) / "encoder.ckpt");
  fs::copy_file(fs::path(supervised.output_dir) / "targets.ckpt",
                fs::path(ablated.output_dir) / "targets.ckpt");
  RunResult run_ablated = run_training(ablated);

  TrainedBundle sup = load_bundle(run_supervised.final_checkpoint);
  TrainedBundle abl = load_bundle(run_ablated.final_checkpoint);

  Dataset test_set = load_coco_format((root / "test" / "dataset.json").string(),
                                      (root / "test" / "images").string());
  EvalReport rep_sup = evaluate(sup.encoder, sup.model, sup.vocab, test_set, 3);
  EvalReport rep_abl = evaluate(abl.encoder, abl.model, abl.vocab, test_set, 3);

  MaskTable test_masks = load_masks((root / "test" / "masks.json").string());
  MaskMass mass_sup = attention_mask_mass(sup, test_set, test_masks, 3);
  MaskMass mass_abl = attention_mask_mass(abl, test_set, test_masks, 3);

  crit.check(mass_sup.events > 0, "supervised run decoded no maskable visual words");
  crit.check(mass_abl.events > 0, "ablated run decoded no maskable visual words");
  crit.check(rep_sup.bleu[3] >= rep_abl.bleu[3] - 0.02,
             "supervised BLEU-4 " + fmt(rep_sup.bleu[3]) + " fell more than 0.02 below " +
                 fmt(rep_abl.bleu[3]));
  crit.check(mass_sup.mean - mass_abl.mean >= 0.10,
             "mask-mass gap " + fmt(mass_sup.mean - mass_abl.mean) + " < 0.10");
  crit.detail = "BLEU-4 " + fmt(rep_sup.bleu[3]) + " vs " + fmt(rep_abl.bleu[3]) +
                "; mask mass " + fmt(mass_sup.mean) + " vs " + fmt(mass_abl.mean);
  crit.finish();

  // grounding of the saliency targets themselves, on the training images
  Criterion grounding("grounding", "saliency argmax inside the shape mask");
  Dataset train_set = load_coco_format((root / "train" / "dataset.json").string(),
                                       (root / "train" / "images").string());
  MaskTable train_masks = load_masks((root / "train" / "masks.json").string());
  std::map<long long, const Sample*> by_id;
  for (const auto& s : train_set.samples) by_id[s.image_id] = &s;
  int hits = 0, pairs = 0;
  for (const auto& [image_id, categories] : train_masks) {
    auto sample = by_id.find(image_id);
    ASSERT_NE(sample, by_id.end());
    for (const auto& [category, cells] : categories) {
      SaliencyTarget t = gradcam(sup.encoder, sample->second->image, category);
      int arg = 0;
      t.alpha.maxCoeff(&arg);
      ++pairs;
      if (std::find(cells.begin(), cells.end(), arg) != cells.end()) ++hits;
    }
  }
  const double rate = pairs > 0 ? static_cast<double>(hits) / pairs : 0.0;
  grounding.check(pairs > 0, "no (image, category) pairs to ground");
  grounding.check(rate >= 0.8, "argmax-in-mask rate " + fmt(rate) + " < 0.8");
  grounding.detail = std::to_string(hits) + "/" + std::to_string(pairs) +
                     " pairs (" + fmt(rate) + ")";
  grounding.finish();
}

// ---------------------------------------------------------------------------
// 6. The two-phase classifier fine-tune separates the toy categories and
//    never touches the frozen blocks.
// ---------------------------------------------------------------------------

TEST(Acceptance, C6ClassifierFinetune) {
  Criterion crit("criterion 6", "multi-label fine-tune accuracy and frozen blocks");

  ToyConfig toy_cfg;
  toy_cfg.num_images = 100;
  toy_cfg.grid = 4;
  toy_cfg.cell_pixels = 8;
  toy_cfg.num_categories = 3;
  toy_cfg.max_shapes = 2;
  auto toy = generate_toy_dataset(toy_cfg, 401);
  auto vocab = Vocabulary::build(corpus_tokens(toy.dataset), 0);
  encode_dataset(toy.dataset, vocab, toy.mapping);

  EncoderConfig cfg;
  cfg.input_size = toy_cfg.image_size();
  cfg.channels = {8, 16, 32};
  cfg.num_categories = 3;
  cfg.frozen_blocks = 1;
  ConvEncoder enc(cfg, 11);

  auto params = enc.parameters();
  std::vector<std::pair<std::string, Mat>> frozen_before;
  for (const auto& p : params)
    if (p.name.find("block0") != std::string::npos)
      frozen_before.emplace_back(p.name, *p.mat);
  ASSERT_FALSE(frozen_before.empty());

  FinetuneConfig ft;
  ft.head_epochs = 60;
  ft.full_epochs = 80;
  ft.head_lr = 3e-3;
  ft.full_lr = 5e-4;
  ft.batch_size = 8;
  ft.seed = 5;
  auto trace = finetune_multilabel(enc, toy.dataset, ft);
  crit.check(trace.head_loss.size() == 60u && trace.full_loss.size() == 80u,
             "unexpected phase lengths");

  const double acc = macro_accuracy(enc, toy.dataset);
  crit.check(acc >= 0.99, "macro accuracy " + fmt(acc) + " < 0.99");

  int disturbed = 0;
  std::size_t idx = 0;
  for (const auto& p : params)
    if (p.name.find("block0") != std::string::npos) {
      if ((*p.mat - frozen_before[idx].second).cwiseAbs().maxCoeff() != 0.0)
        ++disturbed;
      ++idx;
    }
  crit.check(disturbed == 0,
             std::to_string(disturbed) + " frozen parameter blocks changed");
  crit.detail = "macro accuracy " + fmt(acc, 4) + ", frozen blocks bitwise intact";
  crit.finish();
}

// ---------------------------------------------------------------------------
// 7. Fixed seeds make training bitwise reproducible, checkpoints survive a
//    save/load/save cycle byte for byte, and evaluation reports are
//    identical on identical inputs.
// ---------------------------------------------------------------------------

TEST(Acceptance, C7DeterminismAndPersistence) {
  Criterion crit("criterion 7", "determinism and persistence");
  const fs::path root = fs::temp_directory_path() / "capalign_acceptance_determinism";
  fs::remove_all(root);

  ToyConfig toy_cfg;
  toy_cfg.num_images = 6;
  toy_cfg.grid = 4;
  toy_cfg.cell_pixels = 4;
  toy_cfg.num_categories = 3;
  toy_cfg.max_shapes = 2;
  write_toy_dataset(generate_toy_dataset(toy_cfg, 97), (root / "data").string());

  RunConfig config;
  config.input_size = toy_cfg.image_size();
  config.channels = {4, 6};
  config.frozen_blocks = 1;
  config.embed_dim = 6;
  config.hidden_dim = 8;
  config.attn_hidden_dim = 6;
  config.attn_width = 4;
  config.max_caption_tokens = 8;
  config.head_epochs = 2;
  config.full_epochs = 1;
  config.epochs = 3;
  config.batch_size = 4;
  config.sampling_decay_epochs = 4;
  config.seed = 11;
  config.dataset_json = (root / "data" / "dataset.json").string();
  config.image_dir = (root / "data" / "images").string();
  config.mapping_path = (root / "data" / "mapping.tsv").string();

  RunConfig first = config;
  first.output_dir = (root / "r1").string();
  RunConfig second = config;
  second.output_dir = (root / "r2").string();
  RunResult r1 = run_training(first);
  RunResult r2 = run_training(second);

  // bitwise-identical training: every stored array matches across runs
  Checkpoint c1 = load_checkpoint(r1.final_checkpoint);
  Checkpoint c2 = load_checkpoint(r2.final_checkpoint);
  crit.check(c1.arrays.size() == c2.arrays.size(), "array counts differ");
  int array_diffs = 0;
  for (const auto& [name, value] : c1.arrays) {
    if (!c2.has(name) || (value - c2.get(name)).cwiseAbs().maxCoeff() != 0.0)
      ++array_diffs;
  }
  crit.check(array_diffs == 0,
             std::to_string(array_diffs) + " arrays differ between identical runs");
  crit.check(file_bytes((fs::path(first.output_dir) / "caption_loss.csv").string()) ==
                 file_bytes((fs::path(second.output_dir) / "caption_loss.csv").string()),
             "caption loss traces differ");
  crit.check(file_bytes((fs::path(first.output_dir) / "encoder.ckpt").string()) ==
                 file_bytes((fs::path(second.output_dir) / "encoder.ckpt").string()),
             "encoder checkpoints differ");
  crit.check(file_bytes((fs::path(first.output_dir) / "targets.ckpt").string()) ==
                 file_bytes((fs::path(second.output_dir) / "targets.ckpt").string()),
             "saliency target caches differ");

  // save/load/save is byte-idempotent
  const std::string resaved = (root / "resaved.ckpt").string();
  save_checkpoint(resaved, c1);
  crit.check(file_bytes(r1.final_checkpoint) == file_bytes(resaved),
             "save/load/save changed the checkpoint bytes");

  // identical evaluation reports, within a bundle and across the two runs
  Dataset data = load_coco_format(config.dataset_json, config.image_dir);
  TrainedBundle b1 = load_bundle(r1.final_checkpoint);
  TrainedBundle b2 = load_bundle(r2.final_checkpoint);
  const std::string rep1a = evaluate(b1.encoder, b1.model, b1.vocab, data, 2).to_json().dump();
  const std::string rep1b = evaluate(b1.encoder, b1.model, b1.vocab, data, 2).to_json().dump();
  const std::string rep2 = evaluate(b2.encoder, b2.model, b2.vocab, data, 2).to_json().dump();
  crit.check(rep1a == rep1b, "repeated evaluation changed the report");
  crit.check(rep1a == rep2, "evaluation differs across identical runs");

  crit.detail = "two fresh runs bitwise equal; checkpoint round trip byte-stable";
  crit.finish();
  fs::remove_all(root);
}

// ---------------------------------------------------------------------------
// 8. Overfit sanity: the full pipeline drives the combined objective far
//    enough on ten images that greedy decoding reproduces the training
//    captions almost verbatim.
// ---------------------------------------------------------------------------

TEST(Acceptance, C8OverfitSanity) {
  Criterion crit("criterion 8", "10-image overfit to BLEU-4 >= 0.9", 600.0);

  ToyConfig toy_cfg;
  toy_cfg.num_images = 10;
  toy_cfg.min_shapes = 2;  // guarantees 4-gram statistics in every caption
  auto toy = generate_toy_dataset(toy_cfg, 501);
  auto vocab = Vocabulary::build(corpus_tokens(toy.dataset), 0);
  encode_dataset(toy.dataset, vocab, toy.mapping);

  EncoderConfig ecfg;
  ecfg.input_size = toy_cfg.image_size();
  ecfg.channels = {8, 16, 32};
  ecfg.num_categories = toy.mapping.category_count();
  ecfg.frozen_blocks = 2;
  ConvEncoder enc(ecfg, 21);
  FinetuneConfig ft;
  ft.head_epochs = 10;
  ft.full_epochs = 5;
  ft.head_lr = 1e-3;
  ft.batch_size = 4;
  ft.seed = 6;
  finetune_multilabel(enc, toy.dataset, ft);
  SaliencyTable targets = precompute_targets(toy.dataset, enc, toy.mapping);

  ModelConfig mcfg;
  mcfg.vocab_size = vocab.size();
  mcfg.feature_dim = ecfg.feature_dim();
  mcfg.embed_dim = 24;
  mcfg.hidden_dim = 48;
  mcfg.attn_hidden_dim = 32;
  mcfg.attn_width = 24;
  mcfg.max_caption_tokens = 16;
  Captioner model(mcfg, 31);
  Adam opt(5e-4, 5.0);

  std::vector<Mat> features;
  features.reserve(toy.dataset.samples.size());
  for (const auto& s : toy.dataset.samples)
    features.push_back(enc.extract_features(s.image).V);

  auto greedy_bleu4 = [&]() {
    std::vector<TokenList> candidates;
    std::vector<std::vector<TokenList>> references;
    for (std::size_t i = 0; i < toy.dataset.samples.size(); ++i) {
      auto decoded = greedy_decode(model, features[i], mcfg.max_caption_tokens);
      candidates.push_back(vocab.decode(decoded.tokens));
      references.push_back({toy.dataset.samples[i].captions[0].tokens});
    }
    return bleu_n(candidates, references, 4);
  };

  const int kMaxEpochs = 200;
  const int kChunk = 25;
  double bleu4 = 0.0;
  int epochs_run = 0;
  while (epochs_run < kMaxEpochs) {
    CaptionTrainConfig tc;
    tc.loss.lambda = 100.0;
    tc.batch_size = 10;
    tc.seed = 13;
    tc.start_epoch = epochs_run;
    tc.epochs = epochs_run + kChunk;
    train_captioner(enc, model, toy.dataset, targets, tc, opt);
    epochs_run += kChunk;
    bleu4 = greedy_bleu4();
    if (bleu4 >= 0.9) break;
  }

  crit.check(bleu4 >= 0.9, "greedy BLEU-4 " + fmt(bleu4) + " after " +
                               std::to_string(epochs_run) + " epochs");
  crit.detail = "greedy BLEU-4 " + fmt(bleu4) + " after " +
                std::to_string(epochs_run) + " epochs";
  crit.finish();
}

}  // namespace
}  // namespace capalign
