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
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capalign/corpus.hpp"
#include "capalign/dataset.hpp"
#include "capalign/decoder.hpp"
#include "capalign/encoder.hpp"

namespace capalign {

// Caption evaluation over whitespace token lists. Candidates and references
// are parallel: references[i] holds the reference captions of candidate i.
// All counting is on exact surface tokens; no stemming or synonym matching
// is applied anywhere.
using TokenList = std::vector<std::string>;

namespace metric_detail {

inline void check_corpus(const std::vector<TokenList>& candidates,
                         const std::vector<std::vector<TokenList>>& references) {
  require(!candidates.empty(), "metric corpus is empty");
  require(candidates.size() == references.size(),
          "candidate/reference corpus size mismatch");
  for (const auto& refs : references)
    require(!refs.empty(), "every candidate needs at least one reference");
}

// N-gram multiset of one token list, keyed by the space-joined n-gram
// (tokens never contain whitespace).
inline std::map<std::string, int> ngram_counts(const TokenList& tokens, int n) {
  std::map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) key += ' ' + tokens[i + static_cast<std::size_t>(j)];
    ++counts[key];
  }
  return counts;
}

// Classic two-row dynamic program for the longest common subsequence length.
inline int lcs_length(const TokenList& a, const TokenList& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace metric_detail

// Corpus-level BLEU-n: geometric mean of clipped i-gram precisions for
// i <= n over pooled corpus counts, times the brevity penalty
// exp(min(0, 1 - r/c)). r sums each candidate's closest reference length
// (ties resolved toward the shorter reference); there is no smoothing, so
// a zero precision at any order zeroes the score.
inline double bleu_n(const std::vector<TokenList>& candidates,
                     const std::vector<std::vector<TokenList>>& references, int n) {
  metric_detail::check_corpus(candidates, references);
  require(n >= 1 && n <= 4, "bleu_n: order must lie in 1..4");

  long long c_total = 0, r_total = 0;
  std::array<long long, 4> matched{}, possible{};
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const TokenList& cand = candidates[i];
    c_total += static_cast<long long>(cand.size());
    long long best_len = 0;
    long long best_diff = -1;
    for (const TokenList& ref : references[i]) {
      const long long len = static_cast<long long>(ref.size());
      const long long diff = std::llabs(len - static_cast<long long>(cand.size()));
      if (best_diff < 0 || diff < best_diff || (diff == best_diff && len < best_len)) {
        best_diff = diff;
        best_len = len;
      }
    }
    r_total += best_len;

    for (int order = 1; order <= n; ++order) {
      auto cand_counts = metric_detail::ngram_counts(cand, order);
      std::map<std::string, int> ref_max;
      for (const TokenList& ref : references[i])
        for (const auto& [gram, count] : metric_detail::ngram_counts(ref, order))
          ref_max[gram] = std::max(ref_max[gram], count);
      for (const auto& [gram, count] : cand_counts) {
        auto it = ref_max.find(gram);
        if (it != ref_max.end())
          matched[static_cast<std::size_t>(order - 1)] += std::min(count, it->second);
      }
      possible[static_cast<std::size_t>(order - 1)] +=
          std::max<long long>(0, static_cast<long long>(cand.size()) - order + 1);
    }
  }

  if (c_total == 0) return 0.0;
  double log_precisions = 0.0;
  for (int order = 1; order <= n; ++order) {
    const long long m = matched[static_cast<std::size_t>(order - 1)];
    const long long p = possible[static_cast<std::size_t>(order - 1)];
    if (m == 0 || p == 0) return 0.0;
    log_precisions += std::log(static_cast<double>(m) / static_cast<double>(p));
  }
  const double bp =
      std::exp(std::min(0.0, 1.0 - static_cast<double>(r_total) / static_cast<double>(c_total)));
  return bp * std::exp(log_precisions / n);
}

// Per-image ROUGE-L: max over references of the F-measure of LCS precision
// and recall with beta weighting recall (beta = 1.2).
inline std::vector<double> rouge_l_scores(
    const std::vector<TokenList>& candidates,
    const std::vector<std::vector<TokenList>>& references, double beta = 1.2) {
  metric_detail::check_corpus(candidates, references);
  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    double best = 0.0;
    for (const TokenList& ref : references[i]) {
      const int lcs = metric_detail::lcs_length(candidates[i], ref);
      if (lcs == 0 || candidates[i].empty() || ref.empty()) continue;
      const double p = static_cast<double>(lcs) / static_cast<double>(candidates[i].size());
      const double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
      const double f = (1.0 + beta * beta) * p * r / (r + beta * beta * p);
      best = std::max(best, f);
    }
    scores.push_back(best);
  }
  return scores;
}

inline double rouge_l(const std::vector<TokenList>& candidates,
                      const std::vector<std::vector<TokenList>>& references,
                      double beta = 1.2) {
  auto scores = rouge_l_scores(candidates, references, beta);
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

// Per-image consensus score: tf-idf weighted n-gram similarity (n = 1..4)
// between the candidate and each reference, count-clipped on the candidate
// side, with a Gaussian penalty on the length difference (sigma = 6).
// Document frequencies come from the reference corpus, so at least two
// images are required. The per-image value averages the four orders, then
// the references, and is scaled by 10.
inline std::vector<double> cider_scores(
    const std::vector<TokenList>& candidates,
    const std::vector<std::vector<TokenList>>& references, double sigma = 6.0) {
  metric_detail::check_corpus(candidates, references);
  require(candidates.size() >= 2,
          "cider: degenerate idf (document frequencies need at least two images)");
  constexpr int kMaxOrder = 4;
  const double log_num_images = std::log(static_cast<double>(candidates.size()));

  std::array<std::map<std::string, int>, kMaxOrder> doc_freq;
  for (const auto& refs : references) {
    for (int order = 1; order <= kMaxOrder; ++order) {
      std::set<std::string> seen;
      for (const TokenList& ref : refs)
        for (const auto& [gram, count] : metric_detail::ngram_counts(ref, order))
          seen.insert(gram);
      for (const auto& gram : seen) ++doc_freq[static_cast<std::size_t>(order - 1)][gram];
    }
  }

  struct TfIdf {
    std::array<std::map<std::string, double>, kMaxOrder> vec;
    std::array<double, kMaxOrder> norm{};
    double length = 0.0;
  };
  auto vectorize = [&](const TokenList& tokens) {
    TfIdf out;
    out.length = static_cast<double>(tokens.size());
    for (int order = 1; order <= kMaxOrder; ++order) {
      auto& slot = out.vec[static_cast<std::size_t>(order - 1)];
      double sq = 0.0;
      for (const auto& [gram, count] : metric_detail::ngram_counts(tokens, order)) {
        const auto& df_map = doc_freq[static_cast<std::size_t>(order - 1)];
        auto it = df_map.find(gram);
        const double df = it == df_map.end() ? 0.0 : static_cast<double>(it->second);
        const double idf = log_num_images - std::log(std::max(1.0, df));
        const double w = static_cast<double>(count) * idf;
        slot[gram] = w;
        sq += w * w;
      }
      out.norm[static_cast<std::size_t>(order - 1)] = std::sqrt(sq);
    }
    return out;
  };

  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    TfIdf cand = vectorize(candidates[i]);
    std::array<double, kMaxOrder> acc{};
    for (const TokenList& ref_tokens : references[i]) {
      TfIdf ref = vectorize(ref_tokens);
      const double delta = cand.length - ref.length;
      const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
      for (int order = 0; order < kMaxOrder; ++order) {
        double dot = 0.0;
        for (const auto& [gram, w] : cand.vec[static_cast<std::size_t>(order)]) {
          auto it = ref.vec[static_cast<std::size_t>(order)].find(gram);
          if (it != ref.vec[static_cast<std::size_t>(order)].end())
            dot += std::min(w, it->second) * it->second;
        }
        const double denom =
            cand.norm[static_cast<std::size_t>(order)] * ref.norm[static_cast<std::size_t>(order)];
        acc[static_cast<std::size_t>(order)] += denom > 0.0 ? penalty * dot / denom : 0.0;
      }
    }
    double mean_over_orders = 0.0;
    for (int order = 0; order < kMaxOrder; ++order)
      mean_over_orders += acc[static_cast<std::size_t>(order)];
    mean_over_orders /= kMaxOrder;
    scores.push_back(10.0 * mean_over_orders / static_cast<double>(references[i].size()));
  }
  return scores;
}

inline double cider(const std::vector<TokenList>& candidates,
                    const std::vector<std::vector<TokenList>>& references,
                    double sigma = 6.0) {
  auto scores = cider_scores(candidates, references, sigma);
  double sum = 0.0;
  for (double s : scores) sum += s;
  return sum / static_cast<double>(scores.size());
}

struct ImageEval {
  long long image_id = 0;
  std::string caption;
  double log_prob = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  bool truncated = false;
};

struct EvalReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  std::vector<ImageEval> images;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json doc;
    doc["bleu_1"] = bleu[0];
    doc["bleu_2"] = bleu[1];
    doc["bleu_3"] = bleu[2];
    doc["bleu_4"] = bleu[3];
    doc["meteor"] = nullptr;
    doc["cider"] = cider;
    doc["spice"] = nullptr;
    doc["rouge_l"] = rouge_l;
    auto rows = nlohmann::ordered_json::array();
    for (const auto& im : images) {
      nlohmann::ordered_json row;
      row["image_id"] = im.image_id;
      row["caption"] = im.caption;
      row["log_prob"] = im.log_prob;
      row["rouge_l"] = im.rouge_l;
      row["cider"] = im.cider;
      row["truncated"] = im.truncated;
      rows.push_back(row);
    }
    doc["images"] = rows;
    return doc;
  }

  std::string to_table() const {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "BLEU-1    BLEU-2    BLEU-3    BLEU-4    METEOR    CIDEr     SPICE     ROUGE-L\n";
    for (double b : bleu) os << std::setw(6) << b << "    ";
    os << "   n/a    " << std::setw(6) << cider << "       n/a    " << std::setw(6)
       << rouge_l << "\n";
    return os.str();
  }
};

// Decodes every image with beam search and scores the captions against all
// of the image's references. CIDEr's document statistics need at least two
// images, so a single-image dataset fails rather than reporting a bogus
// score.
inline EvalReport evaluate(const ConvEncoder& encoder, const Captioner& captioner,
                           const Vocabulary& vocab, const Dataset& dataset,
                           int beam_size = 3) {
  require(!dataset.samples.empty(), "evaluate: empty dataset");
  require(beam_size >= 1, "evaluate: beam size must be at least 1");
  std::vector<TokenList> candidates;
  std::vector<std::vector<TokenList>> references;
  EvalReport report;

  for (const auto& s : dataset.samples) {
    try {
      FeatureGrid grid = encoder.extract_features(s.image);
      DecodeResult decoded =
          beam_search(captioner, grid.V, beam_size, captioner.config().max_caption_tokens);
      TokenList words = vocab.decode(decoded.tokens);

      ImageEval im;
      im.image_id = s.image_id;
      im.log_prob = decoded.log_prob;
      im.truncated = decoded.truncated;
      std::string text;
      for (const auto& w : words) {
        if (!text.empty()) text += ' ';
        text += w;
      }
      im.caption = text;
      report.images.push_back(im);

      candidates.push_back(words);
      std::vector<TokenList> refs;
      for (const auto& cap : s.captions) refs.push_back(cap.tokens);
      require(!refs.empty(), "sample has no reference captions");
      references.push_back(std::move(refs));
    } catch (const std::exception& e) {
      throw std::runtime_error("evaluate: image " + std::to_string(s.image_id) + ": " +
                               e.what());
    }
  }

  for (int n = 1; n <= 4; ++n)
    report.bleu[static_cast<std::size_t>(n - 1)] = bleu_n(candidates, references, n);
  auto rouge_per_image = rouge_l_scores(candidates, references);
  auto cider_per_image = cider_scores(candidates, references);
  double rouge_sum = 0.0, cider_sum = 0.0;
  for (std::size_t i = 0; i < report.images.size(); ++i) {
    report.images[i].rouge_l = rouge_per_image[i];
    report.images[i].cider = cider_per_image[i];
    rouge_sum += rouge_per_image[i];
    cider_sum += cider_per_image[i];
  }
  report.rouge_l = rouge_sum / static_cast<double>(report.images.size());
  report.cider = cider_sum / static_cast<double>(report.images.size());
  return report;
}

}  // namespace capalign
