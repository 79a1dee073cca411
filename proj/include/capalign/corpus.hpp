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
#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "capalign/common.hpp"

namespace capalign {

// Lowercase, strip leading/trailing punctuation per token, split on
// whitespace. Internal hyphens survive ("horse-drawn" stays one token).
inline std::vector<std::string> tokenize(const std::string& caption) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    std::size_t b = 0, e = cur.size();
    while (b < e && std::ispunct(static_cast<unsigned char>(cur[b]))) ++b;
    while (e > b && std::ispunct(static_cast<unsigned char>(cur[e - 1]))) --e;
    if (e > b) tokens.push_back(cur.substr(b, e - b));
    cur.clear();
  };
  for (char ch : caption) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      flush();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  flush();
  return tokens;
}

// Token ids for one caption. Training targets carry the start marker up
// front and the end marker last; content tokens sit in between.
struct TokenSequence {
  std::vector<int> ids;

  int length() const { return static_cast<int>(ids.size()); }
  // number of steps the decoder is trained on: content tokens plus the end
  // marker (everything after the start marker)
  int steps() const { return length() - 1; }
};

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnknown = 3;
  static constexpr int kNumSpecials = 4;

  // Words with corpus frequency strictly greater than min_count are kept.
  // Ids: specials 0..3, then words by descending frequency, ties broken
  // lexicographically, so identical corpora yield identical ids.
  static Vocabulary build(const std::vector<std::vector<std::string>>& corpus,
                          int min_count) {
    require(!corpus.empty(), "empty corpus");
    std::unordered_map<std::string, long long> freq;
    for (const auto& caption : corpus)
      for (const auto& tok : caption) ++freq[tok];
    std::vector<std::pair<std::string, long long>> kept;
    for (const auto& [word, n] : freq)
      if (n > min_count) kept.emplace_back(word, n);
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocabulary v;
    for (const auto& [word, n] : kept) {
      (void)n;
      v.word_to_index_.emplace(word, static_cast<int>(v.index_to_word_.size()));
      v.index_to_word_.push_back(word);
    }
    return v;
  }

  static Vocabulary from_words(const std::vector<std::string>& words_in_id_order) {
    Vocabulary v;
    for (const auto& w : words_in_id_order) {
      require(w.rfind('<', 0) != 0, "from_words: special tokens are implicit");
      v.word_to_index_.emplace(w, static_cast<int>(v.index_to_word_.size()));
      v.index_to_word_.push_back(w);
    }
    return v;
  }

  int size() const { return static_cast<int>(index_to_word_.size()); }

  bool contains(const std::string& word) const {
    return word_to_index_.count(word) > 0;
  }

  // Unknown id for out-of-vocabulary words.
  int id(const std::string& word) const {
    auto it = word_to_index_.find(word);
    return it == word_to_index_.end() ? kUnknown : it->second;
  }

  const std::string& word(int id) const {
    require(id >= 0 && id < size(), "word id out of range");
    return index_to_word_[static_cast<std::size_t>(id)];
  }

  bool is_special(int id) const { return id >= 0 && id < kNumSpecials; }

  // <start> w_1 .. w_T <end>; content truncated to max_content tokens.
  TokenSequence encode(const std::vector<std::string>& tokens, int max_content) const {
    TokenSequence seq;
    seq.ids.push_back(kStart);
    int n = 0;
    for (const auto& tok : tokens) {
      if (n == max_content) break;
      seq.ids.push_back(id(tok));
      ++n;
    }
    seq.ids.push_back(kEnd);
    return seq;
  }

  // Content words only; specials are dropped.
  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> words;
    for (int i : ids)
      if (!is_special(i)) words.push_back(word(i));
    return words;
  }

  // Words in id order, specials excluded; enough to rebuild the instance.
  std::vector<std::string> words_in_order() const {
    return {index_to_word_.begin() + kNumSpecials, index_to_word_.end()};
  }

 private:
  Vocabulary() {
    index_to_word_ = {"<pad>", "<start>", "<end>", "<unk>"};
    for (int i = 0; i < kNumSpecials; ++i) word_to_index_.emplace(index_to_word_[i], i);
  }

  std::unordered_map<std::string, int> word_to_index_;
  std::vector<std::string> index_to_word_;
};

// Visual word -> object category dictionary. Category ids are assigned by
// first appearance in the source, so a given mapping file always produces
// the same ids.
class CategoryMapping {
 public:
  CategoryMapping() = default;

  static CategoryMapping from_pairs(
      const std::vector<std::pair<std::string, std::string>>& word_category_pairs) {
    CategoryMapping m;
    for (const auto& [word, cat] : word_category_pairs) m.add(word, cat);
    return m;
  }

  // One "word<TAB>category_name" per line; blank lines and '#' comments are
  // skipped. A word mapped twice to different categories is a format error.
  static CategoryMapping load(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "cannot open mapping file: " + path);
    CategoryMapping m;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty() || line[0] == '#') continue;
      auto tab = line.find('\t');
      require(tab != std::string::npos,
              "mapping file " + path + " line " + std::to_string(lineno) +
                  ": expected word<TAB>category");
      std::string word = line.substr(0, tab);
      std::string cat = line.substr(tab + 1);
      require(!word.empty() && !cat.empty(),
              "mapping file " + path + " line " + std::to_string(lineno) + ": empty field");
      auto it = m.word_to_category_.find(word);
      if (it != m.word_to_category_.end()) {
        require(category_equal(m, it->second, cat),
                "mapping file " + path + " line " + std::to_string(lineno) +
                    ": word '" + word + "' mapped to two categories");
        continue;
      }
      m.add(word, cat);
    }
    return m;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    require(out.good(), "cannot write mapping file: " + path);
    // stable order: by category id, then word
    std::map<std::string, int> sorted;
    for (const auto& [w, c] : word_to_category_) sorted.emplace(w, c);
    for (int c = 0; c < category_count(); ++c)
      for (const auto& [w, wc] : sorted)
        if (wc == c) out << w << '\t' << category_names_[c] << '\n';
  }

  int category_count() const { return static_cast<int>(category_names_.size()); }

  bool has_word(const std::string& word) const { return word_to_category_.count(word) > 0; }

  // -1 when the word is not a visual word.
  int category(const std::string& word) const {
    auto it = word_to_category_.find(word);
    return it == word_to_category_.end() ? -1 : it->second;
  }

  const std::string& category_name(int c) const {
    require(c >= 0 && c < category_count(), "category id out of range");
    return category_names_[static_cast<std::size_t>(c)];
  }

  const std::vector<std::string>& category_names() const { return category_names_; }

  std::vector<std::pair<std::string, std::string>> pairs_in_order() const {
    std::map<std::string, int> sorted(word_to_category_.begin(), word_to_category_.end());
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [w, c] : sorted) out.emplace_back(w, category_names_[c]);
    return out;
  }

 private:
  static bool category_equal(const CategoryMapping& m, int id, const std::string& name) {
    return m.category_names_[static_cast<std::size_t>(id)] == name;
  }

  void add(const std::string& word, const std::string& cat) {
    int id;
    auto it = name_to_id_.find(cat);
    if (it == name_to_id_.end()) {
      id = static_cast<int>(category_names_.size());
      category_names_.push_back(cat);
      name_to_id_.emplace(cat, id);
    } else {
      id = it->second;
    }
    auto ins = word_to_category_.emplace(word, id);
    require(ins.second || ins.first->second == id,
            "word '" + word + "' mapped to two categories");
  }

  std::unordered_map<std::string, int> word_to_category_;
  std::unordered_map<std::string, int> name_to_id_;
  std::vector<std::string> category_names_;
};

// (content-token position, category id) for every token the mapping knows.
// The position is the 0-based index among content tokens, which is also the
// decoder step whose prediction target is that token.
inline std::vector<std::pair<int, int>> extract_visual_words(
    const std::vector<std::string>& tokens, const CategoryMapping& mapping) {
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int c = mapping.category(tokens[i]);
    if (c >= 0) out.emplace_back(static_cast<int>(i), c);
  }
  return out;
}

// Union over all captions: bit c set iff any caption mentions a word mapped
// to category c.
inline Vec build_multilabel_target(const std::vector<std::vector<std::string>>& captions,
                                   const CategoryMapping& mapping, int num_categories) {
  require(num_categories == mapping.category_count(),
          "category count mismatch with mapping");
  Vec target = Vec::Zero(num_categories);
  for (const auto& caption : captions)
    for (const auto& tok : caption) {
      const int c = mapping.category(tok);
      if (c >= 0) target(c) = 1.0;
    }
  return target;
}

}  // namespace capalign
