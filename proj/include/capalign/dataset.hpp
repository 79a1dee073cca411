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
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "capalign/corpus.hpp"
#include "capalign/image_io.hpp"

namespace capalign {

struct CaptionEntry {
  std::string raw;
  std::vector<std::string> tokens;
  // filled by encode_dataset:
  TokenSequence sequence;
  // (decoder timestep, category id); the timestep indexes the kept content
  // token the decoder is asked to produce at that step
  std::vector<std::pair<int, int>> visual_words;
};

struct Sample {
  long long image_id = -1;
  std::string file_name;
  ImageRgb image;
  std::vector<CaptionEntry> captions;
  Vec multilabel_target;  // filled by encode_dataset

  bool has_positive_label() const {
    return multilabel_target.size() > 0 && multilabel_target.maxCoeff() > 0.0;
  }
};

struct LoadReport {
  std::vector<std::string> errors;            // skipped samples, with reasons
  std::vector<long long> all_zero_target_ids;  // kept, but no classifier signal

  std::string to_string() const {
    std::ostringstream out;
    out << errors.size() << " sample(s) skipped, " << all_zero_target_ids.size()
        << " sample(s) without positive labels\n";
    for (const auto& e : errors) out << "  skipped: " << e << '\n';
    for (long long id : all_zero_target_ids)
      out << "  no classification signal: image " << id << '\n';
    return out.str();
  }
};

struct Dataset {
  std::vector<Sample> samples;
  LoadReport report;
};

// Annotation schema: {"images": [{"id", "file_name"}],
//                     "annotations": [{"image_id", "caption"}]}
// Image files live under image_dir. A missing or undecodable image file
// skips that sample and lands in the report; annotations for unknown image
// ids do the same. Malformed JSON or a missing field is a hard error.
inline Dataset load_coco_format(const std::string& json_path, const std::string& image_dir) {
  std::ifstream in(json_path);
  require(in.good(), "cannot open annotation file: " + json_path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("malformed JSON in " + json_path + ": " + e.what());
  }
  require(doc.contains("images") && doc["images"].is_array(),
          json_path + ": missing \"images\" array");
  require(doc.contains("annotations") && doc["annotations"].is_array(),
          json_path + ": missing \"annotations\" array");

  Dataset ds;
  std::map<long long, std::size_t> index_by_id;
  for (const auto& entry : doc["images"]) {
    require(entry.contains("id") && entry["id"].is_number_integer(),
            json_path + ": image entry without integer \"id\"");
    require(entry.contains("file_name") && entry["file_name"].is_string(),
            json_path + ": image entry without \"file_name\"");
    Sample s;
    s.image_id = entry["id"].get<long long>();
    s.file_name = entry["file_name"].get<std::string>();
    require(index_by_id.count(s.image_id) == 0,
            json_path + ": duplicate image id " + std::to_string(s.image_id));
    auto path = std::filesystem::path(image_dir) / s.file_name;
    try {
      s.image = read_png(path.string());
    } catch (const std::invalid_argument& e) {
      ds.report.errors.push_back("image " + std::to_string(s.image_id) + ": " + e.what());
      continue;
    }
    index_by_id.emplace(s.image_id, ds.samples.size());
    ds.samples.push_back(std::move(s));
  }
  for (const auto& entry : doc["annotations"]) {
    require(entry.contains("image_id") && entry["image_id"].is_number_integer(),
            json_path + ": annotation without integer \"image_id\"");
    require(entry.contains("caption") && entry["caption"].is_string(),
            json_path + ": annotation without \"caption\"");
    long long id = entry["image_id"].get<long long>();
    auto it = index_by_id.find(id);
    if (it == index_by_id.end()) {
      ds.report.errors.push_back("annotation for unknown image id " + std::to_string(id));
      continue;
    }
    CaptionEntry cap;
    cap.raw = entry["caption"].get<std::string>();
    cap.tokens = tokenize(cap.raw);
    ds.samples[it->second].captions.push_back(std::move(cap));
  }
  for (auto sit = ds.samples.begin(); sit != ds.samples.end();) {
    if (sit->captions.empty()) {
      ds.report.errors.push_back("image " + std::to_string(sit->image_id) +
                                 ": no captions");
      sit = ds.samples.erase(sit);
    } else {
      ++sit;
    }
  }
  return ds;
}

inline std::vector<std::vector<std::string>> corpus_tokens(const Dataset& ds) {
  std::vector<std::vector<std::string>> corpus;
  for (const auto& s : ds.samples)
    for (const auto& c : s.captions) corpus.push_back(c.tokens);
  return corpus;
}

// Second pass once a vocabulary exists: token ids, visual-word positions on
// the kept (truncated) content tokens, and the per-image multi-label target.
// Images whose captions mention no mapped word keep a zero target and are
// flagged in the report.
inline void encode_dataset(Dataset& ds, const Vocabulary& vocab,
                           const CategoryMapping& mapping, int max_content = 20) {
  for (auto& s : ds.samples) {
    std::vector<std::vector<std::string>> caps;
    for (auto& c : s.captions) {
      c.sequence = vocab.encode(c.tokens, max_content);
      std::vector<std::string> kept(
          c.tokens.begin(),
          c.tokens.begin() + std::min<std::size_t>(c.tokens.size(),
                                                   static_cast<std::size_t>(max_content)));
      c.visual_words = extract_visual_words(kept, mapping);
      caps.push_back(std::move(kept));
    }
    s.multilabel_target = build_multilabel_target(caps, mapping, mapping.category_count());
    if (!s.has_positive_label()) ds.report.all_zero_target_ids.push_back(s.image_id);
  }
}

}  // namespace capalign
