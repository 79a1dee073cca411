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
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "capalign/dataset.hpp"

namespace capalign {

// Synthetic shapes-on-a-grid data. Each image is a grid of square cells on
// a black background with 1..max_shapes colored shapes, one per 2x2-cell
// box, boxes non-overlapping. Shape nouns are the visual words; colors are
// deliberately not mapped, so attention supervision targets only the nouns.
struct ToyConfig {
  int num_images = 200;
  int grid = 7;         // cells per side
  int cell_pixels = 8;  // pixels per cell side
  int num_categories = 4;
  int min_shapes = 1;
  int max_shapes = 3;

  int image_size() const { return grid * cell_pixels; }
  int num_cells() const { return grid * grid; }
};

// image id -> category id -> sorted flat cell indices (row-major, y*grid+x)
using MaskTable = std::map<long long, std::map<int, std::vector<int>>>;

struct ToyDataset {
  ToyConfig config;
  Dataset dataset;
  CategoryMapping mapping;
  MaskTable masks;
};

namespace toy_detail {

struct ShapeSpec {
  const char* noun;
  const char* color;
  double rgb[3];
};

inline const std::array<ShapeSpec, 8>& shape_table() {
  static const std::array<ShapeSpec, 8> table = {{
      {"circle", "red", {1.0, 0.0, 0.0}},
      {"square", "blue", {0.0, 0.0, 1.0}},
      {"triangle", "green", {0.0, 1.0, 0.0}},
      {"cross", "yellow", {1.0, 1.0, 0.0}},
      {"diamond", "magenta", {1.0, 0.0, 1.0}},
      {"ring", "cyan", {0.0, 1.0, 1.0}},
      {"bar", "white", {1.0, 1.0, 1.0}},
      {"dot", "orange", {1.0, 0.6, 0.0}},
  }};
  return table;
}

// Predicate over box-local pixel coordinates; the box side is 2*cell_pixels.
inline bool inside_shape(int category, double dx, double dy, int box) {
  const double r = box * 0.40;
  switch (category) {
    case 0:  // circle
      return dx * dx + dy * dy <= r * r;
    case 1:  // square
      return true;
    case 2: {  // triangle, apex up
      const double row = dy + (box - 1) / 2.0;
      const double halfwidth = (row + 1.0) / box * (box / 2.0);
      return std::fabs(dx) < halfwidth;
    }
    case 3:  // cross
      return std::fabs(dx) < box / 8.0 || std::fabs(dy) < box / 8.0;
    case 4:  // diamond
      return std::fabs(dx) + std::fabs(dy) <= (box - 1) / 2.0;
    case 5: {  // ring
      const double d2 = dx * dx + dy * dy;
      const double inner = box * 0.25;
      return d2 > inner * inner && d2 <= r * r;
    }
    case 6:  // bar
      return std::fabs(dy) < box * 0.19;
    case 7: {  // dot
      const double rd = box * 0.2;
      return dx * dx + dy * dy <= rd * rd;
    }
    default:
      throw std::invalid_argument("unknown toy category");
  }
}

}  // namespace toy_detail

inline CategoryMapping toy_mapping(int num_categories) {
  require(num_categories >= 1 &&
              num_categories <= static_cast<int>(toy_detail::shape_table().size()),
          "toy category count must be in [1, 8]");
  std::vector<std::pair<std::string, std::string>> pairs;
  for (int c = 0; c < num_categories; ++c) {
    const auto& spec = toy_detail::shape_table()[static_cast<std::size_t>(c)];
    pairs.emplace_back(spec.noun, spec.noun);
  }
  return CategoryMapping::from_pairs(pairs);
}

inline ToyDataset generate_toy_dataset(const ToyConfig& config, std::uint64_t seed) {
  require(config.num_images > 0, "toy dataset needs at least one image");
  require(config.grid >= 3 && config.cell_pixels >= 4, "toy grid too small");
  require(config.min_shapes >= 1 && config.min_shapes <= config.max_shapes,
          "invalid shape count range");
  require(config.max_shapes <= config.num_categories,
          "max_shapes exceeds category count (categories are unique per image)");

  ToyDataset toy;
  toy.config = config;
  toy.mapping = toy_mapping(config.num_categories);
  auto rng = make_rng(seed, streams::kToyData);

  const int box = 2 * config.cell_pixels;
  const int size = config.image_size();
  const double center = (box - 1) / 2.0;

  for (int i = 0; i < config.num_images; ++i) {
    Sample s;
    s.image_id = i;
    char name[32];
    std::snprintf(name, sizeof(name), "img_%06d.png", i);
    s.file_name = name;
    s.image.width = size;
    s.image.height = size;
    s.image.pixels = Mat::Zero(3, size * size);

    int want = config.min_shapes +
               static_cast<int>(rng() % static_cast<std::uint64_t>(
                                            config.max_shapes - config.min_shapes + 1));
    std::vector<int> categories(static_cast<std::size_t>(config.num_categories));
    for (int c = 0; c < config.num_categories; ++c) categories[static_cast<std::size_t>(c)] = c;
    std::shuffle(categories.begin(), categories.end(), rng);
    categories.resize(static_cast<std::size_t>(want));

    std::vector<std::pair<int, int>> boxes;  // cell origin (bx, by) per placed shape
    std::vector<int> placed;
    for (int category : categories) {
      bool ok = false;
      for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
        int bx = static_cast<int>(rng() % static_cast<std::uint64_t>(config.grid - 1));
        int by = static_cast<int>(rng() % static_cast<std::uint64_t>(config.grid - 1));
        ok = true;
        for (const auto& [ox, oy] : boxes)
          if (std::abs(bx - ox) < 2 && std::abs(by - oy) < 2) {
            ok = false;
            break;
          }
        if (ok) {
          boxes.emplace_back(bx, by);
          placed.push_back(category);
        }
      }
    }

    for (std::size_t j = 0; j < placed.size(); ++j) {
      const int category = placed[j];
      const auto& spec = toy_detail::shape_table()[static_cast<std::size_t>(category)];
      const int px0 = boxes[j].first * config.cell_pixels;
      const int py0 = boxes[j].second * config.cell_pixels;
      std::set<int> cells;
      for (int py = 0; py < box; ++py)
        for (int px = 0; px < box; ++px) {
          if (!toy_detail::inside_shape(category, px - center, py - center, box)) continue;
          const int gx = px0 + px;
          const int gy = py0 + py;
          const int col = gy * size + gx;
          for (int c = 0; c < 3; ++c) s.image.pixels(c, col) = spec.rgb[c];
          cells.insert((gy / config.cell_pixels) * config.grid + gx / config.cell_pixels);
        }
      require(!cells.empty(), "toy shape painted no pixels");
      toy.masks[s.image_id][category] = {cells.begin(), cells.end()};
    }

    std::string noun_phrase;
    for (std::size_t j = 0; j < placed.size(); ++j) {
      const auto& spec = toy_detail::shape_table()[static_cast<std::size_t>(placed[j])];
      if (j > 0) noun_phrase += " and";
      noun_phrase += " a ";
      noun_phrase += spec.color;
      noun_phrase += ' ';
      noun_phrase += spec.noun;
    }
    CaptionEntry c1, c2;
    c1.raw = "there is" + noun_phrase;
    c2.raw = "an image with" + noun_phrase;
    c1.tokens = tokenize(c1.raw);
    c2.tokens = tokenize(c2.raw);
    s.captions.push_back(std::move(c1));
    s.captions.push_back(std::move(c2));
    toy.dataset.samples.push_back(std::move(s));
  }
  return toy;
}

// Files: images/<file_name>, dataset.json (annotation schema), mapping.tsv,
// masks.json keyed by image id then category id.
inline void write_toy_dataset(const ToyDataset& toy, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  nlohmann::ordered_json doc;
  doc["images"] = nlohmann::ordered_json::array();
  doc["annotations"] = nlohmann::ordered_json::array();
  for (const auto& s : toy.dataset.samples) {
    write_png((fs::path(dir) / "images" / s.file_name).string(), s.image);
    doc["images"].push_back({{"id", s.image_id}, {"file_name", s.file_name}});
    for (const auto& cap : s.captions)
      doc["annotations"].push_back({{"image_id", s.image_id}, {"caption", cap.raw}});
  }
  {
    std::ofstream out((fs::path(dir) / "dataset.json").string());
    require(out.good(), "cannot write dataset.json under " + dir);
    out << doc.dump(2) << '\n';
  }
  toy.mapping.save((fs::path(dir) / "mapping.tsv").string());
  {
    nlohmann::json masks;
    for (const auto& [image_id, per_category] : toy.masks) {
      nlohmann::json entry;
      for (const auto& [category, cells] : per_category)
        entry[std::to_string(category)] = cells;
      masks[std::to_string(image_id)] = std::move(entry);
    }
    std::ofstream out((fs::path(dir) / "masks.json").string());
    require(out.good(), "cannot write masks.json under " + dir);
    out << masks.dump(2) << '\n';
  }
}

inline MaskTable load_masks(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open mask file: " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument("malformed JSON in " + path + ": " + e.what());
  }
  MaskTable table;
  for (const auto& [image_key, per_category] : doc.items())
    for (const auto& [category_key, cells] : per_category.items())
      table[std::stoll(image_key)][std::stoi(category_key)] =
          cells.get<std::vector<int>>();
  return table;
}

}  // namespace capalign
