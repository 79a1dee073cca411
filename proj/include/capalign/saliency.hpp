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
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capalign/dataset.hpp"
#include "capalign/encoder.hpp"

namespace capalign {

// Region-level saliency distribution for one (image, category) pair.
struct SaliencyTarget {
  Vec alpha;  // length k, non-negative, sums to 1
  int category = -1;
  bool degenerate = false;  // no positive mass before normalization
};

// Core of the gradient-weighted class activation map, on the final-layer
// activations A (d x k) and the gradients G = d(logit_c)/dA: each channel
// is weighted by the spatial mean of its gradient, the weighted channels
// are summed into one region map, rectified, and normalized into a
// distribution. A map with no positive mass falls back to uniform and is
// flagged degenerate.
inline SaliencyTarget gradcam_from(const Mat& activations, const Mat& grads,
                                   int category = -1) {
  require_shape(activations.rows() == grads.rows() && activations.cols() == grads.cols(),
                "gradcam: activation/gradient shape mismatch");
  require_shape(activations.cols() > 0, "gradcam: empty activation grid");
  const double z = static_cast<double>(activations.cols());
  Vec theta = grads.rowwise().sum() / z;             // per-channel weight
  Vec pre_relu = activations.transpose() * theta;    // k, region index row-major
  Vec rectified = pre_relu.cwiseMax(0.0);

  SaliencyTarget t;
  t.category = category;
  const double mass = rectified.sum();
  if (mass > 0.0) {
    t.alpha = rectified / mass;
  } else {
    const int k = static_cast<int>(activations.cols());
    t.alpha = Vec::Constant(k, 1.0 / k);
    t.degenerate = true;
  }
  return t;
}

inline SaliencyTarget gradcam(const ConvEncoder& encoder, const ImageRgb& image,
                              int category) {
  require(category >= 0 && category < encoder.config().num_categories,
          "category " + std::to_string(category) + " outside [0, " +
              std::to_string(encoder.config().num_categories) + ")");
  Tape tape;
  BoundParams bound(tape, encoder.parameters(), false);
  auto f = encoder.build_graph(tape, bound, image.pixels, true);
  tape.backward(tape.pick(f.logits, category));
  return gradcam_from(tape.value(f.activations), tape.grad(f.activations), category);
}

// Alignment targets for caption training, keyed by (image id, category).
using SaliencyTable = std::map<std::pair<long long, int>, SaliencyTarget>;

// One entry per distinct (image, category) pair named by any caption's
// visual words. Targets are plain values; nothing downstream can
// backpropagate into them.
inline SaliencyTable precompute_targets(const Dataset& dataset, const ConvEncoder& encoder,
                                        const CategoryMapping& mapping) {
  require(mapping.category_count() == encoder.config().num_categories,
          "mapping category count does not match the encoder head");
  SaliencyTable table;
  for (const auto& s : dataset.samples) {
    for (const auto& cap : s.captions) {
      for (const auto& [step, category] : cap.visual_words) {
        (void)step;
        const auto key = std::make_pair(s.image_id, category);
        if (table.count(key)) continue;
        try {
          table.emplace(key, gradcam(encoder, s.image, category));
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument("saliency target for image " +
                                      std::to_string(s.image_id) + ", category " +
                                      std::to_string(category) + ": " + e.what());
        }
      }
    }
  }
  return table;
}

// Grayscale blend of the image with a region map: luminance dimmed, the
// map peak-normalized and block upsampled (nearest neighbor) from the grid
// onto the pixels. Works for saliency targets and predicted attention
// alike.
inline ImageGray render_attention_overlay(const ImageRgb& image, const Vec& alpha,
                                          int grid_w, int grid_h) {
  require_shape(alpha.size() == static_cast<Eigen::Index>(grid_w) * grid_h,
                "overlay: map length does not match grid");
  require(image.width % grid_w == 0 && image.height % grid_h == 0,
          "overlay: image size not divisible by grid");
  const int cell_w = image.width / grid_w;
  const int cell_h = image.height / grid_h;
  const double peak = alpha.maxCoeff();
  ImageGray out;
  out.width = image.width;
  out.height = image.height;
  out.pixels = Mat(1, image.width * image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const int col = y * image.width + x;
      const double lum = 0.299 * image.pixels(0, col) + 0.587 * image.pixels(1, col) +
                         0.114 * image.pixels(2, col);
      const int cell = (y / cell_h) * grid_w + x / cell_w;
      const double sal = peak > 0.0 ? alpha(cell) / peak : 0.0;
      out.pixels(0, col) = 0.35 * lum + 0.65 * sal;
    }
  return out;
}

// Overlay for one saliency target plus a JSON sidecar describing it.
inline void write_saliency_overlay(const std::string& pgm_path, const std::string& json_path,
                                   const ImageRgb& image, const SaliencyTarget& target,
                                   int grid_w, int grid_h, long long image_id,
                                   const std::string& category_name) {
  write_pgm(pgm_path, render_attention_overlay(image, target.alpha, grid_w, grid_h));

  nlohmann::ordered_json sidecar;
  sidecar["image_id"] = image_id;
  sidecar["category"] = category_name;
  sidecar["k"] = static_cast<int>(target.alpha.size());
  sidecar["degenerate"] = target.degenerate;
  std::ofstream js(json_path);
  require(js.good(), "cannot write overlay sidecar " + json_path);
  js << sidecar.dump(2) << '\n';
}

}  // namespace capalign
