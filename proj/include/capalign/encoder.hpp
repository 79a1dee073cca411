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
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "capalign/dataset.hpp"
#include "capalign/image_io.hpp"
#include "capalign/optim.hpp"
#include "capalign/tape.hpp"

namespace capalign {

struct EncoderConfig {
  int input_size = 56;
  std::vector<int> channels = {8, 16, 64};
  int num_categories = 4;
  int frozen_blocks = 2;

  int num_blocks() const { return static_cast<int>(channels.size()); }
  int feature_dim() const { return channels.back(); }
  int grid() const { return input_size >> num_blocks(); }
  int num_regions() const { return grid() * grid(); }

  void validate() const {
    require(num_blocks() >= 1, "encoder needs at least one block");
    for (int c : channels) require(c > 0, "channel widths must be positive");
    require(num_categories > 0, "category count must be positive");
    require(frozen_blocks >= 0 && frozen_blocks < num_blocks(),
            "frozen block count must be below the number of blocks");
    require(input_size % (1 << num_blocks()) == 0 && grid() > 0,
            "input size must be divisible by 2^blocks with a nonempty grid");
  }
};

// Final-layer activations of one image, in both layouts the rest of the
// library consumes: V row i is the feature vector of region i, and
// `activations` column i is the same vector. Region i sits at grid cell
// (i % width, i / width).
struct FeatureGrid {
  Mat V;            // k x d
  Mat activations;  // d x k
  int width = 0;
  int height = 0;
};

// Stack of conv blocks (3x3 conv, ReLU, 2x average pool) ending at a small
// spatial grid, plus a global-average-pool linear head emitting one logit
// per category.
class ConvEncoder {
 public:
  ConvEncoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    auto rng = make_rng(seed, streams::kEncoderInit);
    int c_in = 3;
    for (int b = 0; b < config_.num_blocks(); ++b) {
      const int c_out = config_.channels[static_cast<std::size_t>(b)];
      Block blk;
      blk.weight = Mat(c_out, 9 * c_in);
      init_uniform(blk.weight, 9 * c_in, rng);
      blk.bias = Mat::Zero(c_out, 1);
      blocks_.push_back(std::move(blk));
      c_in = c_out;
    }
    head_weight_ = Mat(config_.num_categories, config_.feature_dim());
    init_uniform(head_weight_, config_.feature_dim(), rng);
    head_bias_ = Mat::Zero(config_.num_categories, 1);
  }

  const EncoderConfig& config() const { return config_; }

  std::vector<NamedParam> parameters() const {
    auto* self = const_cast<ConvEncoder*>(this);
    std::vector<NamedParam> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      out.push_back({block_name(b) + ".weight", &self->blocks_[b].weight});
      out.push_back({block_name(b) + ".bias", &self->blocks_[b].bias});
    }
    out.push_back({"encoder.head.weight", &self->head_weight_});
    out.push_back({"encoder.head.bias", &self->head_bias_});
    return out;
  }

  // Names trainable in phase 2: every block from `first_trainable_block` on,
  // plus the head.
  std::set<std::string> trainable_names(int first_trainable_block) const {
    std::set<std::string> names;
    for (int b = first_trainable_block; b < config_.num_blocks(); ++b) {
      names.insert(block_name(static_cast<std::size_t>(b)) + ".weight");
      names.insert(block_name(static_cast<std::size_t>(b)) + ".bias");
    }
    names.insert("encoder.head.weight");
    names.insert("encoder.head.bias");
    return names;
  }

  std::set<std::string> head_names() const {
    return {"encoder.head.weight", "encoder.head.bias"};
  }

  struct Forward {
    Var image;
    Var activations;  // d x k at the final conv layer
    Var gap;          // d x 1
    Var logits;       // C x 1
  };

  // Builds the forward graph on a caller-owned tape. When
  // `want_activation_grad` is set the final conv activations are marked as
  // a gradient sink before the head is attached, so a later backward pass
  // over a logit exposes d(logit)/d(activations).
  Forward build_graph(Tape& tape, const BoundParams& bound, const Mat& image_pixels,
                      bool want_activation_grad = false) const {
    check_input(image_pixels);
    Forward f;
    f.image = tape.constant(image_pixels);
    Var x = f.image;
    int side = config_.input_size;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Var patches = tape.im2col3x3(x, side, side);
      Var conv = tape.add_colwise(tape.matmul(bound[blocks_[b].weight], patches),
                                  bound[blocks_[b].bias]);
      x = tape.avgpool2(tape.relu_(conv), side, side);
      side /= 2;
    }
    f.activations = x;
    if (want_activation_grad) tape.request_grad(f.activations);
    f.gap = tape.mean_cols(f.activations);
    f.logits = tape.add(tape.matmul(bound[head_weight_], f.gap), bound[head_bias_]);
    return f;
  }

  FeatureGrid extract_features(const ImageRgb& image) const {
    Tape tape;
    BoundParams bound(tape, parameters(), false);
    Forward f = build_graph(tape, bound, image.pixels);
    FeatureGrid grid;
    grid.activations = tape.value(f.activations);
    grid.V = grid.activations.transpose();
    grid.width = config_.grid();
    grid.height = config_.grid();
    return grid;
  }

  Vec classify_multilabel(const ImageRgb& image) const {
    Tape tape;
    BoundParams bound(tape, parameters(), false);
    Forward f = build_graph(tape, bound, image.pixels);
    return tape.value(f.logits).col(0);
  }

  Mat& head_weight() { return head_weight_; }
  Mat& head_bias() { return head_bias_; }

 private:
  struct Block {
    Mat weight;  // C_out x (9 * C_in)
    Mat bias;    // C_out x 1
  };

  static std::string block_name(std::size_t b) {
    return "encoder.block" + std::to_string(b);
  }

  void check_input(const Mat& image_pixels) const {
    const int s = config_.input_size;
    require_shape(image_pixels.rows() == 3 &&
                      image_pixels.cols() == static_cast<Eigen::Index>(s) * s,
                  "encoder input must be 3x" + std::to_string(s * s) + " (" +
                      std::to_string(s) + "x" + std::to_string(s) +
                      " RGB), got 3x" + std::to_string(image_pixels.cols()));
  }

  EncoderConfig config_;
  std::vector<Block> blocks_;
  Mat head_weight_;  // C x d
  Mat head_bias_;    // C x 1
};

struct FinetuneConfig {
  int head_epochs = 50;
  int full_epochs = 50;
  double head_lr = 1e-4;
  double full_lr = 1e-5;
  int batch_size = 16;
  std::uint64_t seed = 0;
};

struct FinetuneTrace {
  std::vector<double> head_loss;  // mean per-sample loss per epoch
  std::vector<double> full_loss;
};

// Fraction of (sample, class) decisions that are correct, averaged per
// class first: threshold at logit 0 (sigmoid 0.5).
inline double macro_accuracy(const ConvEncoder& encoder, const Dataset& dataset) {
  const int C = encoder.config().num_categories;
  require(!dataset.samples.empty(), "empty dataset");
  Vec correct = Vec::Zero(C);
  for (const auto& s : dataset.samples) {
    require(s.multilabel_target.size() == C, "sample target length mismatch");
    Vec logits = encoder.classify_multilabel(s.image);
    for (int c = 0; c < C; ++c) {
      const bool predicted = logits(c) > 0.0;
      const bool actual = s.multilabel_target(c) > 0.5;
      if (predicted == actual) correct(c) += 1.0;
    }
  }
  return correct.sum() / (static_cast<double>(C) * dataset.samples.size());
}

// Two-phase schedule: the head alone first, then everything except the
// leading frozen blocks at a lower rate. Samples without a positive label
// are left out of the batches.
inline FinetuneTrace finetune_multilabel(ConvEncoder& encoder, const Dataset& dataset,
                                         const FinetuneConfig& config) {
  require(!dataset.samples.empty(), "empty dataset");
  require(config.batch_size > 0, "batch size must be positive");
  std::vector<std::size_t> usable;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    require(dataset.samples[i].multilabel_target.size() ==
                encoder.config().num_categories,
            "sample target length mismatch");
    if (dataset.samples[i].has_positive_label()) usable.push_back(i);
  }
  require(!usable.empty(), "no classification signal");

  FinetuneTrace trace;
  auto params = encoder.parameters();

  // Phase 1: frozen features never change, so compute the pooled feature of
  // every usable sample once and train the head on those vectors.
  {
    std::vector<Vec> pooled;
    pooled.reserve(usable.size());
    for (std::size_t i : usable) {
      FeatureGrid grid = encoder.extract_features(dataset.samples[i].image);
      pooled.push_back(grid.activations.rowwise().mean());
    }
    std::vector<NamedParam> head_params;
    const auto head = encoder.head_names();
    for (const auto& p : params)
      if (head.count(p.name)) head_params.push_back(p);
    Adam opt(config.head_lr);
    for (int epoch = 0; epoch < config.head_epochs; ++epoch) {
      auto rng = make_rng(config.seed, streams::kClassifierEpoch, static_cast<std::uint64_t>(epoch));
      std::vector<std::size_t> order(usable.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        Tape tape;
        BoundParams bound(tape, head_params, true);
        Var batch_loss{};
        for (std::size_t j = start; j < stop; ++j) {
          Var feat = tape.constant(pooled[order[j]]);
          Var logits = tape.add(tape.matmul(bound[*head_params[0].mat], feat),
                                bound[*head_params[1].mat]);
          Var loss = tape.bce_with_logits_mean(
              logits, dataset.samples[usable[order[j]]].multilabel_target);
          batch_loss = (j == start) ? loss : tape.add(batch_loss, loss);
        }
        epoch_loss += tape.value(batch_loss)(0, 0);
        Var objective = tape.scale(batch_loss, 1.0 / static_cast<double>(stop - start));
        tape.backward(objective);
        std::vector<Mat> grads;
        for (const auto& p : head_params) grads.push_back(tape.grad(bound[*p.mat]));
        opt.step(head_params, std::move(grads));
      }
      trace.head_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
  }

  // Phase 2: unfreeze everything past the leading frozen blocks.
  {
    const auto trainable = encoder.trainable_names(encoder.config().frozen_blocks);
    std::vector<NamedParam> trainable_params;
    for (const auto& p : params)
      if (trainable.count(p.name)) trainable_params.push_back(p);
    Adam opt(config.full_lr);
    for (int epoch = 0; epoch < config.full_epochs; ++epoch) {
      auto rng = make_rng(config.seed, streams::kClassifierEpoch,
                          1000000ull + static_cast<std::uint64_t>(epoch));
      std::vector<std::size_t> order(usable.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
        Tape tape;
        BoundParams bound(tape, params,
                          [&](const NamedParam& p) { return trainable.count(p.name) > 0; });
        Var batch_loss{};
        for (std::size_t j = start; j < stop; ++j) {
          const Sample& s = dataset.samples[usable[order[j]]];
          auto f = encoder.build_graph(tape, bound, s.image.pixels);
          Var loss = tape.bce_with_logits_mean(f.logits, s.multilabel_target);
          batch_loss = (j == start) ? loss : tape.add(batch_loss, loss);
        }
        epoch_loss += tape.value(batch_loss)(0, 0);
        Var objective = tape.scale(batch_loss, 1.0 / static_cast<double>(stop - start));
        tape.backward(objective);
        std::vector<Mat> grads;
        for (const auto& p : trainable_params) grads.push_back(tape.grad(bound[*p.mat]));
        opt.step(trainable_params, std::move(grads));
      }
      trace.full_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    }
  }
  return trace;
}

}  // namespace capalign
