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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "capalign/checkpoint.hpp"
#include "capalign/dataset.hpp"
#include "capalign/decoder.hpp"
#include "capalign/encoder.hpp"
#include "capalign/model.hpp"
#include "capalign/objective.hpp"
#include "capalign/optim.hpp"
#include "capalign/saliency.hpp"

namespace capalign {

// ---------------------------------------------------------------------------
// Captioner training core. Works on in-memory objects; file orchestration
// lives further down in run_training.

struct EpochLoss {
  double caption_loss = 0.0;    // mean per caption instance
  double alignment_loss = 0.0;  // mean per caption instance, pre-lambda
  double total = 0.0;           // caption + lambda * alignment
};

struct CaptionTrainTrace {
  std::vector<EpochLoss> epochs;
};

struct CaptionTrainConfig {
  LossConfig loss;
  SamplingSchedule sampling;
  double clip_norm = 5.0;
  int epochs = 30;
  int batch_size = 16;
  std::uint64_t seed = 0;
  int start_epoch = 0;  // first epoch to run; earlier ones came from a checkpoint
  bool skip_degenerate_targets = false;
};

// Alignment targets of one caption, keyed by decoder timestep. A word whose
// (image, category) pair is missing from the table carries no target, as
// does a degenerate target when the skip switch is on.
inline StepTargets step_targets_for(const CaptionEntry& cap, long long image_id,
                                    const SaliencyTable& table, bool skip_degenerate) {
  StepTargets targets;
  for (const auto& [step, category] : cap.visual_words) {
    auto it = table.find({image_id, category});
    if (it == table.end()) continue;
    if (skip_degenerate && it->second.degenerate) continue;
    targets[step] = it->second.alpha;
  }
  return targets;
}

// Trains attention, decoder, and embeddings against the frozen encoder's
// features, one shuffled pass per epoch with batch-mean objectives. Region
// features are extracted once per image up front. The per-epoch RNG is
// derived from (seed, epoch) alone and feeds the shuffle first and the
// scheduled-sampling coins second, so a run restarted at any epoch
// boundary replays the exact remaining epochs.
inline CaptionTrainTrace train_captioner(
    const ConvEncoder& encoder, Captioner& model, const Dataset& dataset,
    const SaliencyTable& table, const CaptionTrainConfig& config, Adam& opt,
    const std::function<void(int, const EpochLoss&)>& on_epoch = nullptr) {
  config.loss.validate();
  require(config.batch_size > 0, "batch size must be positive");
  require(config.start_epoch >= 0 && config.start_epoch <= config.epochs,
          "start epoch outside [0, epochs]");
  require(!dataset.samples.empty(), "empty dataset");
  require(encoder.config().feature_dim() == model.config().feature_dim,
          "encoder feature width does not match the captioner");

  std::vector<std::pair<std::size_t, std::size_t>> instances;
  for (std::size_t si = 0; si < dataset.samples.size(); ++si) {
    for (std::size_t ci = 0; ci < dataset.samples[si].captions.size(); ++ci) {
      require(dataset.samples[si].captions[ci].sequence.steps() >= 1,
              "caption without token ids; encode the dataset first");
      instances.emplace_back(si, ci);
    }
  }

  std::vector<Mat> features(dataset.samples.size());
  for (std::size_t si = 0; si < dataset.samples.size(); ++si)
    features[si] = encoder.extract_features(dataset.samples[si].image).V;

  auto params = model.parameters();
  CaptionTrainTrace trace;
  for (int epoch = config.start_epoch; epoch < config.epochs; ++epoch) {
    const double teacher = scheduled_sampling_prob(epoch, config.sampling);
    auto rng = make_rng(config.seed, streams::kCaptionEpoch,
                        static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(instances.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);

    EpochLoss sums;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      Tape tape;
      BoundParams bound(tape, params, true);
      Var batch_total{};
      for (std::size_t j = start; j < stop; ++j) {
        const auto& [si, ci] = instances[order[j]];
        const Sample& sample = dataset.samples[si];
        const CaptionEntry& cap = sample.captions[ci];
        Var V = tape.constant(features[si]);
        UnrollOptions opts;
        opts.teacher_prob = teacher;
        opts.rng = &rng;
        auto vars = sequence_loss_graph(
            tape, bound, model, V, cap.sequence,
            step_targets_for(cap, sample.image_id, table,
                             config.skip_degenerate_targets),
            config.loss, opts);
        LossBreakdown b = breakdown_from(tape, vars, config.loss);
        sums.caption_loss += b.caption_loss;
        sums.alignment_loss += b.alignment_loss;
        sums.total += b.total;
        batch_total = (j == start) ? vars.total : tape.add(batch_total, vars.total);
      }
      tape.backward(tape.scale(batch_total, 1.0 / static_cast<double>(stop - start)));
      std::vector<Mat> grads;
      grads.reserve(params.size());
      for (const auto& p : params) grads.push_back(tape.grad(bound[*p.mat]));
      opt.step(params, std::move(grads));
    }

    const double count = static_cast<double>(instances.size());
    EpochLoss epoch_loss{sums.caption_loss / count, sums.alignment_loss / count,
                         sums.total / count};
    trace.epochs.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Run configuration. Every knob of a full two-stage run, with toy-scale
// defaults. The resolved form is echoed to JSON next to the outputs and
// into every checkpoint, and a resumed run must present the identical
// configuration.

struct RunConfig {
  // encoder
  int input_size = 56;
  std::vector<int> channels = {8, 16, 32};
  int frozen_blocks = 2;
  // captioner
  int embed_dim = 32;
  int hidden_dim = 64;
  int attn_hidden_dim = 64;
  int attn_width = 32;
  int max_caption_tokens = 20;
  // objective
  double lambda = 100.0;
  bool skip_degenerate_targets = false;
  // optimization
  double captioner_lr = 5e-4;
  double head_lr = 1e-4;
  double full_lr = 1e-5;
  double clip_norm = 5.0;
  int head_epochs = 15;
  int full_epochs = 15;
  int epochs = 30;
  int batch_size = 16;
  int beam_size = 3;
  // scheduled sampling
  double sampling_start = 1.0;
  double sampling_floor = 0.75;
  int sampling_decay_epochs = 20;
  // data
  int min_word_count = 0;
  std::uint64_t seed = 0;
  std::string dataset_json;
  std::string image_dir;
  std::string mapping_path;
  std::string output_dir;

  SamplingSchedule sampling() const {
    return {sampling_start, sampling_floor, sampling_decay_epochs};
  }
};

// Name of the environment variable that, when set and nonempty, overrides
// output_dir for every run.
inline constexpr const char* kOutputDirEnvVar = "CAPALIGN_OUTPUT_DIR";

// All problems at once, empty when the config is usable.
inline std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> problems;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) problems.push_back(what);
  };
  check(c.input_size > 0, "input_size must be positive");
  check(!c.channels.empty(), "channels must name at least one block");
  for (int ch : c.channels) check(ch > 0, "channel widths must be positive");
  check(c.frozen_blocks >= 0 && c.frozen_blocks < static_cast<int>(c.channels.size()),
        "frozen_blocks must be below the number of blocks");
  if (!c.channels.empty()) {
    const int blocks = static_cast<int>(c.channels.size());
    check(c.input_size % (1 << blocks) == 0 && (c.input_size >> blocks) > 0,
          "input_size must be divisible by 2^blocks with a nonempty grid");
  }
  check(c.embed_dim > 0, "embed_dim must be positive");
  check(c.hidden_dim > 0, "hidden_dim must be positive");
  check(c.attn_hidden_dim > 0, "attn_hidden_dim must be positive");
  check(c.attn_width > 0, "attn_width must be positive");
  check(c.max_caption_tokens > 0, "max_caption_tokens must be positive");
  check(c.lambda >= 0.0, "lambda must be non-negative");
  check(c.captioner_lr > 0.0, "captioner_lr must be positive");
  check(c.head_lr > 0.0, "head_lr must be positive");
  check(c.full_lr > 0.0, "full_lr must be positive");
  check(c.clip_norm >= 0.0, "clip_norm must be non-negative");
  check(c.head_epochs >= 0, "head_epochs must be non-negative");
  check(c.full_epochs >= 0, "full_epochs must be non-negative");
  check(c.epochs > 0, "epochs must be positive");
  check(c.batch_size > 0, "batch_size must be positive");
  check(c.beam_size > 0, "beam_size must be positive");
  check(c.sampling_start >= 0.0 && c.sampling_start <= 1.0,
        "sampling_start must lie in [0, 1]");
  check(c.sampling_floor >= 0.0 && c.sampling_floor <= c.sampling_start,
        "sampling_floor must lie in [0, sampling_start]");
  check(c.sampling_decay_epochs > 0, "sampling_decay_epochs must be positive");
  check(c.min_word_count >= 0, "min_word_count must be non-negative");
  check(!c.dataset_json.empty(), "dataset_json path is required");
  check(!c.image_dir.empty(), "image_dir path is required");
  check(!c.mapping_path.empty(), "mapping_path path is required");
  check(!c.output_dir.empty(), "output_dir path is required");
  return problems;
}

inline void require_valid(const RunConfig& c) {
  auto problems = validate(c);
  if (problems.empty()) return;
  std::string joined = "invalid run config:";
  for (const auto& p : problems) joined += "\n  - " + p;
  throw std::invalid_argument(joined);
}

inline nlohmann::ordered_json run_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["input_size"] = c.input_size;
  j["channels"] = c.channels;
  j["frozen_blocks"] = c.frozen_blocks;
  j["embed_dim"] = c.embed_dim;
  j["hidden_dim"] = c.hidden_dim;
  j["attn_hidden_dim"] = c.attn_hidden_dim;
  j["attn_width"] = c.attn_width;
  j["max_caption_tokens"] = c.max_caption_tokens;
  j["lambda"] = c.lambda;
  j["skip_degenerate_targets"] = c.skip_degenerate_targets;
  j["captioner_lr"] = c.captioner_lr;
  j["head_lr"] = c.head_lr;
  j["full_lr"] = c.full_lr;
  j["clip_norm"] = c.clip_norm;
  j["head_epochs"] = c.head_epochs;
  j["full_epochs"] = c.full_epochs;
  j["epochs"] = c.epochs;
  j["batch_size"] = c.batch_size;
  j["beam_size"] = c.beam_size;
  j["sampling_start"] = c.sampling_start;
  j["sampling_floor"] = c.sampling_floor;
  j["sampling_decay_epochs"] = c.sampling_decay_epochs;
  j["min_word_count"] = c.min_word_count;
  j["seed"] = c.seed;
  j["dataset_json"] = c.dataset_json;
  j["image_dir"] = c.image_dir;
  j["mapping_path"] = c.mapping_path;
  j["output_dir"] = c.output_dir;
  return j;
}

inline RunConfig run_config_from_json(const nlohmann::ordered_json& j) {
  RunConfig c;
  c.input_size = j.at("input_size").get<int>();
  c.channels = j.at("channels").get<std::vector<int>>();
  c.frozen_blocks = j.at("frozen_blocks").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.attn_hidden_dim = j.at("attn_hidden_dim").get<int>();
  c.attn_width = j.at("attn_width").get<int>();
  c.max_caption_tokens = j.at("max_caption_tokens").get<int>();
  c.lambda = j.at("lambda").get<double>();
  c.skip_degenerate_targets = j.at("skip_degenerate_targets").get<bool>();
  c.captioner_lr = j.at("captioner_lr").get<double>();
  c.head_lr = j.at("head_lr").get<double>();
  c.full_lr = j.at("full_lr").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.head_epochs = j.at("head_epochs").get<int>();
  c.full_epochs = j.at("full_epochs").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.beam_size = j.at("beam_size").get<int>();
  c.sampling_start = j.at("sampling_start").get<double>();
  c.sampling_floor = j.at("sampling_floor").get<double>();
  c.sampling_decay_epochs = j.at("sampling_decay_epochs").get<int>();
  c.min_word_count = j.at("min_word_count").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.dataset_json = j.at("dataset_json").get<std::string>();
  c.image_dir = j.at("image_dir").get<std::string>();
  c.mapping_path = j.at("mapping_path").get<std::string>();
  c.output_dir = j.at("output_dir").get<std::string>();
  return c;
}

inline EncoderConfig encoder_config_of(const RunConfig& c, int num_categories) {
  EncoderConfig e;
  e.input_size = c.input_size;
  e.channels = c.channels;
  e.num_categories = num_categories;
  e.frozen_blocks = c.frozen_blocks;
  return e;
}

inline ModelConfig model_config_of(const RunConfig& c, int vocab_size, int feature_dim) {
  ModelConfig m;
  m.vocab_size = vocab_size;
  m.feature_dim = feature_dim;
  m.embed_dim = c.embed_dim;
  m.hidden_dim = c.hidden_dim;
  m.attn_hidden_dim = c.attn_hidden_dim;
  m.attn_width = c.attn_width;
  m.max_caption_tokens = c.max_caption_tokens;
  return m;
}

// ---------------------------------------------------------------------------
// File orchestration.

namespace train_detail {

// The part of the configuration that determines the encoder fine-tune.
// Captioner knobs (lambda included) are deliberately absent so runs that
// differ only there share byte-identical encoder checkpoints.
inline nlohmann::ordered_json stage_a_config_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["input_size"] = c.input_size;
  j["channels"] = c.channels;
  j["frozen_blocks"] = c.frozen_blocks;
  j["max_caption_tokens"] = c.max_caption_tokens;
  j["head_lr"] = c.head_lr;
  j["full_lr"] = c.full_lr;
  j["head_epochs"] = c.head_epochs;
  j["full_epochs"] = c.full_epochs;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["dataset_json"] = c.dataset_json;
  j["image_dir"] = c.image_dir;
  j["mapping_path"] = c.mapping_path;
  return j;
}

inline nlohmann::ordered_json mapping_json(const CategoryMapping& mapping) {
  // category-id order first so rebuilding assigns the same ids
  auto list = nlohmann::ordered_json::array();
  std::map<std::string, int> sorted;
  for (const auto& [word, name] : mapping.pairs_in_order())
    sorted.emplace(word, mapping.category(word));
  for (int c = 0; c < mapping.category_count(); ++c) {
    for (const auto& [word, cat] : sorted) {
      if (cat == c) list.push_back({word, mapping.category_name(c)});
    }
  }
  return list;
}

inline CategoryMapping mapping_from_json(const nlohmann::ordered_json& list) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& entry : list)
    pairs.emplace_back(entry.at(0).get<std::string>(), entry.at(1).get<std::string>());
  return CategoryMapping::from_pairs(pairs);
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "cannot write " + path);
  out << text;
}

inline std::string captioner_checkpoint_path(const std::string& dir, int epoch) {
  return (std::filesystem::path(dir) /
          ("captioner_epoch_" + std::to_string(epoch) + ".ckpt"))
      .string();
}

inline void write_loss_csv(const std::string& path, const CaptionTrainTrace& trace) {
  std::ostringstream out;
  out << "epoch,caption_loss,alignment_loss,total\n";
  out.precision(17);
  for (std::size_t e = 0; e < trace.epochs.size(); ++e) {
    out << e << ',' << trace.epochs[e].caption_loss << ','
        << trace.epochs[e].alignment_loss << ',' << trace.epochs[e].total << '\n';
  }
  write_text(path, out.str());
}

inline void write_classifier_csv(const std::string& path, const FinetuneTrace& trace) {
  std::ostringstream out;
  out << "epoch,phase,loss\n";
  out.precision(17);
  for (std::size_t e = 0; e < trace.head_loss.size(); ++e)
    out << e << ",head," << trace.head_loss[e] << '\n';
  for (std::size_t e = 0; e < trace.full_loss.size(); ++e)
    out << e << ",full," << trace.full_loss[e] << '\n';
  write_text(path, out.str());
}

}  // namespace train_detail

struct RunResult {
  RunConfig config;  // resolved, environment override applied
  std::string encoder_checkpoint;
  std::string final_checkpoint;
  FinetuneTrace classifier_trace;   // empty when stage A was loaded from disk
  CaptionTrainTrace caption_trace;  // full history, restored epochs included
};

// Two-stage run rooted at output_dir: fine-tune the encoder on the
// multi-label signal, freeze it, precompute the saliency targets, then
// train the captioner with one checkpoint per epoch. Everything the run
// decides is on disk: config.json (the resolved echo), encoder.ckpt,
// targets.ckpt, captioner_epoch_N.ckpt, classifier_loss.csv, and
// caption_loss.csv. Rerunning with the same directory resumes after the
// last finished epoch; presenting a different configuration for an
// existing directory is an error.
inline RunResult run_training(RunConfig config) {
  if (const char* dir = std::getenv(kOutputDirEnvVar); dir != nullptr && *dir != '\0')
    config.output_dir = dir;
  require_valid(config);

  namespace fs = std::filesystem;
  fs::create_directories(config.output_dir);
  const std::string echo = run_config_json(config).dump(2) + "\n";
  const std::string echo_path = (fs::path(config.output_dir) / "config.json").string();
  if (fs::exists(echo_path)) {
    std::ifstream in(echo_path);
    require(in.good(), "cannot read " + echo_path);
    nlohmann::ordered_json stored;
    try {
      stored = nlohmann::ordered_json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(echo_path + " is not valid JSON: " + e.what());
    }
    const nlohmann::ordered_json current = run_config_json(config);
    if (stored != current) {
      std::string message = "resume rejected, configuration differs from " + echo_path + ":";
      for (const auto& [key, value] : current.items()) {
        if (!stored.contains(key) || stored.at(key) != value)
          message += "\n  - " + key;
      }
      for (const auto& [key, value] : stored.items()) {
        if (!current.contains(key)) message += "\n  - " + key;
      }
      throw std::invalid_argument(message);
    }
  } else {
    train_detail::write_text(echo_path, echo);
  }

  Dataset dataset = load_coco_format(config.dataset_json, config.image_dir);
  require(!dataset.samples.empty(), "dataset has no usable samples");
  CategoryMapping mapping = CategoryMapping::load(config.mapping_path);
  Vocabulary vocab = Vocabulary::build(corpus_tokens(dataset), config.min_word_count);
  encode_dataset(dataset, vocab, mapping, config.max_caption_tokens);

  RunResult result;
  result.config = config;

  // Stage A: multi-label encoder fine-tune, or reuse of a finished one.
  ConvEncoder encoder(encoder_config_of(config, mapping.category_count()), config.seed);
  result.encoder_checkpoint = (fs::path(config.output_dir) / "encoder.ckpt").string();
  if (fs::exists(result.encoder_checkpoint)) {
    Checkpoint stored = load_checkpoint(result.encoder_checkpoint);
    require(stored.meta.value("config", nlohmann::ordered_json()) ==
                train_detail::stage_a_config_json(config),
            "resume rejected: " + result.encoder_checkpoint +
                " was trained with a different configuration");
    restore_parameters(stored, encoder.parameters());
  } else {
    FinetuneConfig ft;
    ft.head_epochs = config.head_epochs;
    ft.full_epochs = config.full_epochs;
    ft.head_lr = config.head_lr;
    ft.full_lr = config.full_lr;
    ft.batch_size = config.batch_size;
    ft.seed = config.seed;
    result.classifier_trace = finetune_multilabel(encoder, dataset, ft);
    train_detail::write_classifier_csv(
        (fs::path(config.output_dir) / "classifier_loss.csv").string(),
        result.classifier_trace);
    Checkpoint ckpt;
    ckpt.meta["stage"] = "encoder";
    ckpt.meta["config"] = train_detail::stage_a_config_json(config);
    ckpt.meta["head_loss"] = result.classifier_trace.head_loss;
    ckpt.meta["full_loss"] = result.classifier_trace.full_loss;
    add_parameters(ckpt, encoder.parameters());
    save_checkpoint(result.encoder_checkpoint, ckpt);
  }

  // Saliency targets from the frozen encoder, cached on disk.
  const std::string targets_path = (fs::path(config.output_dir) / "targets.ckpt").string();
  SaliencyTable targets;
  if (fs::exists(targets_path)) {
    targets = restore_saliency_targets(load_checkpoint(targets_path));
  } else {
    targets = precompute_targets(dataset, encoder, mapping);
    Checkpoint ckpt;
    ckpt.meta["stage"] = "targets";
    add_saliency_targets(ckpt, targets);
    save_checkpoint(targets_path, ckpt);
  }

  // Stage B: captioner training against the frozen encoder.
  Captioner model(model_config_of(config, vocab.size(), encoder.config().feature_dim()),
                  config.seed);
  Adam opt(config.captioner_lr, config.clip_norm);
  CaptionTrainConfig tc;
  tc.loss.lambda = config.lambda;
  tc.sampling = config.sampling();
  tc.clip_norm = config.clip_norm;
  tc.epochs = config.epochs;
  tc.batch_size = config.batch_size;
  tc.seed = config.seed;
  tc.skip_degenerate_targets = config.skip_degenerate_targets;

  for (int epoch = config.epochs - 1; epoch >= 0; --epoch) {
    const std::string path =
        train_detail::captioner_checkpoint_path(config.output_dir, epoch);
    if (!fs::exists(path)) continue;
    Checkpoint stored = load_checkpoint(path);
    require(stored.meta.value("config", nlohmann::ordered_json()) ==
                run_config_json(config),
            "resume rejected: " + path + " was trained with a different configuration");
    restore_parameters(stored, model.parameters());
    restore_optimizer(stored, opt);
    for (const auto& row : stored.meta.at("loss_history"))
      result.caption_trace.epochs.push_back({row.at(0).get<double>(),
                                             row.at(1).get<double>(),
                                             row.at(2).get<double>()});
    tc.start_epoch = epoch + 1;
    break;
  }

  const std::string loss_csv = (fs::path(config.output_dir) / "caption_loss.csv").string();
  auto on_epoch = [&](int epoch, const EpochLoss& loss) {
    result.caption_trace.epochs.push_back(loss);
    train_detail::write_loss_csv(loss_csv, result.caption_trace);
    Checkpoint ckpt;
    ckpt.meta["stage"] = "captioner";
    ckpt.meta["config"] = run_config_json(config);
    ckpt.meta["epoch"] = epoch;
    auto history = nlohmann::ordered_json::array();
    for (const auto& row : result.caption_trace.epochs)
      history.push_back({row.caption_loss, row.alignment_loss, row.total});
    ckpt.meta["loss_history"] = history;
    ckpt.meta["vocab"] = vocab.words_in_order();
    ckpt.meta["mapping"] = train_detail::mapping_json(mapping);
    add_parameters(ckpt, model.parameters());
    add_optimizer(ckpt, opt);
    save_checkpoint(train_detail::captioner_checkpoint_path(config.output_dir, epoch),
                    ckpt);
  };

  CaptionTrainTrace fresh =
      train_captioner(encoder, model, dataset, targets, tc, opt, on_epoch);
  (void)fresh;  // rows already appended through on_epoch
  if (tc.start_epoch >= config.epochs) train_detail::write_loss_csv(loss_csv, result.caption_trace);

  result.final_checkpoint =
      train_detail::captioner_checkpoint_path(config.output_dir, config.epochs - 1);
  return result;
}

// ---------------------------------------------------------------------------
// Loading a finished captioner checkpoint back into usable objects.

struct TrainedBundle {
  RunConfig config;
  ConvEncoder encoder;
  Captioner model;
  Vocabulary vocab;
  CategoryMapping mapping;
  int epoch = -1;
};

// Rebuilds encoder, captioner, vocabulary, and word mapping from one
// captioner checkpoint plus the encoder checkpoint sitting next to it.
inline TrainedBundle load_bundle(const std::string& captioner_checkpoint) {
  Checkpoint stored = load_checkpoint(captioner_checkpoint);
  require(stored.meta.value("stage", "") == "captioner",
          captioner_checkpoint + " is not a captioner checkpoint");
  RunConfig config = run_config_from_json(stored.meta.at("config"));
  Vocabulary vocab =
      Vocabulary::from_words(stored.meta.at("vocab").get<std::vector<std::string>>());
  CategoryMapping mapping = train_detail::mapping_from_json(stored.meta.at("mapping"));

  const std::string encoder_path =
      (std::filesystem::path(captioner_checkpoint).parent_path() / "encoder.ckpt")
          .string();
  ConvEncoder encoder(encoder_config_of(config, mapping.category_count()), config.seed);
  restore_parameters(load_checkpoint(encoder_path), encoder.parameters());

  Captioner model(model_config_of(config, vocab.size(), encoder.config().feature_dim()),
                  config.seed);
  restore_parameters(stored, model.parameters());

  return TrainedBundle{std::move(config), std::move(encoder), std::move(model),
                       std::move(vocab), std::move(mapping),
                       stored.meta.value("epoch", -1)};
}

}  // namespace capalign
