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

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "capalign/metrics.hpp"
#include "capalign/saliency.hpp"
#include "capalign/toy_data.hpp"
#include "capalign/train.hpp"

namespace {

using namespace capalign;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Typed parsing for the key-value config file. Every value must consume
// the whole token; trailing junk is an error.

template <class T>
T parse_number(const std::string& text, const std::string& key);

template <>
int parse_number<int>(const std::string& text, const std::string& key) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  require(used == text.size(), "config file: bad integer for '" + key + "': " + text);
  return v;
}

template <>
double parse_number<double>(const std::string& text, const std::string& key) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(text, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  require(used == text.size(), "config file: bad number for '" + key + "': " + text);
  return v;
}

template <>
std::uint64_t parse_number<std::uint64_t>(const std::string& text,
                                          const std::string& key) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = std::string::npos;
  }
  require(used == text.size(), "config file: bad integer for '" + key + "': " + text);
  return v;
}

bool parse_bool(const std::string& text, const std::string& key) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw std::invalid_argument("config file: bad boolean for '" + key + "': " + text);
}

std::vector<int> parse_int_list(const std::string& text, const std::string& key) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<int>(item, key));
  require(!out.empty(), "config file: empty list for '" + key + "'");
  return out;
}

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t");
  return s.substr(begin, end - begin + 1);
}

// `key = value` per line; blank lines and '#' comments are skipped.
std::map<std::string, std::string> read_key_value_file(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "cannot open config file: " + path);
  std::map<std::string, std::string> entries;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string stripped = trim(line);
    if (stripped.empty() || stripped[0] == '#') continue;
    const auto eq = stripped.find('=');
    require(eq != std::string::npos, "config file " + path + " line " +
                                         std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    require(!key.empty(), "config file " + path + " line " + std::to_string(lineno) +
                              ": empty key");
    require(entries.emplace(key, value).second,
            "config file " + path + ": duplicate key '" + key + "'");
  }
  return entries;
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::map<std::string, std::function<void(const std::string&, const std::string&)>>
      setters;
  auto num = [&](const std::string& key, auto* field) {
    setters[key] = [field, key](const std::string& v, const std::string&) {
      *field = parse_number<std::remove_pointer_t<decltype(field)>>(v, key);
    };
  };
  num("input_size", &cfg.input_size);
  num("frozen_blocks", &cfg.frozen_blocks);
  num("embed_dim", &cfg.embed_dim);
  num("hidden_dim", &cfg.hidden_dim);
  num("attn_hidden_dim", &cfg.attn_hidden_dim);
  num("attn_width", &cfg.attn_width);
  num("max_caption_tokens", &cfg.max_caption_tokens);
  num("lambda", &cfg.lambda);
  num("captioner_lr", &cfg.captioner_lr);
  num("head_lr", &cfg.head_lr);
  num("full_lr", &cfg.full_lr);
  num("clip_norm", &cfg.clip_norm);
  num("head_epochs", &cfg.head_epochs);
  num("full_epochs", &cfg.full_epochs);
  num("epochs", &cfg.epochs);
  num("batch_size", &cfg.batch_size);
  num("beam_size", &cfg.beam_size);
  num("sampling_start", &cfg.sampling_start);
  num("sampling_floor", &cfg.sampling_floor);
  num("sampling_decay_epochs", &cfg.sampling_decay_epochs);
  num("min_word_count", &cfg.min_word_count);
  num("seed", &cfg.seed);
  setters["channels"] = [&cfg](const std::string& v, const std::string& k) {
    cfg.channels = parse_int_list(v, k);
  };
  setters["skip_degenerate_targets"] = [&cfg](const std::string& v,
                                              const std::string& k) {
    cfg.skip_degenerate_targets = parse_bool(v, k);
  };
  auto text = [&](const std::string& key, std::string* field) {
    setters[key] = [field](const std::string& v, const std::string&) { *field = v; };
  };
  text("dataset_json", &cfg.dataset_json);
  text("image_dir", &cfg.image_dir);
  text("mapping_path", &cfg.mapping_path);
  text("output_dir", &cfg.output_dir);

  for (const auto& [key, value] : read_key_value_file(path)) {
    auto it = setters.find(key);
    require(it != setters.end(), "config file " + path + ": unknown key '" + key + "'");
    it->second(value, key);
  }
}

// ---------------------------------------------------------------------------
// Subcommands.

// Missing input files are runtime failures (exit 2), unlike content that
// fails validation (exit 1).
void require_readable(const std::string& path) {
  if (!fs::exists(path) || fs::is_directory(path))
    throw std::runtime_error("cannot open " + path);
}

int run_train(const RunConfig& cfg) {
  RunResult result = run_training(cfg);
  std::cout << "encoder checkpoint: " << result.encoder_checkpoint << '\n';
  std::cout << "final checkpoint:   " << result.final_checkpoint << '\n';
  if (!result.caption_trace.epochs.empty()) {
    const EpochLoss& last = result.caption_trace.epochs.back();
    std::cout << "final losses: caption " << last.caption_loss << ", alignment "
              << last.alignment_loss << ", total " << last.total << '\n';
  }
  return 0;
}

std::string joined_caption(const Vocabulary& vocab, const std::vector<int>& tokens) {
  std::string text;
  for (const std::string& w : vocab.decode(tokens)) {
    if (!text.empty()) text += ' ';
    text += w;
  }
  return text;
}

int run_caption(const std::string& checkpoint, const std::string& image_path,
                int beam_size, const std::string& overlay_dir, bool as_json) {
  require_readable(image_path);
  TrainedBundle bundle = load_bundle(checkpoint);
  const ImageRgb image = read_png(image_path);
  const FeatureGrid grid = bundle.encoder.extract_features(image);
  const int beam = beam_size > 0 ? beam_size : bundle.config.beam_size;
  DecodeResult result =
      beam_search(bundle.model, grid.V, beam, bundle.config.max_caption_tokens);
  const std::string caption = joined_caption(bundle.vocab, result.tokens);

  if (as_json) {
    std::cout << caption_json_line(-1, caption, result.log_prob, result.attention)
              << '\n';
  } else {
    std::cout << caption << '\n';
  }

  if (!overlay_dir.empty()) {
    fs::create_directories(overlay_dir);
    for (std::size_t i = 0; i < result.tokens.size(); ++i) {
      if (bundle.vocab.is_special(result.tokens[i])) continue;
      const std::string word = bundle.vocab.word(result.tokens[i]);
      const std::string name = "word_" + std::to_string(i) + "_" + word + ".pgm";
      write_pgm((fs::path(overlay_dir) / name).string(),
                render_attention_overlay(image, result.attention[i], grid.width,
                                         grid.height));
    }
  }
  return 0;
}

int run_evaluate(const std::string& checkpoint, const std::string& dataset_json,
                 const std::string& image_dir, int beam_size,
                 const std::string& out_path) {
  require_readable(dataset_json);
  TrainedBundle bundle = load_bundle(checkpoint);
  Dataset dataset = load_coco_format(dataset_json, image_dir);
  const int beam = beam_size > 0 ? beam_size : bundle.config.beam_size;
  EvalReport report =
      evaluate(bundle.encoder, bundle.model, bundle.vocab, dataset, beam);
  std::cout << report.to_table();
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    require(out.good(), "cannot write report: " + out_path);
    out << report.to_json().dump(2) << '\n';
  }
  return 0;
}

// Words resolve when the mapping knows them and the decoded caption
// contains them; each resolved word gets a saliency overlay and a
// predicted-attention overlay, and one sidecar describes the whole set.
int run_visualize(const std::string& checkpoint, const std::string& image_path,
                  const std::vector<std::string>& words, int beam_size,
                  const std::string& out_dir) {
  require(!words.empty(), "no words requested");
  require_readable(image_path);
  TrainedBundle bundle = load_bundle(checkpoint);
  const ImageRgb image = read_png(image_path);
  const FeatureGrid grid = bundle.encoder.extract_features(image);
  const int beam = beam_size > 0 ? beam_size : bundle.config.beam_size;
  DecodeResult result =
      beam_search(bundle.model, grid.V, beam, bundle.config.max_caption_tokens);
  const std::string caption = joined_caption(bundle.vocab, result.tokens);
  std::cout << caption << '\n';

  fs::create_directories(out_dir);
  auto entries = nlohmann::ordered_json::array();
  auto skipped = nlohmann::ordered_json::array();
  for (const std::string& word : words) {
    const int category = bundle.mapping.category(word);
    if (category < 0) {
      std::cerr << "warning: '" << word << "' is not a mapped visual word, skipping\n";
      skipped.push_back(word);
      continue;
    }
    int step = -1;
    if (bundle.vocab.contains(word)) {
      const int id = bundle.vocab.id(word);
      for (std::size_t i = 0; i < result.tokens.size(); ++i) {
        if (result.tokens[i] == id) {
          step = static_cast<int>(i);
          break;
        }
      }
    }
    if (step < 0) {
      std::cerr << "warning: '" << word << "' does not appear in the decoded caption, "
                << "skipping\n";
      skipped.push_back(word);
      continue;
    }

    const SaliencyTarget target = gradcam(bundle.encoder, image, category);
    const std::string saliency_name = word + "_saliency.pgm";
    const std::string attention_name = word + "_attention.pgm";
    write_pgm((fs::path(out_dir) / saliency_name).string(),
              render_attention_overlay(image, target.alpha, grid.width, grid.height));
    write_pgm((fs::path(out_dir) / attention_name).string(),
              render_attention_overlay(image, result.attention[static_cast<std::size_t>(step)],
                                       grid.width, grid.height));

    nlohmann::ordered_json entry;
    entry["word"] = word;
    entry["category"] = bundle.mapping.category_name(category);
    entry["step"] = step;
    entry["saliency_pgm"] = saliency_name;
    entry["attention_pgm"] = attention_name;
    entry["degenerate_saliency"] = target.degenerate;
    entries.push_back(entry);
  }

  nlohmann::ordered_json sidecar;
  sidecar["image"] = image_path;
  sidecar["caption"] = caption;
  sidecar["grid"] = {grid.width, grid.height};
  sidecar["words"] = entries;
  sidecar["skipped"] = skipped;
  const std::string sidecar_path = (fs::path(out_dir) / "overlays.json").string();
  std::ofstream js(sidecar_path);
  require(js.good(), "cannot write sidecar: " + sidecar_path);
  js << sidecar.dump(2) << '\n';
  return 0;
}

int run_make_toy_data(const ToyConfig& cfg, std::uint64_t seed, const std::string& out) {
  ToyDataset toy = generate_toy_dataset(cfg, seed);
  write_toy_dataset(toy, out);
  std::cout << "wrote " << toy.dataset.samples.size() << " images under " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Image captioning with attention supervised by classifier saliency"};
  app.require_subcommand(1);

  // train -------------------------------------------------------------
  auto* train = app.add_subcommand(
      "train", "Run the two-stage training pipeline into an output directory");
  RunConfig flag_cfg;
  std::string config_file;
  std::vector<std::pair<CLI::Option*, std::function<void(RunConfig&)>>> overrides;
  train->add_option("--config", config_file,
                    "key = value file with any of the flags below; explicit flags win");
  auto bind = [&](const std::string& flag, auto member, const std::string& help) {
    CLI::Option* opt = train->add_option(flag, flag_cfg.*member, help);
    overrides.emplace_back(
        opt, [&flag_cfg, member](RunConfig& cfg) { cfg.*member = flag_cfg.*member; });
    return opt;
  };
  bind("--input-size", &RunConfig::input_size, "image side length in pixels");
  bind("--channels", &RunConfig::channels, "conv block widths, comma separated")
      ->delimiter(',');
  bind("--frozen-blocks", &RunConfig::frozen_blocks,
       "leading conv blocks kept frozen in the full fine-tune phase");
  bind("--embed-dim", &RunConfig::embed_dim, "word embedding width");
  bind("--hidden-dim", &RunConfig::hidden_dim, "language LSTM width");
  bind("--attn-hidden-dim", &RunConfig::attn_hidden_dim, "attention LSTM width");
  bind("--attn-width", &RunConfig::attn_width, "additive attention hidden width");
  bind("--max-caption-tokens", &RunConfig::max_caption_tokens,
       "content tokens kept per caption");
  bind("--lambda", &RunConfig::lambda, "weight of the attention alignment penalty");
  bind("--skip-degenerate-targets", &RunConfig::skip_degenerate_targets,
       "drop uniform-fallback saliency targets from the penalty");
  bind("--captioner-lr", &RunConfig::captioner_lr, "captioner learning rate");
  bind("--head-lr", &RunConfig::head_lr, "classifier head learning rate");
  bind("--full-lr", &RunConfig::full_lr, "classifier full fine-tune learning rate");
  bind("--clip-norm", &RunConfig::clip_norm, "global gradient-norm clip, 0 disables");
  bind("--head-epochs", &RunConfig::head_epochs, "classifier head-only epochs");
  bind("--full-epochs", &RunConfig::full_epochs, "classifier full fine-tune epochs");
  bind("--epochs", &RunConfig::epochs, "captioner epochs");
  bind("--batch-size", &RunConfig::batch_size, "training batch size");
  bind("--beam-size", &RunConfig::beam_size, "beam width recorded for decoding");
  bind("--sampling-start", &RunConfig::sampling_start,
       "initial probability of feeding the ground-truth previous token");
  bind("--sampling-floor", &RunConfig::sampling_floor, "final teacher probability");
  bind("--sampling-decay-epochs", &RunConfig::sampling_decay_epochs,
       "epochs over which the teacher probability decays");
  bind("--min-word-count", &RunConfig::min_word_count,
       "words must appear more often than this to enter the vocabulary");
  bind("--seed", &RunConfig::seed, "master random seed");
  bind("--dataset-json", &RunConfig::dataset_json, "annotation JSON path");
  bind("--image-dir", &RunConfig::image_dir, "directory with the PNG images");
  bind("--mapping-path", &RunConfig::mapping_path, "word<TAB>category mapping file");
  bind("--output-dir", &RunConfig::output_dir,
       "run directory (env " + std::string(kOutputDirEnvVar) + " overrides)");

  // caption -----------------------------------------------------------
  auto* caption = app.add_subcommand("caption", "Caption one image from a checkpoint");
  std::string cap_checkpoint, cap_image, cap_overlay_dir;
  int cap_beam = 0;
  bool cap_json = false;
  caption->add_option("--checkpoint", cap_checkpoint, "captioner checkpoint")
      ->required();
  caption->add_option("--image", cap_image, "PNG image to caption")->required();
  caption->add_option("--beam", cap_beam, "beam width; 0 uses the trained default");
  caption->add_option("--overlay-dir", cap_overlay_dir,
                      "write one attention overlay per generated word here");
  caption->add_flag("--json", cap_json, "print a JSON line with attention maps");

  // evaluate ----------------------------------------------------------
  auto* evaluate = app.add_subcommand("evaluate", "Score a dataset with a checkpoint");
  std::string ev_checkpoint, ev_dataset, ev_images, ev_out;
  int ev_beam = 0;
  evaluate->add_option("--checkpoint", ev_checkpoint, "captioner checkpoint")
      ->required();
  evaluate->add_option("--dataset-json", ev_dataset, "annotation JSON path")->required();
  evaluate->add_option("--image-dir", ev_images, "directory with the PNG images")
      ->required();
  evaluate->add_option("--beam", ev_beam, "beam width; 0 uses the trained default");
  evaluate->add_option("--out", ev_out, "also write the JSON report here");

  // visualize-attention ------------------------------------------------
  auto* visualize = app.add_subcommand(
      "visualize-attention",
      "Write saliency and predicted-attention overlays for chosen words");
  std::string vz_checkpoint, vz_image, vz_out_dir = ".";
  std::vector<std::string> vz_words;
  int vz_beam = 0;
  visualize->add_option("--checkpoint", vz_checkpoint, "captioner checkpoint")
      ->required();
  visualize->add_option("--image", vz_image, "PNG image to inspect")->required();
  visualize->add_option("--words", vz_words, "words to visualize, comma separated")
      ->required()
      ->delimiter(',');
  visualize->add_option("--beam", vz_beam, "beam width; 0 uses the trained default");
  visualize->add_option("--out-dir", vz_out_dir, "directory for overlays and sidecar");

  // make-toy-data ------------------------------------------------------
  auto* toy = app.add_subcommand("make-toy-data",
                                 "Generate the synthetic shapes dataset on disk");
  ToyConfig toy_cfg;
  std::uint64_t toy_seed = 0;
  std::string toy_out;
  toy->add_option("--out", toy_out, "output directory")->required();
  toy->add_option("--images", toy_cfg.num_images, "number of images");
  toy->add_option("--grid", toy_cfg.grid, "cells per image side");
  toy->add_option("--cell-pixels", toy_cfg.cell_pixels, "pixels per cell side");
  toy->add_option("--categories", toy_cfg.num_categories, "shape categories used");
  toy->add_option("--min-shapes", toy_cfg.min_shapes, "minimum shapes per image");
  toy->add_option("--max-shapes", toy_cfg.max_shapes, "maximum shapes per image");
  toy->add_option("--seed", toy_seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      RunConfig cfg;
      if (!config_file.empty()) apply_config_file(cfg, config_file);
      for (const auto& [opt, apply] : overrides) {
        if (opt->count() > 0) apply(cfg);
      }
      return run_train(cfg);
    }
    if (caption->parsed())
      return run_caption(cap_checkpoint, cap_image, cap_beam, cap_overlay_dir, cap_json);
    if (evaluate->parsed())
      return run_evaluate(ev_checkpoint, ev_dataset, ev_images, ev_beam, ev_out);
    if (visualize->parsed())
      return run_visualize(vz_checkpoint, vz_image, vz_words, vz_beam, vz_out_dir);
    if (toy->parsed()) return run_make_toy_data(toy_cfg, toy_seed, toy_out);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
