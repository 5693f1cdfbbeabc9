// Copyright 2026 The TaskSeg Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//
// Flat key=value configuration ('#' starts a comment line). Keys are
// namespaced: model.*, loss.*, train.*, post.*, contrastive.window.

#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

#include "taskseg/errors.hpp"
#include "taskseg/model.hpp"

namespace taskseg {

struct Config {
  // model
  int model_dim = 64;
  int model_queries = 16;
  int model_text_len = 12;
  int model_text_ctx = 4;
  int model_layers = 1;
  int model_encoder_depth = 1;
  int model_context_width = 16;
  int model_attn_heads = 1;
  bool model_use_task_token = true;
  bool model_task_guided_init = true;
  bool model_use_text_context = true;
  int model_num_classes = 0;  // 0 = take from the dataset

  // loss
  float loss_contrastive = 0.5f;
  float loss_cls = 2.0f;
  float loss_bce = 5.0f;
  float loss_dice = 5.0f;
  float loss_no_object = 0.1f;
  float loss_tau_init_inv = 14.285714f;

  int contrastive_window = 4;

  // train
  long train_iters = 2500;
  float train_lr = 2e-3f;
  float train_weight_decay = 0.1f;
  std::uint64_t train_seed = 0;
  std::string train_dataset = "data";
  std::string train_checkpoint = "checkpoint.tsg";
  std::string train_trace = "trace.tsv";

  // post-processing
  float post_object_threshold = 0.8f;
  float post_overlap_threshold = 0.8f;
  int post_instance_topk = 16;

  ModelConfig model_config(int num_classes) const {
    ModelConfig mc;
    mc.dim = model_dim;
    mc.queries = model_queries;
    mc.text_len = model_text_len;
    mc.text_ctx = model_text_ctx;
    mc.layers = model_layers;
    mc.encoder_depth = model_encoder_depth;
    mc.context_width = model_context_width;
    mc.attn_heads = model_attn_heads;
    mc.num_classes = num_classes;
    mc.use_task_token = model_use_task_token;
    mc.task_guided_init = model_task_guided_init;
    mc.use_text_context = model_use_text_context;
    return mc;
  }

  void validate() const {
    if (model_queries != model_text_len + model_text_ctx)
      throw ConfigError("model.queries must equal model.text_len + model.text_ctx");
    if (model_dim <= 0 || model_queries <= 0 || model_text_len <= 0 || model_text_ctx < 0 ||
        model_layers <= 0 || model_encoder_depth <= 0 || model_context_width < 2 ||
        model_attn_heads <= 0 || contrastive_window <= 0 || train_iters <= 0 ||
        post_instance_topk < 0)
      throw ConfigError("config: counts must be positive");
    if (loss_contrastive < 0 || loss_cls < 0 || loss_bce < 0 || loss_dice < 0 ||
        loss_no_object < 0)
      throw ConfigError("config: loss weights must be non-negative");
    if (!(loss_tau_init_inv > 0)) throw ConfigError("config: loss.tau_init_inv must be positive");
  }

  void set(const std::string& key, const std::string& value) {
    auto as_int = [&]() -> long {
      try {
        return std::stol(value);
      } catch (...) {
        throw ConfigError("bad integer for " + key + ": '" + value + "'");
      }
    };
    auto as_float = [&]() -> float {
      try {
        return std::stof(value);
      } catch (...) {
        throw ConfigError("bad number for " + key + ": '" + value + "'");
      }
    };
    auto as_bool = [&]() -> bool {
      if (value == "1" || value == "true") return true;
      if (value == "0" || value == "false") return false;
      throw ConfigError("bad boolean for " + key + ": '" + value + "'");
    };
    if (key == "model.dim") model_dim = static_cast<int>(as_int());
    else if (key == "model.queries") model_queries = static_cast<int>(as_int());
    else if (key == "model.text_len") model_text_len = static_cast<int>(as_int());
    else if (key == "model.text_ctx") model_text_ctx = static_cast<int>(as_int());
    else if (key == "model.layers") model_layers = static_cast<int>(as_int());
    else if (key == "model.encoder_depth") model_encoder_depth = static_cast<int>(as_int());
    else if (key == "model.context_width") model_context_width = static_cast<int>(as_int());
    else if (key == "model.attn_heads") model_attn_heads = static_cast<int>(as_int());
    else if (key == "model.use_task_token") model_use_task_token = as_bool();
    else if (key == "model.task_guided_init") model_task_guided_init = as_bool();
    else if (key == "model.use_text_context") model_use_text_context = as_bool();
    else if (key == "model.num_classes") model_num_classes = static_cast<int>(as_int());
    else if (key == "loss.contrastive") loss_contrastive = as_float();
    else if (key == "loss.cls") loss_cls = as_float();
    else if (key == "loss.bce") loss_bce = as_float();
    else if (key == "loss.dice") loss_dice = as_float();
    else if (key == "loss.no_object") loss_no_object = as_float();
    else if (key == "loss.tau_init_inv") loss_tau_init_inv = as_float();
    else if (key == "contrastive.window") contrastive_window = static_cast<int>(as_int());
    else if (key == "train.iters") train_iters = as_int();
    else if (key == "train.lr") train_lr = as_float();
    else if (key == "train.weight_decay") train_weight_decay = as_float();
    else if (key == "train.seed") train_seed = static_cast<std::uint64_t>(as_int());
    else if (key == "train.dataset") train_dataset = value;
    else if (key == "train.checkpoint") train_checkpoint = value;
    else if (key == "train.trace") train_trace = value;
    else if (key == "post.object_threshold") post_object_threshold = as_float();
    else if (key == "post.overlap_threshold") post_overlap_threshold = as_float();
    else if (key == "post.instance_topk") post_instance_topk = static_cast<int>(as_int());
    else throw ConfigError("unknown config key: " + key);
  }

  static Config parse_string(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line;
    long line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(line_no) + " is not key=value");
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_string(text);
  }

  std::string serialize() const {
    std::ostringstream os;
    os << "model.dim=" << model_dim << '\n'
       << "model.queries=" << model_queries << '\n'
       << "model.text_len=" << model_text_len << '\n'
       << "model.text_ctx=" << model_text_ctx << '\n'
       << "model.layers=" << model_layers << '\n'
       << "model.encoder_depth=" << model_encoder_depth << '\n'
       << "model.context_width=" << model_context_width << '\n'
       << "model.attn_heads=" << model_attn_heads << '\n'
       << "model.use_task_token=" << (model_use_task_token ? 1 : 0) << '\n'
       << "model.task_guided_init=" << (model_task_guided_init ? 1 : 0) << '\n'
       << "model.use_text_context=" << (model_use_text_context ? 1 : 0) << '\n'
       << "model.num_classes=" << model_num_classes << '\n'
       << "loss.contrastive=" << loss_contrastive << '\n'
       << "loss.cls=" << loss_cls << '\n'
       << "loss.bce=" << loss_bce << '\n'
       << "loss.dice=" << loss_dice << '\n'
       << "loss.no_object=" << loss_no_object << '\n'
       << "loss.tau_init_inv=" << loss_tau_init_inv << '\n'
       << "contrastive.window=" << contrastive_window << '\n'
       << "train.iters=" << train_iters << '\n'
       << "train.lr=" << train_lr << '\n'
       << "train.weight_decay=" << train_weight_decay << '\n'
       << "train.seed=" << train_seed << '\n'
       << "train.dataset=" << train_dataset << '\n'
       << "train.checkpoint=" << train_checkpoint << '\n'
       << "train.trace=" << train_trace << '\n'
       << "post.object_threshold=" << post_object_threshold << '\n'
       << "post.overlap_threshold=" << post_overlap_threshold << '\n'
       << "post.instance_topk=" << post_instance_topk << '\n';
    return os.str();
  }
};

}  // namespace taskseg
