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
// The joint training loop: per iteration, sample an image and a task, derive
// the ground truth, forward, match per prediction set, and accumulate the
// weighted objective. Batch size is 1; the contrastive loss runs over pooled
// query pairs gathered across a window of iterations, with one optimizer step
// per window. Everything is single-threaded and deterministic given the seed.

#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/config.hpp"
#include "taskseg/dataset.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/losses.hpp"
#include "taskseg/matcher.hpp"
#include "taskseg/metrics.hpp"
#include "taskseg/model.hpp"
#include "taskseg/postproc.hpp"
#include "taskseg/tensor.hpp"

namespace taskseg {

/// Adaptive-moment optimizer with decoupled weight decay.
class AdamW {
 public:
  AdamW(double lr, double weight_decay) : lr_(lr), wd_(weight_decay) {}

  void step(ParamStore& store) {
    if (m_.empty()) {
      m_.resize(store.size());
      v_.resize(store.size());
      for (std::size_t i = 0; i < store.size(); ++i) {
        m_[i].assign(store.params()[i].value().size(), 0.0);
        v_[i].assign(store.params()[i].value().size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      ad::Tensor p = store.params()[i];
      auto& val = p.mutable_value();
      const auto& g = p.grad();
      for (std::size_t j = 0; j < val.size(); ++j) {
        const double grad = g.size() == val.size() ? static_cast<double>(g[j]) : 0.0;
        m_[i][j] = 0.9 * m_[i][j] + 0.1 * grad;
        v_[i][j] = 0.999 * v_[i][j] + 0.001 * grad * grad;
        const double update = (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + 1e-8);
        val[j] = static_cast<float>(val[j] - lr_ * (update + wd_ * val[j]));
      }
    }
  }

 private:
  double lr_, wd_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// --- checkpoints -------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'T', 'S', 'G', 'C', 'K', 'P', 'T', '1'};

inline std::string serialize_class_table(const ClassTable& classes) {
  std::string out;
  for (const auto& e : classes.entries)
    out += "class\t" + std::to_string(e.id) + "\t" + e.name + "\t" +
           (e.is_thing ? "thing" : "stuff") + "\n";
  return out;
}

inline ClassTable parse_class_table(const std::string& text) {
  ClassTable t;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    if (f.size() != 4 || f[0] != "class") throw FormatError("bad class table line: " + line);
    t.entries.push_back({std::stoi(f[1]), f[2], f[3] == "thing"});
  }
  t.validate();
  return t;
}

/// Checkpoint = magic, config block, class table block, parameter blob.
inline void save_checkpoint(const std::string& path, const Model& model, const Config& cfg,
                            const ClassTable& classes) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  auto append_block = [&out](const std::string& block) {
    const auto len = static_cast<std::uint32_t>(block.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((len >> (8 * i)) & 0xff));
    out += block;
  };
  Config stamped = cfg;
  stamped.model_num_classes = model.cfg.num_classes;
  append_block(stamped.serialize());
  append_block(serialize_class_table(classes));
  out += model.store.serialize();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

struct Checkpoint {
  Config config;
  ClassTable classes;
  std::string param_blob;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (blob.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(blob.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw FormatError("unknown checkpoint format/version: " + path);
  std::size_t at = sizeof(kCheckpointMagic);
  auto read_block = [&]() {
    if (at + 4 > blob.size()) throw FormatError("truncated checkpoint: " + path);
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i)
      len |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(blob[at + static_cast<std::size_t>(i)]))
             << (8 * i);
    at += 4;
    if (at + len > blob.size()) throw FormatError("truncated checkpoint: " + path);
    std::string block = blob.substr(at, len);
    at += len;
    return block;
  };
  Checkpoint ck;
  ck.config = Config::parse_string(read_block());
  ck.classes = parse_class_table(read_block());
  ck.param_blob = blob.substr(at);
  return ck;
}

/// Rebuilds the model a checkpoint was saved from and loads its parameters.
inline Model load_model(const Checkpoint& ck) {
  Model m = build_model(ck.config.model_config(ck.config.model_num_classes), ck.classes,
                        Rng(ck.config.train_seed).fork("init"), ck.config.loss_tau_init_inv);
  m.store.load(ck.param_blob);
  return m;
}

// --- training ----------------------------------------------------------------

struct TraceRow {
  long iteration = 0;
  double total = 0.0, contrastive = 0.0, cls = 0.0, bce = 0.0, dice = 0.0;
};

inline void write_trace(const std::string& path, const std::vector<TraceRow>& rows) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for writing: " + path);
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%ld\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", r.iteration, r.total,
                  r.contrastive, r.cls, r.bce, r.dice);
    f << buf;
  }
  if (!f) throw IoError("write failed: " + path);
}

struct TrainResult {
  std::vector<TraceRow> trace;
};

inline LossWeights loss_weights_from(const Config& cfg) {
  LossWeights w;
  w.contrastive = cfg.loss_contrastive;
  w.cls = cfg.loss_cls;
  w.bce = cfg.loss_bce;
  w.dice = cfg.loss_dice;
  w.no_object = cfg.loss_no_object;
  return w;
}

/// One forward pass and per-set matching for a sample.
struct ForwardPass {
  SegmentationOutput output;
  std::vector<MatchResult> matches;
  ad::Tensor queries;  // task-conditioned query set (contrastive side)
};

inline ForwardPass forward_sample(const Model& model, const ad::Tensor& image, TaskKind task,
                                  const TaskGroundTruth& gt, const LossWeights& weights) {
  ForwardPass fp;
  FeaturePyramid features = toy_feature_stub(image, model.stub, model.cfg.dim);
  ad::Tensor token = make_task_token(model, task);
  fp.queries = init_queries(model, token, features);
  fp.output = decoder_forward(model, fp.queries, features);
  fp.matches.reserve(fp.output.sets.size());
  for (const auto& set : fp.output.sets)
    fp.matches.push_back(match_stage(set, gt, fp.output.mask_h, fp.output.mask_w, weights));
  return fp;
}

inline TrainResult train(const Config& cfg, Model& model, const Dataset& ds) {
  cfg.validate();
  if (ds.samples.empty()) throw ValidationError("train: dataset is empty");
  const LossWeights weights = loss_weights_from(cfg);
  const Temperature temp{model.log_tau};
  AdamW opt(cfg.train_lr, cfg.train_weight_decay);
  Rng data_rng = Rng(cfg.train_seed).fork("data");
  Rng task_rng = Rng(cfg.train_seed).fork("task");

  // Image tensors are reused across iterations.
  std::vector<ad::Tensor> images;
  images.reserve(ds.samples.size());
  for (const auto& s : ds.samples) images.push_back(image_to_tensor(s.image));

  TrainResult result;
  struct WindowEntry {
    long iteration;
    ad::Tensor seg_total;
    double cls, bce, dice;
  };
  std::vector<WindowEntry> window;
  std::vector<ad::Tensor> pooled_obj, pooled_txt;

  auto flush_window = [&]() {
    if (window.empty()) return;
    ad::Tensor sum = window.front().seg_total;
    for (std::size_t i = 1; i < window.size(); ++i) sum = ad::add(sum, window[i].seg_total);
    double cl_value = 0.0;
    if (weights.contrastive > 0.0f && !pooled_obj.empty()) {
      ad::Tensor cl = contrastive_loss(ad::concat_rows(pooled_obj), ad::concat_rows(pooled_txt), temp);
      cl_value = cl.item();
      if (!std::isfinite(cl_value))
        throw NumericError("training aborted at iteration " + std::to_string(window.back().iteration) +
                           ": non-finite contrastive loss");
      sum = ad::add(sum, ad::scale(cl, weights.contrastive));
    }
    ad::backward(sum);
    opt.step(model.store);
    model.store.zero_grad();
    for (const auto& e : window) {
      TraceRow row;
      row.iteration = e.iteration;
      row.contrastive = cl_value;
      row.cls = e.cls;
      row.bce = e.bce;
      row.dice = e.dice;
      row.total = e.seg_total.item() + static_cast<double>(weights.contrastive) * cl_value;
      result.trace.push_back(row);
    }
    window.clear();
    pooled_obj.clear();
    pooled_txt.clear();
  };

  for (long iter = 0; iter < cfg.train_iters; ++iter) {
    const auto idx = static_cast<std::size_t>(data_rng.uniform_int(static_cast<long>(ds.samples.size())));
    const TaskKind task = sample_task(task_rng);
    const TaskGroundTruth gt = derive_task_gt(ds.samples[idx].label, ds.classes, task);
    ForwardPass fp = forward_sample(model, images[idx], task, gt, weights);
    LossBreakdown bk = total_loss_detailed(fp.output, fp.matches, gt, ad::Tensor{}, weights);
    if (!std::isfinite(bk.total.item()))
      throw NumericError("training aborted at iteration " + std::to_string(iter) +
                         ": total=" + std::to_string(bk.total.item()) + " cls=" + std::to_string(bk.cls) +
                         " bce=" + std::to_string(bk.bce) + " dice=" + std::to_string(bk.dice));
    if (weights.contrastive > 0.0f) {
      TextList list = build_text_list(gt, ds.classes, model.cfg.text_len);
      ad::Tensor txt_queries = text_mapper_forward(model.text, model.vocab, list);
      pooled_obj.push_back(ad::mean_rows(fp.queries));
      pooled_txt.push_back(ad::mean_rows(txt_queries));
    }
    window.push_back({iter, bk.total, bk.cls, bk.bce, bk.dice});
    if (static_cast<int>(window.size()) == cfg.contrastive_window || iter + 1 == cfg.train_iters)
      flush_window();
  }
  return result;
}

/// Full pipeline entry: read dataset, build, train, write artifacts.
inline TrainResult run_training(const Config& cfg) {
  Dataset ds = read_dataset(cfg.train_dataset);
  const int k = cfg.model_num_classes > 0 ? cfg.model_num_classes : ds.classes.size();
  if (k != ds.classes.size())
    throw ConfigError("model.num_classes disagrees with dataset class table");
  Model model = build_model(cfg.model_config(k), ds.classes, Rng(cfg.train_seed).fork("init"),
                            cfg.loss_tau_init_inv);
  TrainResult result = train(cfg, model, ds);
  write_trace(cfg.train_trace, result.trace);
  save_checkpoint(cfg.train_checkpoint, model, cfg, ds.classes);
  model.vocab.save(cfg.train_checkpoint + ".vocab");
  return result;
}

// --- evaluation ---------------------------------------------------------------

struct EvalReport {
  TaskKind task = TaskKind::panoptic;
  PQReport pq;
  IoUReport miou;
  APReport ap;
};

struct PredictionSet {
  std::vector<PanopticPrediction> panoptic;
  std::vector<SemanticPrediction> semantic;
  std::vector<InstancePrediction> instance;
};

/// Runs inference under one task token and scores all three regimes.
inline EvalReport evaluate_model(const Model& model, const Dataset& ds, TaskKind task,
                                 const Config& cfg, PredictionSet* out_preds = nullptr) {
  if (model.cfg.num_classes != ds.classes.size())
    throw ConfigError("checkpoint was built for " + std::to_string(model.cfg.num_classes) +
                      " classes, dataset has " + std::to_string(ds.classes.size()));
  EvalReport rep;
  rep.task = task;
  std::vector<PanopticPrediction> pan;
  std::vector<SemanticPrediction> sem;
  std::vector<InstancePrediction> inst;
  std::vector<PanopticLabel> gts;
  std::vector<std::vector<int>> sem_gts;
  std::vector<TaskGroundTruth> inst_gts;
  for (const auto& sample : ds.samples) {
    ad::Tensor image = image_to_tensor(sample.image);
    FeaturePyramid features = toy_feature_stub(image, model.stub, model.cfg.dim);
    ad::Tensor token = make_task_token(model, task);
    ad::Tensor queries = init_queries(model, token, features);
    SegmentationOutput out = decoder_forward(model, queries, features);
    const SegOutView view = make_view(out);
    const int h = sample.label.height, w = sample.label.width;
    pan.push_back(panoptic_inference(view, ds.classes, cfg.post_object_threshold,
                                     cfg.post_overlap_threshold, h, w));
    pan.back().to_label().validate(ds.classes);
    sem.push_back(semantic_inference(view, h, w));
    inst.push_back(instance_inference(view, ds.classes, cfg.post_instance_topk, h, w));
    gts.push_back(sample.label);
    sem_gts.push_back(semantic_map_from_label(sample.label));
    inst_gts.push_back(derive_task_gt(sample.label, ds.classes, TaskKind::instance));
  }
  rep.pq = compute_pq(pan, gts, ds.classes);
  rep.miou = compute_miou(sem, sem_gts, ds.classes);
  rep.ap = compute_ap(inst, inst_gts, ds.classes);
  if (out_preds) {
    out_preds->panoptic = std::move(pan);
    out_preds->semantic = std::move(sem);
    out_preds->instance = std::move(inst);
  }
  return rep;
}

/// Metric report as structured text: name<TAB>value lines, then per-class rows.
inline std::string format_report(const EvalReport& rep, const ClassTable& classes) {
  std::ostringstream os;
  char buf[128];
  auto line = [&](const char* name, double v) {
    std::snprintf(buf, sizeof(buf), "%s\t%.6f\n", name, v);
    os << buf;
  };
  os << "task\t" << to_string(rep.task) << '\n';
  line("pq", rep.pq.pq);
  line("sq", rep.pq.sq);
  line("rq", rep.pq.rq);
  line("pq_things", rep.pq.pq_things);
  line("pq_stuff", rep.pq.pq_stuff);
  line("ap", rep.ap.ap);
  line("miou", rep.miou.miou);
  for (const auto& [thr, v] : rep.ap.per_threshold) {
    std::snprintf(buf, sizeof(buf), "ap_thr\t%.2f\t%.6f\n", thr, v);
    os << buf;
  }
  for (const auto& [cls, st] : rep.pq.per_class) {
    const double denom = static_cast<double>(st.tp) + 0.5 * st.fp + 0.5 * st.fn;
    std::snprintf(buf, sizeof(buf), "class_pq\t%d\t%s\t%.6f\n", cls, classes.at(cls).name.c_str(),
                  denom > 0 ? st.iou_sum / denom : 0.0);
    os << buf;
  }
  for (const auto& [cls, iou] : rep.miou.per_class_iou) {
    std::snprintf(buf, sizeof(buf), "class_iou\t%d\t%s\t%.6f\n", cls, classes.at(cls).name.c_str(), iou);
    os << buf;
  }
  return os.str();
}

/// Writes panoptic predictions in the annotation layout (PNG + sidecar).
inline void write_panoptic_predictions(const std::string& root, const Dataset& ds,
                                       const std::vector<PanopticPrediction>& preds) {
  if (ds.samples.size() != preds.size())
    throw ShapeError("write_panoptic_predictions: size mismatch");
  Dataset out;
  out.classes = ds.classes;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    DatasetSample s;
    s.file_name = ds.samples[i].file_name;
    s.image = ds.samples[i].image;
    s.label = preds[i].to_label();
    out.samples.push_back(std::move(s));
  }
  write_dataset(root, out);
}

}  // namespace taskseg
