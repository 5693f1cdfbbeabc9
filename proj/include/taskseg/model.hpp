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
// Task-conditioned query model: a strided patch-embedding feature stub, a
// task token head, a query former that initializes object queries from the
// task token, and a multi-stage decoder with masked cross-attention cycling
// the 1/8, 1/16 and 1/32 scales. Heads emit class logits over K+1 classes
// (slot K = no-object) and soft masks at 1/4 scale after every stage.

#pragma once

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/png_io.hpp"
#include "taskseg/serialize.hpp"
#include "taskseg/tensor.hpp"
#include "taskseg/textgen.hpp"

namespace taskseg {

struct ModelConfig {
  int dim = 64;           // hidden width D
  int queries = 16;       // N (text_len + text_ctx)
  int text_len = 12;      // N_text
  int text_ctx = 4;       // N_ctx
  int layers = 1;         // L; decoder runs 3L stages
  int encoder_depth = 1;  // text encoder blocks
  int context_width = 16; // token sequence width
  int attn_heads = 1;
  int num_classes = 0;    // K; class logits span K+1
  bool use_task_token = true;
  bool task_guided_init = true;
  bool use_text_context = true;

  void validate() const {
    if (dim <= 0 || queries <= 0 || text_len <= 0 || text_ctx < 0 || layers <= 0 ||
        encoder_depth <= 0 || context_width < 2 || attn_heads <= 0 || num_classes <= 0)
      throw ConfigError("model config: all counts must be positive");
    if (queries < 2)
      throw ConfigError("model config: need at least 2 queries (task token plus one object slot)");
    if (queries != text_len + text_ctx)
      throw ConfigError("model config: queries (" + std::to_string(queries) +
                        ") must equal text_len + text_ctx (" + std::to_string(text_len + text_ctx) + ")");
    if (dim % 4 != 0) throw ConfigError("model config: dim must be divisible by 4");
    if (dim % attn_heads != 0) throw ConfigError("model config: dim must divide into heads");
  }
};

// --- feature pyramid ---------------------------------------------------------

inline constexpr std::array<int, 4> kStrides = {4, 8, 16, 32};

struct FeatureLevel {
  int h = 0, w = 0;
  ad::Tensor feat;  // (h*w) x D
  ad::Tensor pos;   // (h*w) x D sinusoidal constants
};

struct FeaturePyramid {
  std::array<FeatureLevel, 4> levels;  // strides 4, 8, 16, 32
  const FeatureLevel& quarter() const { return levels[0]; }
  const FeatureLevel& at_stride(int s) const {
    for (std::size_t i = 0; i < kStrides.size(); ++i)
      if (kStrides[i] == s) return levels[i];
    throw ConfigError("feature pyramid has no stride-" + std::to_string(s) + " level");
  }
};

/// Fixed 2-d sinusoidal position codes for an h-by-w grid, width d.
inline ad::Tensor sinusoidal_grid(int h, int w, int d) {
  if (d % 4 != 0) throw ShapeError("sinusoidal_grid: width must be divisible by 4");
  const int half = d / 2;
  std::vector<float> out(static_cast<std::size_t>(h) * w * d);
  const double two_pi = 6.283185307179586;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      float* row = out.data() + (static_cast<std::size_t>(y) * w + x) * d;
      const double ye = (y + 0.5) / h * two_pi;
      const double xe = (x + 0.5) / w * two_pi;
      for (int i = 0; i < half; ++i) {
        const double t = std::pow(10000.0, 2.0 * (i / 2) / half);
        const double vy = ye / t, vx = xe / t;
        row[i] = static_cast<float>((i % 2 == 0) ? std::sin(vy) : std::cos(vy));
        row[half + i] = static_cast<float>((i % 2 == 0) ? std::sin(vx) : std::cos(vx));
      }
    }
  return ad::Tensor::constant({static_cast<long>(h) * w, d}, std::move(out));
}

struct FeatureStubParams {
  std::array<LinearParams, 4> embed;
  std::array<LayerNormParams, 4> norm;
};

inline FeatureStubParams make_feature_stub(ParamStore& store, const std::string& name, long d,
                                           Rng& rng) {
  FeatureStubParams p;
  for (std::size_t i = 0; i < kStrides.size(); ++i) {
    const long s = kStrides[i];
    p.embed[i] = detail::make_linear(store, name + ".embed" + std::to_string(s), s * s * 3, d, rng);
    p.norm[i] = detail::make_layer_norm(store, name + ".norm" + std::to_string(s), d);
  }
  return p;
}

/// Learned patch embedding per scale: non-overlapping strided patches through
/// a linear map and a layer norm. Position codes ride alongside as constants
/// so the embedding itself stays translation-equivariant.
inline FeaturePyramid toy_feature_stub(const ad::Tensor& image, const FeatureStubParams& p, int d) {
  if (image.shape().size() != 3 || image.dim(2) != 3)
    throw ShapeError("toy_feature_stub: image must be HxWx3, got " + ad::shape_str(image.shape()));
  const long h = image.dim(0), w = image.dim(1);
  if (h % 32 != 0 || w % 32 != 0)
    throw ShapeError("toy_feature_stub: extents " + std::to_string(h) + "x" + std::to_string(w) +
                     " must be divisible by 32");
  FeaturePyramid pyr;
  for (std::size_t i = 0; i < kStrides.size(); ++i) {
    const int s = kStrides[i];
    auto& lvl = pyr.levels[i];
    lvl.h = static_cast<int>(h) / s;
    lvl.w = static_cast<int>(w) / s;
    lvl.feat = ad::layer_norm(linear(p.embed[i], ad::extract_patches(image, s)),
                              p.norm[i].gain, p.norm[i].bias);
    lvl.pos = sinusoidal_grid(lvl.h, lvl.w, d);
  }
  return pyr;
}

// --- task token --------------------------------------------------------------

struct TaskTokenParams {
  ad::Tensor embed;  // vocab x D
  LinearParams proj;
  LayerNormParams ln;
};

inline TaskTokenParams make_task_token_params(ParamStore& store, const std::string& name,
                                              long vocab, long d, Rng& rng) {
  TaskTokenParams p;
  p.embed = store.create_randn(name + ".embed", {vocab, d}, rng, 0.5f);
  p.proj = detail::make_linear(store, name + ".proj", d, d, rng);
  p.ln = detail::make_layer_norm(store, name + ".ln", d);
  return p;
}

// --- decoder blocks ----------------------------------------------------------

struct DecoderBlockParams {
  LayerNormParams ln_cross;
  SelfAttnParams cross;
  LayerNormParams ln_self;
  SelfAttnParams self_attn;
  LayerNormParams ln_ffn;
  LinearParams ffn1, ffn2;
};

namespace detail {

inline DecoderBlockParams make_decoder_block(ParamStore& store, const std::string& name, long d,
                                             Rng& rng) {
  DecoderBlockParams p;
  p.ln_cross = make_layer_norm(store, name + ".ln_cross", d);
  p.cross = make_self_attn(store, name + ".cross", d, rng);
  p.ln_self = make_layer_norm(store, name + ".ln_self", d);
  p.self_attn = make_self_attn(store, name + ".self", d, rng);
  p.ln_ffn = make_layer_norm(store, name + ".ln_ffn", d);
  p.ffn1 = make_linear(store, name + ".ffn1", d, 2 * d, rng);
  p.ffn2 = make_linear(store, name + ".ffn2", 2 * d, d, rng);
  return p;
}

/// Pre-norm residual block: masked cross-attention into the memory, then
/// self-attention, then the feed-forward. Query position codes are added on
/// the attention query/key side only, so zeroing the output projections
/// reduces the block to the identity.
inline ad::Tensor decoder_block(const DecoderBlockParams& p, ad::Tensor x, const ad::Tensor& qpos,
                                const FeatureLevel& mem, int heads, const ad::AttnMask* mask) {
  ad::Tensor h = ad::layer_norm(x, p.ln_cross.gain, p.ln_cross.bias);
  ad::Tensor mem_k = ad::add(mem.feat, mem.pos);
  x = ad::add(x, projected_attention(p.cross, ad::add(h, qpos), mem_k, mem.feat, heads, mask));
  h = ad::layer_norm(x, p.ln_self.gain, p.ln_self.bias);
  ad::Tensor hq = ad::add(h, qpos);
  x = ad::add(x, projected_attention(p.self_attn, hq, hq, h, heads, nullptr));
  h = ad::layer_norm(x, p.ln_ffn.gain, p.ln_ffn.bias);
  return ad::add(x, linear(p.ffn2, ad::gelu(linear(p.ffn1, h))));
}

}  // namespace detail

struct HeadParams {
  LayerNormParams norm;
  LinearParams cls;            // D -> K+1
  LinearParams mask1, mask2;   // D -> D -> D
};

struct Model {
  ModelConfig cfg;
  Vocabulary vocab;
  ParamStore store;
  FeatureStubParams stub;
  TaskTokenParams task;
  std::vector<DecoderBlockParams> former_blocks;  // 2-block query former
  ad::Tensor query_pos;                           // N x D
  std::vector<DecoderBlockParams> stages;         // 3L decoder stages
  HeadParams heads;
  TextMapperParams text;
  ad::Tensor log_tau;  // contrastive temperature, tau = exp(log_tau)
};

inline Model build_model(const ModelConfig& cfg, const ClassTable& classes, Rng init_rng,
                         float tau_init_inv = 14.285714f) {
  cfg.validate();
  classes.validate();
  if (cfg.num_classes != classes.size())
    throw ConfigError("model num_classes " + std::to_string(cfg.num_classes) +
                      " disagrees with class table size " + std::to_string(classes.size()));
  Model m;
  m.cfg = cfg;
  m.vocab = Vocabulary::build(classes);
  const long d = cfg.dim;
  Rng rng = init_rng;
  m.stub = make_feature_stub(m.store, "stub", d, rng);
  m.task = make_task_token_params(m.store, "task", m.vocab.size(), d, rng);
  for (int i = 0; i < 2; ++i)
    m.former_blocks.push_back(
        detail::make_decoder_block(m.store, "former.block" + std::to_string(i), d, rng));
  m.query_pos = m.store.create_randn("former.query_pos", {cfg.queries, d}, rng, 1.0f);
  for (int i = 0; i < 3 * cfg.layers; ++i)
    m.stages.push_back(detail::make_decoder_block(m.store, "decoder.stage" + std::to_string(i), d, rng));
  m.heads.norm = detail::make_layer_norm(m.store, "heads.norm", d);
  m.heads.cls = detail::make_linear(m.store, "heads.cls", d, cfg.num_classes + 1, rng);
  m.heads.mask1 = detail::make_linear(m.store, "heads.mask1", d, d, rng);
  m.heads.mask2 = detail::make_linear(m.store, "heads.mask2", d, d, rng);
  m.text = make_text_mapper(m.store, "text", m.vocab.size(), d, cfg.context_width,
                            cfg.encoder_depth, cfg.text_ctx, cfg.attn_heads, rng,
                            cfg.use_text_context);
  m.log_tau = m.store.create_full("loss.log_tau", {1}, std::log(1.0f / tau_init_inv));
  return m;
}

/// "the task is {task}" -> tokenize, embed, mean-pool, project, layer-norm.
/// With the task token ablated the conditioning signal is a zero vector.
inline ad::Tensor make_task_token(const Model& m, TaskKind task) {
  if (!m.cfg.use_task_token) return ad::Tensor::zeros({1, m.cfg.dim});
  const TokenSequence seq =
      tokenize(m.vocab, std::string("the task is ") + to_string(task), m.cfg.context_width);
  std::vector<int> real_ids(seq.ids.begin(), seq.ids.begin() + seq.length);
  ad::Tensor pooled = ad::mean_rows(ad::gather_rows(m.task.embed, real_ids));
  return ad::layer_norm(linear(m.task.proj, pooled), m.task.ln.gain, m.task.ln.bias);
}

/// N-1 repetitions of the task token (zeros when task-guided init is off),
/// refined by the 2-block former cross-attending to 1/4-scale features, then
/// the task token is appended as row N-1.
inline ad::Tensor init_queries(const Model& m, const ad::Tensor& task_token,
                               const FeaturePyramid& features) {
  const long n = m.cfg.queries;
  ad::Tensor x;
  if (m.cfg.task_guided_init) {
    x = ad::matmul(ad::Tensor::full({n - 1, 1}, 1.0f), task_token);
  } else {
    x = ad::Tensor::zeros({n - 1, m.cfg.dim});
  }
  ad::Tensor qpos = ad::slice_rows(m.query_pos, 0, n - 1);
  for (const auto& blk : m.former_blocks)
    x = detail::decoder_block(blk, x, qpos, features.quarter(), m.cfg.attn_heads, nullptr);
  return ad::concat_rows({x, task_token});
}

struct StagePrediction {
  ad::Tensor class_logits;  // N x (K+1)
  ad::Tensor mask_logits;   // N x (mask_h*mask_w), 1/4 scale
};

struct SegmentationOutput {
  int mask_h = 0, mask_w = 0;
  std::vector<StagePrediction> sets;  // 3L+1: initial queries plus every stage
  const StagePrediction& final_set() const { return sets.back(); }
  std::size_t aux_count() const { return sets.size() - 1; }
};

namespace detail {

inline StagePrediction apply_heads(const Model& m, const ad::Tensor& queries,
                                   const FeatureLevel& quarter) {
  ad::Tensor h = ad::layer_norm(queries, m.heads.norm.gain, m.heads.norm.bias);
  StagePrediction out;
  out.class_logits = linear(m.heads.cls, h);
  ad::Tensor mask_embed = linear(m.heads.mask2, ad::gelu(linear(m.heads.mask1, h)));
  out.mask_logits = ad::matmul(mask_embed, ad::transpose(quarter.feat));
  return out;
}

/// Admissibility mask for the next stage: a query may attend where its most
/// recent 1/4-scale mask prediction is foreground (logit > 0), sampled to the
/// stage grid by nearest neighbor.
inline ad::AttnMask mask_from_prediction(const StagePrediction& pred, int h4, int w4,
                                         const FeatureLevel& lvl) {
  ad::AttnMask mask;
  const long n = pred.mask_logits.dim(0);
  mask.rows = n;
  mask.cols = static_cast<long>(lvl.h) * lvl.w;
  mask.keep.assign(static_cast<std::size_t>(mask.rows * mask.cols), 0);
  const int fy = h4 / lvl.h, fx = w4 / lvl.w;
  const auto& logits = pred.mask_logits.value();
  for (long q = 0; q < n; ++q)
    for (int y = 0; y < lvl.h; ++y)
      for (int x = 0; x < lvl.w; ++x) {
        const long src = static_cast<long>(y) * fy * w4 + static_cast<long>(x) * fx;
        mask.keep[static_cast<std::size_t>(q * mask.cols + y * lvl.w + x)] =
            logits[static_cast<std::size_t>(q * h4 * w4 + src)] > 0.0f ? 1 : 0;
      }
  return mask;
}

}  // namespace detail

/// Runs the 3L decoder stages over the scale cycle 1/8 -> 1/16 -> 1/32.
/// Predictions are emitted for the initial queries and after every stage
/// (3L+1 sets); the last set is the final prediction. `frozen_masks`, when
/// given, replaces the computed stage attention masks (the thresholding is
/// not differentiable, so gradient checks hold it fixed); `captured_masks`
/// records the masks actually used.
inline SegmentationOutput decoder_forward(const Model& m, ad::Tensor queries,
                                          const FeaturePyramid& features,
                                          const std::vector<ad::AttnMask>* frozen_masks = nullptr,
                                          std::vector<ad::AttnMask>* captured_masks = nullptr) {
  const auto& quarter = features.quarter();
  SegmentationOutput out;
  out.mask_h = quarter.h;
  out.mask_w = quarter.w;
  out.sets.push_back(detail::apply_heads(m, queries, quarter));
  const int total_stages = 3 * m.cfg.layers;
  if (frozen_masks && static_cast<int>(frozen_masks->size()) != total_stages)
    throw ShapeError("decoder_forward: frozen mask count does not match stage count");
  for (int k = 0; k < total_stages; ++k) {
    const FeatureLevel& lvl = features.at_stride(kStrides[static_cast<std::size_t>(1 + k % 3)]);
    ad::AttnMask mask = frozen_masks
                            ? (*frozen_masks)[static_cast<std::size_t>(k)]
                            : detail::mask_from_prediction(out.sets.back(), quarter.h, quarter.w, lvl);
    if (captured_masks) captured_masks->push_back(mask);
    queries = detail::decoder_block(m.stages[static_cast<std::size_t>(k)], queries, m.query_pos,
                                    lvl, m.cfg.attn_heads, &mask);
    out.sets.push_back(detail::apply_heads(m, queries, quarter));
  }
  return out;
}

/// Image bytes to the float tensor the stub consumes (values in [0, 1]).
inline ad::Tensor image_to_tensor(const Rgb8Image& img) {
  std::vector<float> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return ad::Tensor::constant({img.height, img.width, 3}, std::move(v));
}

}  // namespace taskseg
