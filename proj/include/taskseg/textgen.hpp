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
// Text side of training: per-target text entries, a word-level tokenizer over
// a corpus-built vocabulary, and the mapper that turns the padded text list
// into query embeddings.

#pragma once

#include <cctype>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/serialize.hpp"
#include "taskseg/tensor.hpp"

namespace taskseg {

/// Lowercases, maps non-alphanumerics to spaces, splits on whitespace.
inline std::vector<std::string> normalize_words(const std::string& text) {
  std::string norm;
  norm.reserve(text.size());
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    norm.push_back(std::isalnum(u) ? static_cast<char>(std::tolower(u)) : ' ');
  }
  std::vector<std::string> words;
  std::istringstream is(norm);
  std::string w;
  while (is >> w) words.push_back(w);
  return words;
}

/// Word-level vocabulary. Ids 0-2 are reserved: PAD, the shared begin/end
/// sentinel, and UNK. File form: one token per line, line number = id.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kSeq = 1;  // begin/end sentinel
  static constexpr int kUnk = 2;

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(tokens.size()); }

  int id_of(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? kUnk : it->second;
  }

  void add(const std::string& token) {
    if (index.count(token)) return;
    index[token] = static_cast<int>(tokens.size());
    tokens.push_back(token);
  }

  /// Template words, task names, then class names in id order.
  static Vocabulary build(const ClassTable& classes) {
    Vocabulary v;
    v.add("<pad>");
    v.add("<s>");
    v.add("<unk>");
    for (const char* w : {"a", "photo", "with", "the", "task", "is",
                          "panoptic", "instance", "semantic"})
      v.add(w);
    for (const auto& e : classes.entries)
      for (const auto& w : normalize_words(e.name)) v.add(w);
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write vocabulary: " + path);
    for (const auto& t : tokens) f << t << '\n';
    if (!f) throw IoError("write failed: " + path);
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open vocabulary: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(f, line)) v.add(line);
    if (v.size() < 3) throw FormatError("vocabulary too small: " + path);
    return v;
  }
};

struct TokenSequence {
  std::vector<int> ids;  // fixed width
  int length = 0;        // real tokens (sentinels included) before padding
};

/// [<s>, words..., <s>, <pad>...], truncated to fit the fixed width.
inline TokenSequence tokenize(const Vocabulary& vocab, const std::string& text, int width) {
  if (width < 2) throw ShapeError("tokenize: width must be at least 2");
  auto words = normalize_words(text);
  if (static_cast<int>(words.size()) > width - 2) words.resize(static_cast<std::size_t>(width - 2));
  TokenSequence seq;
  seq.ids.assign(static_cast<std::size_t>(width), Vocabulary::kPad);
  int at = 0;
  seq.ids[static_cast<std::size_t>(at++)] = Vocabulary::kSeq;
  for (const auto& w : words) seq.ids[static_cast<std::size_t>(at++)] = vocab.id_of(w);
  seq.ids[static_cast<std::size_t>(at++)] = Vocabulary::kSeq;
  seq.length = at;
  return seq;
}

struct TextList {
  std::vector<std::string> entries;  // exactly n_text
  int n_real = 0;
};

/// One "a photo with a {CLS}" entry per target (target order), padded with
/// "a {task} photo". The article is fixed to "a" for all tasks.
inline TextList build_text_list(const TaskGroundTruth& gt, const ClassTable& classes, int n_text) {
  const long count = static_cast<long>(gt.targets.size());
  if (count > n_text)
    throw CapacityError("text list overflow: " + std::to_string(count) + " targets for " +
                            std::to_string(n_text) + " slots",
                        count - n_text);
  TextList list;
  list.n_real = static_cast<int>(count);
  list.entries.reserve(static_cast<std::size_t>(n_text));
  for (const auto& t : gt.targets)
    list.entries.push_back("a photo with a " + classes.at(t.class_id).name);
  const std::string pad = std::string("a ") + to_string(gt.task) + " photo";
  while (static_cast<int>(list.entries.size()) < n_text) list.entries.push_back(pad);
  return list;
}

// --- text encoder ----------------------------------------------------------

struct LayerNormParams {
  ad::Tensor gain;
  ad::Tensor bias;
};

struct LinearParams {
  ad::Tensor w;  // in x out
  ad::Tensor b;  // out
};

inline ad::Tensor linear(const LinearParams& p, const ad::Tensor& x) {
  return ad::add_rowvec(ad::matmul(x, p.w), p.b);
}

struct SelfAttnParams {
  LinearParams wq, wv, wo;
  ad::Tensor wk;  // bias-free: a key bias shifts scores uniformly and cancels in softmax
};

struct EncoderBlockParams {
  LayerNormParams ln1;
  SelfAttnParams attn;
  LayerNormParams ln2;
  LinearParams ffn1, ffn2;
};

namespace detail {

inline LinearParams make_linear(ParamStore& store, const std::string& name, long in, long out,
                                Rng& rng) {
  LinearParams p;
  p.w = store.create_randn(name + ".w", {in, out}, rng, 1.0f / std::sqrt(static_cast<float>(in)));
  p.b = store.create_full(name + ".b", {out}, 0.0f);
  return p;
}

inline LayerNormParams make_layer_norm(ParamStore& store, const std::string& name, long d) {
  LayerNormParams p;
  p.gain = store.create_full(name + ".gain", {d}, 1.0f);
  p.bias = store.create_full(name + ".bias", {d}, 0.0f);
  return p;
}

inline SelfAttnParams make_self_attn(ParamStore& store, const std::string& name, long d, Rng& rng) {
  SelfAttnParams p;
  p.wq = make_linear(store, name + ".wq", d, d, rng);
  p.wk = store.create_randn(name + ".wk", {d, d}, rng, 1.0f / std::sqrt(static_cast<float>(d)));
  p.wv = make_linear(store, name + ".wv", d, d, rng);
  p.wo = make_linear(store, name + ".wo", d, d, rng);
  return p;
}

inline EncoderBlockParams make_encoder_block(ParamStore& store, const std::string& name, long d,
                                             Rng& rng) {
  EncoderBlockParams p;
  p.ln1 = make_layer_norm(store, name + ".ln1", d);
  p.attn = make_self_attn(store, name + ".attn", d, rng);
  p.ln2 = make_layer_norm(store, name + ".ln2", d);
  p.ffn1 = make_linear(store, name + ".ffn1", d, 2 * d, rng);
  p.ffn2 = make_linear(store, name + ".ffn2", 2 * d, d, rng);
  return p;
}

/// Multi-head attention with projections; heads split the hidden width.
inline ad::Tensor projected_attention(const SelfAttnParams& p, const ad::Tensor& q,
                                      const ad::Tensor& k, const ad::Tensor& v, int heads,
                                      const ad::AttnMask* mask) {
  ad::Tensor qh = linear(p.wq, q);
  ad::Tensor kh = ad::matmul(k, p.wk);
  ad::Tensor vh = linear(p.wv, v);
  const long d = qh.dim(1);
  if (heads <= 1 || d % heads != 0) {
    return linear(p.wo, ad::attention(qh, kh, vh, mask));
  }
  const long hd = d / heads;
  std::vector<ad::Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h)
    outs.push_back(ad::attention(ad::slice_cols(qh, h * hd, (h + 1) * hd),
                                 ad::slice_cols(kh, h * hd, (h + 1) * hd),
                                 ad::slice_cols(vh, h * hd, (h + 1) * hd), mask));
  return linear(p.wo, ad::concat_cols(outs));
}

}  // namespace detail

struct TextEncoderParams {
  ad::Tensor token_embed;  // vocab x D
  ad::Tensor pos_embed;    // width x D
  std::vector<EncoderBlockParams> blocks;
  LayerNormParams final_ln;
  int width = 0;
  int heads = 1;
};

inline TextEncoderParams make_text_encoder(ParamStore& store, const std::string& name, long vocab,
                                           long d, int width, int depth, int heads, Rng& rng) {
  TextEncoderParams p;
  p.token_embed = store.create_randn(name + ".token_embed", {vocab, d}, rng, 0.5f);
  p.pos_embed = store.create_randn(name + ".pos_embed", {width, d}, rng, 0.5f);
  for (int i = 0; i < depth; ++i)
    p.blocks.push_back(detail::make_encoder_block(store, name + ".block" + std::to_string(i), d, rng));
  p.final_ln = detail::make_layer_norm(store, name + ".final_ln", d);
  p.width = width;
  p.heads = heads;
  return p;
}

/// Token sequence -> one D-vector: embeddings + positions through the
/// pre-norm encoder stack (attention restricted to real tokens), then a
/// mean-pool over the real tokens and a final layer norm.
inline ad::Tensor encode_text(const TextEncoderParams& p, const TokenSequence& seq) {
  if (static_cast<int>(seq.ids.size()) != p.width)
    throw ShapeError("encode_text: sequence width " + std::to_string(seq.ids.size()) +
                     " does not match encoder width " + std::to_string(p.width));
  ad::Tensor x = ad::gather_rows(p.token_embed, seq.ids);
  std::vector<int> pos(seq.ids.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
  x = ad::add(x, ad::gather_rows(p.pos_embed, pos));

  ad::AttnMask mask;
  mask.rows = p.width;
  mask.cols = p.width;
  mask.keep.assign(static_cast<std::size_t>(p.width) * p.width, 0);
  for (long i = 0; i < p.width; ++i)
    for (long j = 0; j < seq.length; ++j) mask.keep[static_cast<std::size_t>(i * p.width + j)] = 1;

  for (const auto& blk : p.blocks) {
    ad::Tensor h = ad::layer_norm(x, blk.ln1.gain, blk.ln1.bias);
    x = ad::add(x, detail::projected_attention(blk.attn, h, h, h, p.heads, &mask));
    ad::Tensor f = ad::layer_norm(x, blk.ln2.gain, blk.ln2.bias);
    x = ad::add(x, linear(blk.ffn2, ad::gelu(linear(blk.ffn1, f))));
  }
  ad::Tensor pooled = ad::mean_rows(ad::slice_rows(x, 0, seq.length));
  return ad::layer_norm(pooled, p.final_ln.gain, p.final_ln.bias);
}

struct TextMapperParams {
  TextEncoderParams encoder;
  ad::Tensor context;  // n_ctx x D, learnable
  bool use_context = true;
};

inline TextMapperParams make_text_mapper(ParamStore& store, const std::string& name, long vocab,
                                         long d, int width, int depth, int n_ctx, int heads,
                                         Rng& rng, bool use_context = true) {
  TextMapperParams p;
  p.encoder = make_text_encoder(store, name + ".encoder", vocab, d, width, depth, heads, rng);
  p.context = store.create_randn(name + ".context", {n_ctx, d}, rng, 0.5f);
  p.use_context = use_context;
  return p;
}

/// Padded text list -> text queries: one encoded row per entry, then the
/// learnable context rows verbatim.
inline ad::Tensor text_mapper_forward(const TextMapperParams& p, const Vocabulary& vocab,
                                      const TextList& list) {
  std::vector<ad::Tensor> rows;
  rows.reserve(list.entries.size() + 1);
  for (const auto& entry : list.entries)
    rows.push_back(encode_text(p.encoder, tokenize(vocab, entry, p.encoder.width)));
  if (p.use_context) rows.push_back(p.context);
  return ad::concat_rows(rows);
}

}  // namespace taskseg
