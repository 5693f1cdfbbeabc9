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
// Task-specific readouts of a segmentation output. All three run on the same
// final prediction set; the task token has already shaped what that set
// contains. Masks binarize at sigmoid probability 0.5 and upsample from the
// 1/4 grid by nearest neighbor.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/model.hpp"

namespace taskseg {

/// Plain-value view of the final prediction set.
struct SegOutView {
  long n = 0;
  long k = 0;  // real classes; probs carry k+1 columns
  int mh = 0, mw = 0;
  std::vector<float> probs;      // n x (k+1), softmax
  std::vector<float> mask_prob;  // n x (mh*mw), sigmoid
};

inline SegOutView make_view(const SegmentationOutput& out) {
  const auto& set = out.final_set();
  SegOutView v;
  v.n = set.class_logits.dim(0);
  v.k = set.class_logits.dim(1) - 1;
  v.mh = out.mask_h;
  v.mw = out.mask_w;
  const long k1 = v.k + 1;
  v.probs.resize(static_cast<std::size_t>(v.n * k1));
  for (long q = 0; q < v.n; ++q) {
    const float* row = set.class_logits.value().data() + q * k1;
    double mx = row[0];
    for (long j = 1; j < k1; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (long j = 0; j < k1; ++j) z += std::exp(row[j] - mx);
    for (long j = 0; j < k1; ++j)
      v.probs[static_cast<std::size_t>(q * k1 + j)] = static_cast<float>(std::exp(row[j] - mx) / z);
  }
  v.mask_prob.resize(set.mask_logits.value().size());
  for (std::size_t i = 0; i < v.mask_prob.size(); ++i)
    v.mask_prob[i] = 1.0f / (1.0f + std::exp(-set.mask_logits.value()[i]));
  return v;
}

struct SemanticPrediction {
  int width = 0, height = 0;
  std::vector<int> class_map;  // every pixel assigned a class in [0, K)
};

struct PanopticPrediction {
  struct Seg {
    int id = 0;
    int class_id = 0;
    bool is_thing = false;
    float confidence = 0.0f;
  };
  int width = 0, height = 0;
  std::vector<int> segment_map;  // 0 = unassigned
  std::vector<Seg> segments;

  PanopticLabel to_label() const {
    PanopticLabel l;
    l.width = width;
    l.height = height;
    l.segment_map = segment_map;
    for (const auto& s : segments) l.segments.push_back({s.id, s.class_id, s.is_thing});
    return l;
  }
};

struct InstancePrediction {
  struct Inst {
    int class_id = 0;
    std::vector<std::uint8_t> mask;  // full resolution, 0/1
    float score = 0.0f;
  };
  int width = 0, height = 0;
  std::vector<Inst> instances;  // scores non-increasing
};

namespace detail {

template <typename T>
std::vector<T> upsample_nearest(const std::vector<T>& src, int sh, int sw, int dh, int dw) {
  std::vector<T> out(static_cast<std::size_t>(dh) * dw);
  const int fy = dh / sh, fx = dw / sw;
  for (int y = 0; y < dh; ++y)
    for (int x = 0; x < dw; ++x)
      out[static_cast<std::size_t>(y) * dw + x] =
          src[static_cast<std::size_t>(y / fy) * sw + x / fx];
  return out;
}

}  // namespace detail

/// Per-pixel argmax over classes of sum_q p(c|q) * mask_q; no-object excluded.
inline SemanticPrediction semantic_inference(const SegOutView& v, int height, int width) {
  SemanticPrediction out;
  out.width = width;
  out.height = height;
  std::vector<int> quarter(static_cast<std::size_t>(v.mh) * v.mw, 0);
  const long pixels = static_cast<long>(v.mh) * v.mw;
  for (long p = 0; p < pixels; ++p) {
    double best = -1.0;
    int best_c = 0;
    for (long c = 0; c < v.k; ++c) {
      double acc = 0.0;
      for (long q = 0; q < v.n; ++q)
        acc += static_cast<double>(v.probs[static_cast<std::size_t>(q * (v.k + 1) + c)]) *
               v.mask_prob[static_cast<std::size_t>(q * pixels + p)];
      if (acc > best) {
        best = acc;
        best_c = static_cast<int>(c);
      }
    }
    quarter[static_cast<std::size_t>(p)] = best_c;
  }
  out.class_map = detail::upsample_nearest(quarter, v.mh, v.mw, height, width);
  return out;
}

inline SemanticPrediction semantic_inference(const SegmentationOutput& out, int height, int width) {
  return semantic_inference(make_view(out), height, width);
}

/// Confidence filter, per-pixel argmax of score * mask probability, then an
/// overlap filter (a query keeps its segment only if it retains at least
/// `overlap_threshold` of its binarized area), and per-class merging of stuff.
inline PanopticPrediction panoptic_inference(const SegOutView& v, const ClassTable& classes,
                                             float object_threshold, float overlap_threshold,
                                             int height, int width) {
  if (!(object_threshold > 0.0f && object_threshold < 1.0f) ||
      !(overlap_threshold > 0.0f && overlap_threshold < 1.0f))
    throw ValidationError("panoptic_inference: thresholds must lie in (0,1)");
  PanopticPrediction out;
  out.width = width;
  out.height = height;

  struct Kept {
    long query;
    int class_id;
    float score;
  };
  std::vector<Kept> kept;
  for (long q = 0; q < v.n; ++q) {
    const float* row = v.probs.data() + q * (v.k + 1);
    long best_c = 0;
    for (long c = 1; c < v.k; ++c)
      if (row[c] > row[best_c]) best_c = c;
    if (row[best_c] >= object_threshold)
      kept.push_back({q, static_cast<int>(best_c), row[best_c]});
  }

  const long pixels = static_cast<long>(v.mh) * v.mw;
  std::vector<int> winner(static_cast<std::size_t>(pixels), -1);  // index into kept
  for (long p = 0; p < pixels; ++p) {
    double best = 0.0;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const double s = static_cast<double>(kept[i].score) *
                       v.mask_prob[static_cast<std::size_t>(kept[i].query * pixels + p)];
      if (s > best) {
        best = s;
        winner[static_cast<std::size_t>(p)] = static_cast<int>(i);
      }
    }
  }

  std::vector<long> survived(kept.size(), 0), original(kept.size(), 0);
  for (std::size_t i = 0; i < kept.size(); ++i)
    for (long p = 0; p < pixels; ++p)
      if (v.mask_prob[static_cast<std::size_t>(kept[i].query * pixels + p)] > 0.5f)
        ++original[i];
  for (long p = 0; p < pixels; ++p)
    if (winner[static_cast<std::size_t>(p)] >= 0) ++survived[static_cast<std::size_t>(winner[static_cast<std::size_t>(p)])];

  std::vector<bool> keep_seg(kept.size(), false);
  for (std::size_t i = 0; i < kept.size(); ++i)
    keep_seg[i] = original[i] > 0 && survived[i] > 0 &&
                  static_cast<double>(survived[i]) / static_cast<double>(original[i]) >=
                      static_cast<double>(overlap_threshold);

  // Emission order: thing segments by query index, then stuff classes ascending.
  std::vector<int> kept_to_segment(kept.size(), 0);
  int next_id = 1;
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (!keep_seg[i] || !classes.is_thing(kept[i].class_id)) continue;
    kept_to_segment[i] = next_id;
    out.segments.push_back({next_id, kept[i].class_id, true, kept[i].score});
    ++next_id;
  }
  std::map<int, std::vector<std::size_t>> stuff_by_class;
  for (std::size_t i = 0; i < kept.size(); ++i)
    if (keep_seg[i] && !classes.is_thing(kept[i].class_id))
      stuff_by_class[kept[i].class_id].push_back(i);
  for (const auto& [cls, members] : stuff_by_class) {
    float conf = 0.0f;
    for (std::size_t i : members) {
      kept_to_segment[i] = next_id;
      conf = std::max(conf, kept[i].score);
    }
    out.segments.push_back({next_id, cls, false, conf});
    ++next_id;
  }

  std::vector<int> quarter(static_cast<std::size_t>(pixels), 0);
  for (long p = 0; p < pixels; ++p) {
    const int w = winner[static_cast<std::size_t>(p)];
    if (w >= 0 && keep_seg[static_cast<std::size_t>(w)])
      quarter[static_cast<std::size_t>(p)] = kept_to_segment[static_cast<std::size_t>(w)];
  }
  out.segment_map = detail::upsample_nearest(quarter, v.mh, v.mw, height, width);

  // Dropped queries may leave a recorded segment with no surviving pixels.
  std::vector<long> areas(static_cast<std::size_t>(next_id), 0);
  for (int id : out.segment_map) ++areas[static_cast<std::size_t>(id)];
  std::vector<PanopticPrediction::Seg> pruned;
  for (const auto& s : out.segments)
    if (areas[static_cast<std::size_t>(s.id)] > 0) pruned.push_back(s);
  out.segments = std::move(pruned);
  return out;
}

inline PanopticPrediction panoptic_inference(const SegmentationOutput& out,
                                             const ClassTable& classes, float object_threshold,
                                             float overlap_threshold, int height, int width) {
  return panoptic_inference(make_view(out), classes, object_threshold, overlap_threshold, height,
                            width);
}

/// Scores every (query, thing class) pair by class probability times mean
/// mask probability over the binarized mask; emits the top_k masks.
inline InstancePrediction instance_inference(const SegOutView& v, const ClassTable& classes,
                                             int top_k, int height, int width) {
  const auto things = classes.thing_ids();
  if (top_k < 0 || static_cast<long>(top_k) > v.n * static_cast<long>(things.size()))
    throw ValidationError("instance_inference: top_k " + std::to_string(top_k) +
                          " exceeds query-class pair count");
  InstancePrediction out;
  out.width = width;
  out.height = height;
  const long pixels = static_cast<long>(v.mh) * v.mw;

  struct Cand {
    float score;
    long query;
    int class_id;
  };
  std::vector<Cand> cands;
  for (long q = 0; q < v.n; ++q) {
    double mask_conf = 0.0;
    long area = 0;
    for (long p = 0; p < pixels; ++p) {
      const float mp = v.mask_prob[static_cast<std::size_t>(q * pixels + p)];
      if (mp > 0.5f) {
        mask_conf += mp;
        ++area;
      }
    }
    if (area == 0) continue;
    mask_conf /= static_cast<double>(area);
    for (int c : things)
      cands.push_back({static_cast<float>(
                           static_cast<double>(v.probs[static_cast<std::size_t>(q * (v.k + 1) + c)]) *
                           mask_conf),
                       q, c});
  }
  std::stable_sort(cands.begin(), cands.end(),
                   [](const Cand& a, const Cand& b) { return a.score > b.score; });
  if (static_cast<long>(cands.size()) > top_k) cands.resize(static_cast<std::size_t>(top_k));
  for (const auto& c : cands) {
    std::vector<std::uint8_t> quarter(static_cast<std::size_t>(pixels), 0);
    for (long p = 0; p < pixels; ++p)
      quarter[static_cast<std::size_t>(p)] =
          v.mask_prob[static_cast<std::size_t>(c.query * pixels + p)] > 0.5f ? 1 : 0;
    out.instances.push_back(
        {c.class_id, detail::upsample_nearest(quarter, v.mh, v.mw, height, width), c.score});
  }
  return out;
}

inline InstancePrediction instance_inference(const SegmentationOutput& out,
                                             const ClassTable& classes, int top_k, int height,
                                             int width) {
  return instance_inference(make_view(out), classes, top_k, height, width);
}

}  // namespace taskseg
