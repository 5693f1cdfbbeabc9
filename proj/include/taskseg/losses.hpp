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
// Training objective: a symmetric query-text contrastive term, classification
// cross entropy with a down-weighted no-object slot, and mask supervision as
// binary cross entropy plus soft dice, replicated over every prediction set.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/matcher.hpp"
#include "taskseg/model.hpp"
#include "taskseg/tensor.hpp"

namespace taskseg {

struct LossWeights {
  float contrastive = 0.5f;
  float cls = 2.0f;
  float bce = 5.0f;
  float dice = 5.0f;
  float no_object = 0.1f;  // classification weight on the no-object slot
};

struct Temperature {
  ad::Tensor log_tau;  // tau = exp(log_tau), positive by construction
};

/// Symmetric InfoNCE over B pooled query pairs. Rows are L2-normalized here;
/// similarities are scaled by 1/tau with tau learnable through log_tau.
inline ad::Tensor contrastive_loss(const ad::Tensor& obj, const ad::Tensor& txt,
                                   const Temperature& temp) {
  if (obj.shape().size() != 2 || txt.shape().size() != 2 || obj.dim(0) != txt.dim(0) ||
      obj.dim(1) != txt.dim(1))
    throw ShapeError("contrastive_loss: shapes " + ad::shape_str(obj.shape()) + " and " +
                     ad::shape_str(txt.shape()) + " must match");
  if (obj.dim(0) < 1) throw ValidationError("contrastive_loss: empty batch");
  ad::Tensor sims = ad::matmul(ad::l2_normalize_rows(obj), ad::transpose(ad::l2_normalize_rows(txt)));
  ad::Tensor inv_tau = ad::exp(ad::scale(temp.log_tau, -1.0f));
  return ad::info_nce_diag(ad::scale_by(sims, inv_tau));
}

/// Cross entropy over queries divided by the query count. Real classes weigh
/// 1; the no-object slot (class K) weighs `no_object`.
inline ad::Tensor classification_loss(const ad::Tensor& class_logits,
                                      const std::vector<int>& assigned_classes,
                                      const LossWeights& weights) {
  const long n = class_logits.dim(0);
  const long k = class_logits.dim(1) - 1;
  if (static_cast<long>(assigned_classes.size()) != n)
    throw ShapeError("classification_loss: assignment length does not match query count");
  std::vector<float> w(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    const int c = assigned_classes[static_cast<std::size_t>(i)];
    if (c < 0 || c > k)
      throw ShapeError("classification_loss: class " + std::to_string(c) + " out of [0," +
                       std::to_string(k) + "]");
    w[static_cast<std::size_t>(i)] = (c == k) ? weights.no_object : 1.0f;
  }
  return ad::cross_entropy_rows(class_logits, assigned_classes, w);
}

/// (bce, dice) over index-aligned matched mask pairs.
inline std::pair<ad::Tensor, ad::Tensor> mask_losses(const ad::Tensor& mask_logits,
                                                     const ad::Tensor& gt_masks) {
  if (mask_logits.dim(0) < 1) throw ValidationError("mask_losses: need at least one matched pair");
  return {ad::bce_with_logits(mask_logits, gt_masks), ad::dice_loss(mask_logits, gt_masks)};
}

/// Nearest-neighbor subsampling of full-resolution targets to the mask grid.
inline std::vector<std::uint8_t> downsample_targets(const TaskGroundTruth& gt, int mh, int mw) {
  const int fy = gt.height / mh, fx = gt.width / mw;
  std::vector<std::uint8_t> out(gt.targets.size() * static_cast<std::size_t>(mh) * mw, 0);
  for (std::size_t t = 0; t < gt.targets.size(); ++t)
    for (int y = 0; y < mh; ++y)
      for (int x = 0; x < mw; ++x)
        out[(t * mh + static_cast<std::size_t>(y)) * mw + static_cast<std::size_t>(x)] =
            gt.targets[t].mask[static_cast<std::size_t>(y) * fy * gt.width +
                               static_cast<std::size_t>(x) * fx];
  return out;
}

struct LossBreakdown {
  ad::Tensor total;
  double contrastive = 0.0;  // unweighted component values
  double cls = 0.0;
  double bce = 0.0;
  double dice = 0.0;
};

/// Weighted objective over every prediction set (initial queries plus all
/// stages), with the contrastive term added once. `matches` must hold one
/// MatchResult per prediction set.
inline LossBreakdown total_loss_detailed(const SegmentationOutput& outputs,
                                         const std::vector<MatchResult>& matches,
                                         const TaskGroundTruth& gt, const ad::Tensor& contrastive,
                                         const LossWeights& weights) {
  if (matches.size() != outputs.sets.size())
    throw ValidationError("total_loss: have " + std::to_string(matches.size()) +
                          " stage matches for " + std::to_string(outputs.sets.size()) +
                          " prediction sets");
  const long k = outputs.sets.front().class_logits.dim(1) - 1;
  const long n = outputs.sets.front().class_logits.dim(0);
  const long pixels = static_cast<long>(outputs.mask_h) * outputs.mask_w;
  const std::vector<std::uint8_t> down = downsample_targets(gt, outputs.mask_h, outputs.mask_w);

  LossBreakdown bk;
  bk.total = ad::Tensor::zeros({1});
  for (std::size_t s = 0; s < outputs.sets.size(); ++s) {
    const auto& set = outputs.sets[s];
    const auto& match = matches[s];
    std::vector<int> assigned(static_cast<std::size_t>(n), static_cast<int>(k));
    for (const auto& [q, t] : match.pairs)
      assigned[static_cast<std::size_t>(q)] = gt.targets[static_cast<std::size_t>(t)].class_id;
    ad::Tensor cls = classification_loss(set.class_logits, assigned, weights);
    bk.cls += cls.item();
    bk.total = ad::add(bk.total, ad::scale(cls, weights.cls));
    if (!match.pairs.empty()) {
      std::vector<int> q_sel;
      std::vector<float> gt_rows;
      gt_rows.reserve(match.pairs.size() * static_cast<std::size_t>(pixels));
      for (const auto& [q, t] : match.pairs) {
        q_sel.push_back(q);
        for (long j = 0; j < pixels; ++j)
          gt_rows.push_back(static_cast<float>(down[static_cast<std::size_t>(t) * pixels + j]));
      }
      ad::Tensor pred = ad::gather_rows(set.mask_logits, q_sel);
      ad::Tensor target = ad::Tensor::constant({static_cast<long>(q_sel.size()), pixels},
                                               std::move(gt_rows));
      auto [bce, dice] = mask_losses(pred, target);
      bk.bce += bce.item();
      bk.dice += dice.item();
      bk.total = ad::add(bk.total, ad::add(ad::scale(bce, weights.bce), ad::scale(dice, weights.dice)));
    }
  }
  if (contrastive.defined()) {
    bk.contrastive = contrastive.item();
    bk.total = ad::add(bk.total, ad::scale(contrastive, weights.contrastive));
  }
  return bk;
}

inline ad::Tensor total_loss(const SegmentationOutput& outputs,
                             const std::vector<MatchResult>& matches, const TaskGroundTruth& gt,
                             const ad::Tensor& contrastive, const LossWeights& weights) {
  return total_loss_detailed(outputs, matches, gt, contrastive, weights).total;
}

/// Matches one prediction set against the (downsampled) targets.
inline MatchResult match_stage(const StagePrediction& set, const TaskGroundTruth& gt, int mh,
                               int mw, const LossWeights& weights) {
  const long n = set.class_logits.dim(0);
  const long k1 = set.class_logits.dim(1);
  const long pixels = static_cast<long>(mh) * mw;
  const long m = static_cast<long>(gt.targets.size());
  // Row softmax on plain values.
  std::vector<float> probs(static_cast<std::size_t>(n * k1));
  for (long q = 0; q < n; ++q) {
    const float* row = set.class_logits.value().data() + q * k1;
    double mx = row[0];
    for (long j = 1; j < k1; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (long j = 0; j < k1; ++j) z += std::exp(row[j] - mx);
    for (long j = 0; j < k1; ++j)
      probs[static_cast<std::size_t>(q * k1 + j)] = static_cast<float>(std::exp(row[j] - mx) / z);
  }
  std::vector<int> target_classes;
  for (const auto& t : gt.targets) target_classes.push_back(t.class_id);
  const auto down = downsample_targets(gt, mh, mw);
  const auto cost = match_cost_matrix(probs, n, k1, set.mask_logits.value(), pixels, down,
                                      target_classes, weights.cls, weights.bce, weights.dice);
  return hungarian_solve(cost, n, m);
}

}  // namespace taskseg
