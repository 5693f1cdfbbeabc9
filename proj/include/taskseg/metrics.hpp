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
// Evaluation metrics over prediction/ground-truth pairs.
//
// Panoptic quality: segments match iff same class and IoU > 0.5 (such a match
// is unique); per class PQ = sum(IoU of TPs) / (TP + FP/2 + FN/2). IoU is
// computed over labeled pixels only; a predicted segment with no labeled
// pixels is ignored rather than counted as a false positive. Classes enter
// the averages when they have any of TP/FP/FN.
//
// mIoU: one global confusion matrix over labeled pixels; mean over classes
// that occur in the ground truth.
//
// AP: mask IoU thresholds 0.50:0.05:0.95, greedy score-ordered matching,
// 101-point interpolated precision-recall area, averaged over thresholds and
// over classes that occur in the ground truth.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/postproc.hpp"

namespace taskseg {

struct PQReport {
  double pq = 0.0, sq = 0.0, rq = 0.0;
  double pq_things = 0.0, pq_stuff = 0.0;
  struct ClassStat {
    double iou_sum = 0.0;
    long tp = 0, fp = 0, fn = 0;
  };
  std::map<int, ClassStat> per_class;
};

struct IoUReport {
  double miou = 0.0;
  std::map<int, double> per_class_iou;
};

struct APReport {
  double ap = 0.0;
  std::map<double, double> per_threshold;
};

inline PQReport compute_pq(const std::vector<PanopticPrediction>& preds,
                           const std::vector<PanopticLabel>& gts, const ClassTable& classes) {
  if (preds.size() != gts.size())
    throw ShapeError("compute_pq: prediction/ground-truth counts differ");
  PQReport rep;
  auto& stats = rep.per_class;
  for (std::size_t img = 0; img < gts.size(); ++img) {
    const auto& gt = gts[img];
    const auto& pr = preds[img];
    if (gt.width != pr.width || gt.height != pr.height)
      throw ShapeError("compute_pq: resolution mismatch at image " + std::to_string(img));
    std::map<int, int> gt_class, pr_class;
    std::map<int, bool> gt_thing;
    for (const auto& s : gt.segments) {
      gt_class[s.id] = s.class_id;
      gt_thing[s.id] = s.is_thing;
    }
    for (const auto& s : pr.segments) pr_class[s.id] = s.class_id;

    std::map<int, long> gt_area, pr_area_labeled;
    std::map<std::pair<int, int>, long> inter;
    const long n = gt.pixel_count();
    for (long i = 0; i < n; ++i) {
      const int g = gt.segment_map[static_cast<std::size_t>(i)];
      const int p = pr.segment_map[static_cast<std::size_t>(i)];
      if (g == 0) continue;  // unlabeled pixels are excluded throughout
      ++gt_area[g];
      if (p != 0) {
        ++pr_area_labeled[p];
        ++inter[{g, p}];
      }
    }

    std::set<int> gt_matched, pr_matched;
    for (const auto& [key, in] : inter) {
      const auto [g, p] = key;
      if (gt_class.at(g) != pr_class.at(p)) continue;
      const double uni = static_cast<double>(gt_area[g] + pr_area_labeled[p] - in);
      const double iou = uni > 0.0 ? static_cast<double>(in) / uni : 0.0;
      if (iou > 0.5) {
        auto& st = stats[gt_class.at(g)];
        ++st.tp;
        st.iou_sum += iou;
        gt_matched.insert(g);
        pr_matched.insert(p);
      }
    }
    for (const auto& s : gt.segments)
      if (!gt_matched.count(s.id)) ++stats[s.class_id].fn;
    for (const auto& s : pr.segments) {
      if (pr_matched.count(s.id)) continue;
      if (pr_area_labeled[s.id] == 0) continue;  // entirely over unlabeled ground
      ++stats[s.class_id].fp;
    }
  }

  long counted = 0, counted_things = 0, counted_stuff = 0;
  double pq_sum = 0, sq_sum = 0, rq_sum = 0, pq_th = 0, pq_st = 0;
  for (const auto& [cls, st] : stats) {
    if (st.tp + st.fp + st.fn == 0) continue;
    const double denom = static_cast<double>(st.tp) + 0.5 * st.fp + 0.5 * st.fn;
    const double pq_c = st.iou_sum / denom;
    const double sq_c = st.tp > 0 ? st.iou_sum / static_cast<double>(st.tp) : 0.0;
    const double rq_c = static_cast<double>(st.tp) / denom;
    pq_sum += pq_c;
    sq_sum += sq_c;
    rq_sum += rq_c;
    ++counted;
    if (classes.is_thing(cls)) {
      pq_th += pq_c;
      ++counted_things;
    } else {
      pq_st += pq_c;
      ++counted_stuff;
    }
  }
  if (counted > 0) {
    rep.pq = pq_sum / static_cast<double>(counted);
    rep.sq = sq_sum / static_cast<double>(counted);
    rep.rq = rq_sum / static_cast<double>(counted);
  }
  if (counted_things > 0) rep.pq_things = pq_th / static_cast<double>(counted_things);
  if (counted_stuff > 0) rep.pq_stuff = pq_st / static_cast<double>(counted_stuff);
  return rep;
}

inline IoUReport compute_miou(const std::vector<SemanticPrediction>& preds,
                              const std::vector<std::vector<int>>& gt_maps,
                              const ClassTable& classes) {
  if (preds.size() != gt_maps.size())
    throw ShapeError("compute_miou: prediction/ground-truth counts differ");
  const int k = classes.size();
  std::vector<long> conf(static_cast<std::size_t>(k) * k, 0);
  for (std::size_t img = 0; img < preds.size(); ++img) {
    const auto& pm = preds[img].class_map;
    const auto& gm = gt_maps[img];
    if (pm.size() != gm.size())
      throw ShapeError("compute_miou: resolution mismatch at image " + std::to_string(img));
    for (std::size_t i = 0; i < gm.size(); ++i) {
      const int g = gm[i];
      if (g < 0) continue;
      const int p = pm[i];
      if (g >= k || p < 0 || p >= k)
        throw ShapeError("compute_miou: class id out of range (gt " + std::to_string(g) +
                         ", pred " + std::to_string(p) + ")");
      ++conf[static_cast<std::size_t>(g) * k + p];
    }
  }
  IoUReport rep;
  long counted = 0;
  double sum = 0.0;
  for (int c = 0; c < k; ++c) {
    long gt_total = 0;
    for (int p = 0; p < k; ++p) gt_total += conf[static_cast<std::size_t>(c) * k + p];
    if (gt_total == 0) continue;  // class absent from ground truth
    const long tp = conf[static_cast<std::size_t>(c) * k + c];
    long fp = 0, fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += conf[static_cast<std::size_t>(o) * k + c];
      fn += conf[static_cast<std::size_t>(c) * k + o];
    }
    const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    rep.per_class_iou[c] = iou;
    sum += iou;
    ++counted;
  }
  if (counted > 0) rep.miou = sum / static_cast<double>(counted);
  return rep;
}

namespace detail {

inline double mask_iou(const std::vector<std::uint8_t>& a, const std::vector<std::uint8_t>& b) {
  long inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pa = a[i] != 0, pb = b[i] != 0;
    inter += pa && pb;
    uni += pa || pb;
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

/// Area under the 101-point interpolated precision-recall curve.
inline double ap_from_pr(const std::vector<char>& tp_flags, long total_gt) {
  if (total_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  long tp = 0, seen = 0;
  for (char f : tp_flags) {
    ++seen;
    if (f) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  double ap = 0.0;
  for (int ri = 0; ri <= 100; ++ri) {
    const double r = static_cast<double>(ri) / 100.0;
    double best = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= r - 1e-12) best = std::max(best, precision[i]);
    ap += best;
  }
  return ap / 101.0;
}

}  // namespace detail

/// Instance ground truths must come from the instance task (thing classes
/// only); predictions are matched greedily in score order per class.
inline APReport compute_ap(const std::vector<InstancePrediction>& preds,
                           const std::vector<TaskGroundTruth>& gts, const ClassTable& classes) {
  if (preds.size() != gts.size())
    throw ShapeError("compute_ap: prediction/ground-truth counts differ");
  for (const auto& gt : gts)
    for (const auto& t : gt.targets)
      if (!classes.is_thing(t.class_id))
        throw ValidationError("compute_ap: ground truth contains stuff class " +
                              std::to_string(t.class_id));

  std::set<int> gt_classes;
  for (const auto& gt : gts)
    for (const auto& t : gt.targets) gt_classes.insert(t.class_id);

  APReport rep;
  std::vector<double> thresholds;
  for (int i = 0; i < 10; ++i) thresholds.push_back(0.5 + 0.05 * i);

  struct Det {
    float score;
    std::size_t img;
    std::size_t idx;
  };
  for (double thr : thresholds) {
    double class_sum = 0.0;
    for (int cls : gt_classes) {
      std::vector<Det> dets;
      long total_gt = 0;
      for (std::size_t img = 0; img < preds.size(); ++img) {
        for (std::size_t i = 0; i < preds[img].instances.size(); ++i)
          if (preds[img].instances[i].class_id == cls)
            dets.push_back({preds[img].instances[i].score, img, i});
        for (const auto& t : gts[img].targets)
          if (t.class_id == cls) ++total_gt;
      }
      std::stable_sort(dets.begin(), dets.end(),
                       [](const Det& a, const Det& b) { return a.score > b.score; });
      std::vector<std::set<std::size_t>> used(preds.size());
      std::vector<char> tp_flags;
      for (const auto& d : dets) {
        const auto& gt = gts[d.img];
        double best_iou = 0.0;
        std::size_t best_t = 0;
        bool found = false;
        for (std::size_t t = 0; t < gt.targets.size(); ++t) {
          if (gt.targets[t].class_id != cls || used[d.img].count(t)) continue;
          const double iou =
              detail::mask_iou(preds[d.img].instances[d.idx].mask, gt.targets[t].mask);
          if (iou > best_iou) {
            best_iou = iou;
            best_t = t;
            found = true;
          }
        }
        if (found && best_iou >= thr - 1e-9) {
          used[d.img].insert(best_t);
          tp_flags.push_back(1);
        } else {
          tp_flags.push_back(0);
        }
      }
      class_sum += detail::ap_from_pr(tp_flags, total_gt);
    }
    rep.per_threshold[thr] = gt_classes.empty() ? 0.0 : class_sum / static_cast<double>(gt_classes.size());
  }
  double total = 0.0;
  for (const auto& [thr, v] : rep.per_threshold) total += v;
  rep.ap = total / static_cast<double>(thresholds.size());
  return rep;
}

}  // namespace taskseg
