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

#include "taskseg/postproc.hpp"

#include <gtest/gtest.h>

#include <set>

#include "taskseg/synthetic.hpp"
#include "test_util.hpp"

using namespace taskseg;

namespace {

// classes: 0 sky (stuff), 1 grass (stuff), 2 box (thing), 3 ball (thing)
const ClassTable kClasses = default_class_table();

/// Hand-built output view: n queries over a 4x4 quarter grid, K = 4.
SegOutView make_test_view(long n) {
  SegOutView v;
  v.n = n;
  v.k = 4;
  v.mh = 4;
  v.mw = 4;
  v.probs.assign(static_cast<std::size_t>(n) * 5, 0.0f);
  v.mask_prob.assign(static_cast<std::size_t>(n) * 16, 0.01f);
  return v;
}

void set_class_prob(SegOutView& v, long q, int cls, float p) {
  // remainder spread over the other slots
  const float rest = (1.0f - p) / 4.0f;
  for (int c = 0; c < 5; ++c)
    v.probs[static_cast<std::size_t>(q * 5 + c)] = (c == cls) ? p : rest;
}

void set_mask(SegOutView& v, long q, const std::set<int>& pixels, float prob = 0.99f) {
  for (int p : pixels) v.mask_prob[static_cast<std::size_t>(q * 16 + p)] = prob;
}

SegOutView random_view(Rng& rng, long n) {
  SegOutView v = make_test_view(n);
  for (long q = 0; q < n; ++q) {
    double z = 0.0;
    for (int c = 0; c < 5; ++c) {
      v.probs[static_cast<std::size_t>(q * 5 + c)] = static_cast<float>(rng.uniform(0.01, 1.0));
      z += v.probs[static_cast<std::size_t>(q * 5 + c)];
    }
    for (int c = 0; c < 5; ++c) v.probs[static_cast<std::size_t>(q * 5 + c)] /= static_cast<float>(z);
    for (int p = 0; p < 16; ++p)
      v.mask_prob[static_cast<std::size_t>(q * 16 + p)] = static_cast<float>(rng.uniform());
  }
  return v;
}

}  // namespace

TEST(SemanticInference, SingleQueryCoversEverything) {
  SegOutView v = make_test_view(1);
  set_class_prob(v, 0, 3, 0.99f);
  set_mask(v, 0, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  const auto pred = semantic_inference(v, 16, 16);
  for (int c : pred.class_map) EXPECT_EQ(c, 3);
}

TEST(SemanticInference, DisjointQueriesPartitionByArgmax) {
  SegOutView v = make_test_view(2);
  set_class_prob(v, 0, 2, 0.95f);
  set_class_prob(v, 1, 0, 0.95f);
  std::set<int> left = {0, 1, 4, 5, 8, 9, 12, 13};
  std::set<int> right = {2, 3, 6, 7, 10, 11, 14, 15};
  set_mask(v, 0, left);
  set_mask(v, 1, right);
  const auto pred = semantic_inference(v, 4, 4);
  for (int p = 0; p < 16; ++p)
    EXPECT_EQ(pred.class_map[static_cast<std::size_t>(p)], left.count(p) ? 2 : 0);
}

TEST(SemanticInference, ProbabilityRescalingLeavesArgmaxAlone) {
  Rng rng(71);
  SegOutView v = random_view(rng, 4);
  const auto a = semantic_inference(v, 16, 16);
  SegOutView half = v;
  for (auto& p : half.probs) p *= 0.5f;
  const auto b = semantic_inference(half, 16, 16);
  EXPECT_EQ(a.class_map, b.class_map);
}

TEST(SemanticInference, EveryPixelAssigned) {
  Rng rng(72);
  const auto pred = semantic_inference(random_view(rng, 3), 16, 16);
  EXPECT_EQ(pred.class_map.size(), 256u);
  for (int c : pred.class_map) {
    EXPECT_GE(c, 0);
    EXPECT_LT(c, 4);
  }
}

TEST(PanopticInference, SingleConfidentQueryCoversImage) {
  SegOutView v = make_test_view(1);
  set_class_prob(v, 0, 2, 0.95f);
  set_mask(v, 0, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15});
  const auto pred = panoptic_inference(v, kClasses, 0.8f, 0.8f, 16, 16);
  ASSERT_EQ(pred.segments.size(), 1u);
  EXPECT_EQ(pred.segments[0].class_id, 2);
  EXPECT_TRUE(pred.segments[0].is_thing);
  for (int id : pred.segment_map) EXPECT_EQ(id, pred.segments[0].id);
}

TEST(PanopticInference, BelowThresholdQueryContributesNothing) {
  SegOutView v = make_test_view(1);
  set_class_prob(v, 0, 2, 0.5f);  // below object threshold 0.8
  set_mask(v, 0, {0, 1, 2, 3});
  const auto pred = panoptic_inference(v, kClasses, 0.8f, 0.8f, 16, 16);
  EXPECT_TRUE(pred.segments.empty());
  for (int id : pred.segment_map) EXPECT_EQ(id, 0);
}

TEST(PanopticInference, WeakOverlappedSegmentDropped) {
  SegOutView v = make_test_view(2);
  set_class_prob(v, 0, 2, 0.95f);
  set_class_prob(v, 1, 2, 0.85f);
  // Query 0 owns pixels 0..7; query 1 binarizes on 6..9 but survives only on
  // 8..9: survival 2/4 = 0.5 < 0.8, so its segment is dropped.
  set_mask(v, 0, {0, 1, 2, 3, 4, 5, 6, 7}, 0.99f);
  set_mask(v, 1, {6, 7, 8, 9}, 0.9f);
  const auto pred = panoptic_inference(v, kClasses, 0.8f, 0.8f, 4, 4);
  ASSERT_EQ(pred.segments.size(), 1u);
  EXPECT_EQ(pred.segments[0].class_id, 2);
  // Dropped query's surviving pixels become unlabeled.
  EXPECT_EQ(pred.segment_map[8], 0);
  EXPECT_EQ(pred.segment_map[9], 0);
  EXPECT_EQ(pred.segment_map[0], pred.segments[0].id);
}

TEST(PanopticInference, StuffSegmentsMergePerClass) {
  SegOutView v = make_test_view(2);
  set_class_prob(v, 0, 0, 0.95f);  // sky
  set_class_prob(v, 1, 0, 0.9f);   // sky again
  set_mask(v, 0, {0, 1, 2, 3, 4, 5});
  set_mask(v, 1, {10, 11, 12, 13, 14, 15});
  const auto pred = panoptic_inference(v, kClasses, 0.8f, 0.8f, 4, 4);
  ASSERT_EQ(pred.segments.size(), 1u);
  EXPECT_FALSE(pred.segments[0].is_thing);
  EXPECT_EQ(pred.segments[0].class_id, 0);
  EXPECT_NEAR(pred.segments[0].confidence, 0.95f, 1e-5);
}

TEST(PanopticInference, OutputSatisfiesLabelInvariants) {
  Rng rng(73);
  for (int it = 0; it < 50; ++it) {
    const auto pred = panoptic_inference(random_view(rng, 5), kClasses, 0.3f, 0.5f, 16, 16);
    pred.to_label().validate(kClasses);  // throws on violation
  }
}

TEST(PanopticInference, RaisingObjectThresholdNeverAddsSegments) {
  Rng rng(74);
  for (int it = 0; it < 30; ++it) {
    SegOutView v = random_view(rng, 5);
    const auto lo = panoptic_inference(v, kClasses, 0.3f, 0.5f, 16, 16);
    const auto hi = panoptic_inference(v, kClasses, 0.6f, 0.5f, 16, 16);
    EXPECT_LE(hi.segments.size(), lo.segments.size());
  }
}

TEST(InstanceInference, SingleConfidentQueryScore) {
  SegOutView v = make_test_view(1);
  set_class_prob(v, 0, 2, 0.9f);
  set_mask(v, 0, {0, 1, 2, 3}, 0.8f);
  const auto pred = instance_inference(v, kClasses, 2, 16, 16);
  ASSERT_GE(pred.instances.size(), 1u);
  EXPECT_EQ(pred.instances[0].class_id, 2);
  EXPECT_NEAR(pred.instances[0].score, 0.9f * 0.8f, 1e-4);
  long area = 0;
  for (auto b : pred.instances[0].mask) area += b;
  EXPECT_EQ(area, 4 * 16);  // 4 quarter cells upsampled 4x4 each
}

TEST(InstanceInference, StuffOnlyPredictionsGiveEmptyList) {
  SegOutView v = make_test_view(3);
  for (long q = 0; q < 3; ++q) {
    set_class_prob(v, q, 0, 0.95f);  // all mass on stuff classes
    set_mask(v, q, {0, 1, 2});
  }
  const auto pred = instance_inference(v, kClasses, 6, 16, 16);
  // Thing-class scores exist but are tiny; list is thing-only by construction.
  for (const auto& inst : pred.instances) EXPECT_TRUE(kClasses.is_thing(inst.class_id));
}

TEST(InstanceInference, ScoresNonIncreasing) {
  Rng rng(75);
  for (int it = 0; it < 30; ++it) {
    const auto pred = instance_inference(random_view(rng, 5), kClasses, 8, 16, 16);
    for (std::size_t i = 1; i < pred.instances.size(); ++i)
      EXPECT_LE(pred.instances[i].score, pred.instances[i - 1].score);
  }
}

TEST(InstanceInference, TopKBoundsEnforced) {
  SegOutView v = make_test_view(2);
  EXPECT_THROW(instance_inference(v, kClasses, 100, 16, 16), ValidationError);
}

TEST(Inference, ThresholdDomainEnforced) {
  SegOutView v = make_test_view(1);
  EXPECT_THROW(panoptic_inference(v, kClasses, 0.0f, 0.5f, 4, 4), ValidationError);
  EXPECT_THROW(panoptic_inference(v, kClasses, 0.5f, 1.0f, 4, 4), ValidationError);
}
