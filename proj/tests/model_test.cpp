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

#include "taskseg/model.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "taskseg/synthetic.hpp"
#include "test_util.hpp"

using namespace taskseg;

namespace {

ModelConfig tiny_config(int layers = 1) {
  ModelConfig mc;
  mc.dim = 16;
  mc.queries = 6;
  mc.text_len = 4;
  mc.text_ctx = 2;
  mc.layers = layers;
  mc.encoder_depth = 1;
  mc.context_width = 8;
  mc.attn_heads = 1;
  mc.num_classes = 4;
  return mc;
}

Model tiny_model(int layers = 1, std::uint64_t seed = 7) {
  return build_model(tiny_config(layers), default_class_table(), Rng(seed));
}

ad::Tensor random_image(Rng& rng, int h, int w) {
  std::vector<float> v(static_cast<std::size_t>(h) * w * 3);
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return ad::Tensor::constant({h, w, 3}, std::move(v));
}

void zero_param(ad::Tensor t) {
  auto& v = t.mutable_value();
  std::fill(v.begin(), v.end(), 0.0f);
}

}  // namespace

TEST(FeatureStub, StrideArithmetic) {
  Model m = tiny_model();
  Rng rng(1);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const int expect_h[4] = {8, 4, 2, 1};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(pyr.levels[static_cast<std::size_t>(i)].h, expect_h[i]);
    EXPECT_EQ(pyr.levels[static_cast<std::size_t>(i)].w, expect_h[i]);
    EXPECT_EQ(pyr.levels[static_cast<std::size_t>(i)].feat.dim(0), expect_h[i] * expect_h[i]);
    EXPECT_EQ(pyr.levels[static_cast<std::size_t>(i)].feat.dim(1), m.cfg.dim);
  }
}

TEST(FeatureStub, IndivisibleExtentsRejected) {
  Model m = tiny_model();
  Rng rng(2);
  EXPECT_THROW(toy_feature_stub(random_image(rng, 24, 32), m.stub, m.cfg.dim), ShapeError);
}

TEST(FeatureStub, TranslationByOnePatchShiftsQuarterLevel) {
  Model m = tiny_model();
  Rng rng(3);
  const int h = 32, w = 32;
  std::vector<float> img1(static_cast<std::size_t>(h) * w * 3);
  for (auto& x : img1) x = static_cast<float>(rng.uniform());
  // img2 is img1 shifted right by one 4-pixel patch.
  std::vector<float> img2(img1.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img2[(static_cast<std::size_t>(y) * w + x) * 3 + static_cast<std::size_t>(c)] =
            x >= 4 ? img1[(static_cast<std::size_t>(y) * w + x - 4) * 3 + static_cast<std::size_t>(c)]
                   : 0.25f;
  const auto p1 = toy_feature_stub(ad::Tensor::constant({h, w, 3}, img1), m.stub, m.cfg.dim);
  const auto p2 = toy_feature_stub(ad::Tensor::constant({h, w, 3}, img2), m.stub, m.cfg.dim);
  const auto& f1 = p1.quarter().feat.value();
  const auto& f2 = p2.quarter().feat.value();
  const int gw = p1.quarter().w;
  for (int gy = 0; gy < p1.quarter().h; ++gy)
    for (int gx = 1; gx < gw; ++gx)
      for (int d = 0; d < m.cfg.dim; ++d)
        EXPECT_FLOAT_EQ(f2[(static_cast<std::size_t>(gy) * gw + gx) * m.cfg.dim + static_cast<std::size_t>(d)],
                        f1[(static_cast<std::size_t>(gy) * gw + gx - 1) * m.cfg.dim + static_cast<std::size_t>(d)]);
}

TEST(FeatureStub, PatchWeightsPassGradientCheck) {
  Model m = tiny_model();
  Rng rng(4);
  ad::Tensor img = random_image(rng, 32, 32);
  ad::Tensor probe = ad::Tensor::randn({64, 16}, rng, 1.0f);
  auto f = [&] {
    return ad::sum_all(ad::mul(toy_feature_stub(img, m.stub, m.cfg.dim).quarter().feat, probe));
  };
  ad::FiniteDiffOptions opt;
  opt.max_coords_per_leaf = 20;
  EXPECT_LE(ad::finite_diff_check(f, {m.stub.embed[0].w, m.stub.embed[0].b}, opt), 1e-3);
}

TEST(TaskToken, DeterministicAndTaskSensitive) {
  Model m = tiny_model();
  const auto a1 = make_task_token(m, TaskKind::panoptic);
  const auto a2 = make_task_token(m, TaskKind::panoptic);
  EXPECT_EQ(a1.value(), a2.value());
  const auto b = make_task_token(m, TaskKind::instance);
  double diff = 0.0;
  for (std::size_t i = 0; i < a1.value().size(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(a1.value()[i]) - b.value()[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(TaskToken, ProjectionPassesGradientCheck) {
  Model m = tiny_model();
  auto f = [&] { return ad::sum_all(make_task_token(m, TaskKind::semantic)); };
  ad::FiniteDiffOptions opt;
  opt.max_coords_per_leaf = 24;
  EXPECT_LE(ad::finite_diff_check(f, {m.task.proj.w, m.task.proj.b, m.task.embed}, opt), 1e-3);
}

TEST(InitQueries, ZeroedBlocksReduceToTaskTokenRepetition) {
  Model m = tiny_model();
  for (auto& blk : m.former_blocks) {
    zero_param(blk.cross.wo.w);
    zero_param(blk.cross.wo.b);
    zero_param(blk.self_attn.wo.w);
    zero_param(blk.self_attn.wo.b);
    zero_param(blk.ffn2.w);
    zero_param(blk.ffn2.b);
  }
  Rng rng(5);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const auto token = make_task_token(m, TaskKind::panoptic);
  const auto q = init_queries(m, token, pyr);
  ASSERT_EQ(q.dim(0), m.cfg.queries);
  for (long r = 0; r < q.dim(0); ++r)
    for (long j = 0; j < m.cfg.dim; ++j)
      EXPECT_NEAR(q.value()[static_cast<std::size_t>(r * m.cfg.dim + j)],
                  token.value()[static_cast<std::size_t>(j)], 1e-6);
}

TEST(InitQueries, TaskSwapChangesEveryRow) {
  Model m = tiny_model();
  Rng rng(6);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const auto qa = init_queries(m, make_task_token(m, TaskKind::panoptic), pyr);
  const auto qb = init_queries(m, make_task_token(m, TaskKind::instance), pyr);
  for (long r = 0; r < qa.dim(0); ++r) {
    double diff = 0.0;
    for (long j = 0; j < m.cfg.dim; ++j)
      diff = std::max(diff, std::abs(static_cast<double>(qa.value()[static_cast<std::size_t>(r * m.cfg.dim + j)]) -
                                     qb.value()[static_cast<std::size_t>(r * m.cfg.dim + j)]));
    EXPECT_GT(diff, 0.0) << "row " << r;
  }
}

TEST(InitQueries, TaskTokenIsLastRow) {
  Model m = tiny_model();
  Rng rng(7);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const auto token = make_task_token(m, TaskKind::semantic);
  const auto q = init_queries(m, token, pyr);
  const long last = m.cfg.queries - 1;
  for (long j = 0; j < m.cfg.dim; ++j)
    EXPECT_FLOAT_EQ(q.value()[static_cast<std::size_t>(last * m.cfg.dim + j)],
                    token.value()[static_cast<std::size_t>(j)]);
}

TEST(Decoder, AuxCountIsThreeLPlusFinal) {
  for (int layers : {1, 2, 3}) {
    Model m = tiny_model(layers);
    Rng rng(8);
    const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
    const auto q = init_queries(m, make_task_token(m, TaskKind::panoptic), pyr);
    const auto out = decoder_forward(m, q, pyr);
    EXPECT_EQ(static_cast<int>(out.aux_count()), 3 * layers);
    EXPECT_EQ(static_cast<int>(out.sets.size()), 3 * layers + 1);
  }
}

TEST(Decoder, ShapesFollowContractionLaw) {
  Model m = tiny_model();
  Rng rng(9);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const auto q = init_queries(m, make_task_token(m, TaskKind::panoptic), pyr);
  const auto out = decoder_forward(m, q, pyr);
  EXPECT_EQ(out.mask_h, 8);
  EXPECT_EQ(out.mask_w, 8);
  for (const auto& set : out.sets) {
    EXPECT_EQ(set.class_logits.dim(0), m.cfg.queries);
    EXPECT_EQ(set.class_logits.dim(1), m.cfg.num_classes + 1);
    EXPECT_EQ(set.mask_logits.dim(0), m.cfg.queries);
    EXPECT_EQ(set.mask_logits.dim(1), 64);
  }
}

TEST(Decoder, FrozenMasksReproduceForward) {
  Model m = tiny_model(2);
  Rng rng(10);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const auto q = init_queries(m, make_task_token(m, TaskKind::instance), pyr);
  std::vector<ad::AttnMask> captured;
  const auto out1 = decoder_forward(m, q, pyr, nullptr, &captured);
  ASSERT_EQ(captured.size(), 6u);
  const auto out2 = decoder_forward(m, q, pyr, &captured);
  for (std::size_t s = 0; s < out1.sets.size(); ++s) {
    EXPECT_EQ(out1.sets[s].class_logits.value(), out2.sets[s].class_logits.value());
    EXPECT_EQ(out1.sets[s].mask_logits.value(), out2.sets[s].mask_logits.value());
  }
}

TEST(Decoder, TaskSwapChangesClassLogits) {
  Model m = tiny_model();
  Rng rng(11);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const auto out_p =
      decoder_forward(m, init_queries(m, make_task_token(m, TaskKind::panoptic), pyr), pyr);
  const auto out_i =
      decoder_forward(m, init_queries(m, make_task_token(m, TaskKind::instance), pyr), pyr);
  double diff = 0.0;
  for (std::size_t i = 0; i < out_p.final_set().class_logits.value().size(); ++i)
    diff = std::max(diff, std::abs(static_cast<double>(out_p.final_set().class_logits.value()[i]) -
                                   out_i.final_set().class_logits.value()[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Decoder, MultiHeadConfigRuns) {
  ModelConfig mc = tiny_config();
  mc.attn_heads = 4;
  Model m = build_model(mc, default_class_table(), Rng(12));
  Rng rng(13);
  const auto pyr = toy_feature_stub(random_image(rng, 32, 32), m.stub, m.cfg.dim);
  const auto out = decoder_forward(m, init_queries(m, make_task_token(m, TaskKind::panoptic), pyr), pyr);
  for (float v : out.final_set().class_logits.value()) EXPECT_TRUE(std::isfinite(v));
}

TEST(ModelConfig, InvariantsEnforced) {
  ModelConfig mc = tiny_config();
  mc.queries = 7;  // != text_len + text_ctx
  EXPECT_THROW(mc.validate(), ConfigError);
  mc = tiny_config();
  mc.dim = 18;  // not divisible by 4
  EXPECT_THROW(mc.validate(), ConfigError);
  mc = tiny_config();
  mc.num_classes = 3;  // table has 4
  EXPECT_THROW(build_model(mc, default_class_table(), Rng(1)), ConfigError);
}

TEST(Pyramid, MissingLevelIsConfigurationError) {
  FeaturePyramid pyr;
  EXPECT_THROW(pyr.at_stride(7), ConfigError);
}
