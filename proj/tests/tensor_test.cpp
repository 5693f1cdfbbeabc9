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

#include "taskseg/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "taskseg/errors.hpp"
#include "taskseg/rng.hpp"
#include "taskseg/serialize.hpp"
#include "test_util.hpp"

using namespace taskseg;
using ad::Tensor;

TEST(Matmul, HandArithmetic) {
  Tensor a = Tensor::constant({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::constant({2, 2}, {5, 6, 7, 8});
  Tensor c = ad::matmul(a, b);
  EXPECT_FLOAT_EQ(c.value()[0], 19);
  EXPECT_FLOAT_EQ(c.value()[1], 22);
  EXPECT_FLOAT_EQ(c.value()[2], 43);
  EXPECT_FLOAT_EQ(c.value()[3], 50);
}

TEST(Matmul, IdentityLeavesInputUnchanged) {
  Rng rng(3);
  Tensor a = tsu::rand_param(rng, {3, 3});
  Tensor id = Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor out = ad::matmul(id, a);
  for (std::size_t i = 0; i < a.value().size(); ++i)
    EXPECT_FLOAT_EQ(out.value()[i], a.value()[i]);
}

TEST(Matmul, GradOfSumIsOnesTimesBTransposed) {
  Rng rng(4);
  Tensor a = tsu::rand_param(rng, {2, 3});
  Tensor b = tsu::rand_param(rng, {3, 4});
  ad::backward(ad::sum_all(ad::matmul(a, b)));
  // d(sum(AB))/dA = ones(2x4) B^T
  for (long i = 0; i < 2; ++i)
    for (long t = 0; t < 3; ++t) {
      double expect = 0.0;
      for (long j = 0; j < 4; ++j) expect += b.value()[static_cast<std::size_t>(t * 4 + j)];
      EXPECT_NEAR(a.grad()[static_cast<std::size_t>(i * 3 + t)], expect, 1e-5);
    }
}

TEST(Matmul, ShapeMismatchListsBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    ad::matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3]"), std::string::npos);
  }
}

TEST(SoftmaxRows, UniformRow) {
  Tensor x = Tensor::constant({1, 3}, {0, 0, 0});
  Tensor y = ad::softmax_rows(x, 1.0f);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(y.value()[static_cast<std::size_t>(j)], 1.0 / 3.0, 1e-6);
}

TEST(SoftmaxRows, TwoLogitValue) {
  Tensor x = Tensor::constant({1, 2}, {1, 0});
  Tensor y = ad::softmax_rows(x, 1.0f);
  EXPECT_NEAR(y.value()[0], 0.7311, 1e-4);
  EXPECT_NEAR(y.value()[1], 0.2689, 1e-4);
}

TEST(SoftmaxRows, LargeLogitsStayFinite) {
  Tensor x = Tensor::constant({1, 2}, {1000, 0});
  Tensor y = ad::softmax_rows(x, 1.0f);
  EXPECT_NEAR(y.value()[0], 1.0, 1e-6);
  EXPECT_NEAR(y.value()[1], 0.0, 1e-6);
}

TEST(SoftmaxRows, RowsSumToOne) {
  Rng rng(5);
  for (int it = 0; it < 30; ++it) {
    Tensor x = tsu::rand_param(rng, {4, 6}, -5.0f, 5.0f);
    Tensor y = ad::softmax_rows(x, 0.5f + static_cast<float>(rng.uniform()));
    for (long i = 0; i < 4; ++i) {
      double s = 0.0;
      for (long j = 0; j < 6; ++j) s += y.value()[static_cast<std::size_t>(i * 6 + j)];
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
  }
}

TEST(SoftmaxRows, NonPositiveTemperatureRejected) {
  Tensor x = Tensor::zeros({1, 2});
  EXPECT_THROW(ad::softmax_rows(x, 0.0f), NumericError);
  EXPECT_THROW(ad::softmax_rows(x, -1.0f), NumericError);
}

TEST(LayerNorm, ConstantRowGivesZeros) {
  Tensor x = Tensor::constant({1, 4}, {2, 2, 2, 2});
  Tensor g = Tensor::full({4}, 1.0f);
  Tensor b = Tensor::zeros({4});
  Tensor y = ad::layer_norm(x, g, b);
  for (float v : y.value()) EXPECT_NEAR(v, 0.0, 1e-3);
}

TEST(LayerNorm, TwoElementRow) {
  Tensor x = Tensor::constant({1, 2}, {1, 3});
  Tensor g = Tensor::full({2}, 1.0f);
  Tensor b = Tensor::zeros({2});
  Tensor y = ad::layer_norm(x, g, b);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-3);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-3);
}

TEST(LayerNorm, PreAffineMeanIsZero) {
  Rng rng(6);
  for (int it = 0; it < 20; ++it) {
    Tensor x = tsu::rand_param(rng, {3, 8}, -4.0f, 4.0f);
    Tensor y = ad::layer_norm(x, Tensor::full({8}, 1.0f), Tensor::zeros({8}));
    for (long i = 0; i < 3; ++i) {
      double s = 0.0;
      for (long j = 0; j < 8; ++j) s += y.value()[static_cast<std::size_t>(i * 8 + j)];
      EXPECT_LE(std::abs(s / 8.0), 1e-6);
    }
  }
}

TEST(Attention, SingleKeyReturnsItsValueRow) {
  Rng rng(7);
  Tensor q = tsu::rand_param(rng, {3, 4});
  Tensor k = tsu::rand_param(rng, {1, 4});
  Tensor v = tsu::rand_param(rng, {1, 4});
  Tensor out = ad::attention(q, k, v);
  for (long i = 0; i < 3; ++i)
    for (long j = 0; j < 4; ++j)
      EXPECT_NEAR(out.value()[static_cast<std::size_t>(i * 4 + j)], v.value()[static_cast<std::size_t>(j)], 1e-5);
}

TEST(Attention, FullyMaskedRowFallsBackToUnmasked) {
  Rng rng(8);
  Tensor q = tsu::rand_param(rng, {2, 4});
  Tensor k = tsu::rand_param(rng, {3, 4});
  Tensor v = tsu::rand_param(rng, {3, 4});
  ad::AttnMask mask;
  mask.rows = 2;
  mask.cols = 3;
  mask.keep = {1, 1, 1, 0, 0, 0};  // row 1 blocks everything
  Tensor masked = ad::attention(q, k, v, &mask);
  Tensor open = ad::attention(q, k, v);
  for (long j = 0; j < 4; ++j)
    EXPECT_NEAR(masked.value()[static_cast<std::size_t>(4 + j)],
                open.value()[static_cast<std::size_t>(4 + j)], 1e-6);
}

TEST(Attention, JointKeyValuePermutationInvariant) {
  Rng rng(9);
  Tensor q = tsu::rand_param(rng, {2, 4});
  std::vector<float> kv(12), vv(12);
  for (auto& x : kv) x = static_cast<float>(rng.uniform(-1, 1));
  for (auto& x : vv) x = static_cast<float>(rng.uniform(-1, 1));
  auto permuted = [](const std::vector<float>& src, const std::vector<int>& perm) {
    std::vector<float> out(src.size());
    for (std::size_t r = 0; r < perm.size(); ++r)
      for (int c = 0; c < 4; ++c)
        out[r * 4 + static_cast<std::size_t>(c)] =
            src[static_cast<std::size_t>(perm[r]) * 4 + static_cast<std::size_t>(c)];
    return out;
  };
  const std::vector<int> perm{2, 0, 1};
  Tensor out1 = ad::attention(q, Tensor::constant({3, 4}, kv), Tensor::constant({3, 4}, vv));
  Tensor out2 = ad::attention(q, Tensor::constant({3, 4}, permuted(kv, perm)),
                              Tensor::constant({3, 4}, permuted(vv, perm)));
  for (std::size_t i = 0; i < out1.value().size(); ++i)
    EXPECT_NEAR(out1.value()[i], out2.value()[i], 1e-5);
}

TEST(Attention, UnmaskedOutputIsConvexCombinationOfValues) {
  Rng rng(16);
  for (int it = 0; it < 20; ++it) {
    Tensor q = tsu::rand_param(rng, {3, 4}, -2, 2);
    Tensor k = tsu::rand_param(rng, {5, 4}, -2, 2);
    Tensor v = tsu::rand_param(rng, {5, 4}, -2, 2);
    Tensor out = ad::attention(q, k, v);
    for (long j = 0; j < 4; ++j) {
      float lo = 1e9f, hi = -1e9f;
      for (long r = 0; r < 5; ++r) {
        lo = std::min(lo, v.value()[static_cast<std::size_t>(r * 4 + j)]);
        hi = std::max(hi, v.value()[static_cast<std::size_t>(r * 4 + j)]);
      }
      for (long i = 0; i < 3; ++i) {
        const float x = out.value()[static_cast<std::size_t>(i * 4 + j)];
        EXPECT_GE(x, lo - 1e-5f);
        EXPECT_LE(x, hi + 1e-5f);
      }
    }
  }
}

TEST(FiniteDiff, NonFiniteLossRejected) {
  Tensor x = Tensor::param({2}, {1.0f, 2.0f});
  const float nan = std::numeric_limits<float>::quiet_NaN();
  Tensor bad = Tensor::constant({2}, {nan, nan});
  EXPECT_THROW(
      ad::finite_diff_check([&] { return ad::sum_all(ad::mul(x, bad)); }, {x}),
      NumericError);
}

TEST(Backward, SumGivesOnes) {
  Rng rng(10);
  Tensor x = tsu::rand_param(rng, {2, 3});
  ad::backward(ad::sum_all(x));
  for (float g : x.grad()) EXPECT_FLOAT_EQ(g, 1.0f);
}

TEST(Backward, ElementwiseSquare) {
  Tensor x = Tensor::param({2}, {1, 2});
  ad::backward(ad::sum_all(ad::mul(x, x)));
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
  EXPECT_FLOAT_EQ(x.grad()[1], 4.0f);
}

TEST(Backward, NonScalarRejected) {
  Tensor x = Tensor::param({2}, {1, 2});
  EXPECT_THROW(ad::backward(x), ShapeError);
}

TEST(Backward, RepeatedCallsAccumulate) {
  Tensor x = Tensor::param({2}, {1, 2});
  Tensor loss = ad::sum_all(x);
  ad::backward(loss);
  ad::backward(loss);
  EXPECT_FLOAT_EQ(x.grad()[0], 2.0f);
}

TEST(Backward, DisjointComponentsUntouched) {
  Tensor x = Tensor::param({2}, {1, 2});
  Tensor y = Tensor::param({2}, {3, 4});
  ad::backward(ad::sum_all(ad::mul(x, x)));
  ASSERT_EQ(y.grad().size(), 2u);
  EXPECT_FLOAT_EQ(y.grad()[0], 0.0f);
  EXPECT_FLOAT_EQ(y.grad()[1], 0.0f);
}

TEST(FiniteDiff, LinearIsNearExact) {
  Rng rng(11);
  Tensor x = tsu::rand_param(rng, {3, 3});
  const double err = ad::finite_diff_check([&] { return ad::sum_all(ad::scale(x, 2.5f)); }, {x});
  EXPECT_LE(err, 1e-5);
}

TEST(FiniteDiff, MatmulSoftmaxChain) {
  Rng rng(12);
  for (int it = 0; it < 20; ++it) {
    Tensor a = tsu::rand_param(rng, {3, 4});
    Tensor b = tsu::rand_param(rng, {4, 2});
    auto f = [&] {
      return ad::sum_all(ad::mul(ad::softmax_rows(ad::matmul(a, b), 1.0f),
                                 Tensor::constant({3, 2}, {1, -1, 2, 0.5f, -2, 1})));
    };
    ad::FiniteDiffOptions opt;
    opt.seed = static_cast<std::uint64_t>(it);
    EXPECT_LE(ad::finite_diff_check(f, {a, b}, opt), 1e-3);
  }
}

TEST(FiniteDiff, WrongGradientRuleIsCaught) {
  // Test double: y = x*x forward with a deliberately wrong backward (3x).
  auto bad_square = [](const Tensor& x) {
    auto n = ad::detail::make_op(x.shape(), {x.node()});
    for (std::size_t i = 0; i < x.value().size(); ++i)
      n->work[i] = static_cast<double>(x.value()[i]) * x.value()[i];
    n->mirror();
    n->backprop = [](ad::Node& self) {
      auto& in = *self.inputs[0];
      in.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        in.grad[i] += self.grad[i] * 3.0f * in.value[i];
    };
    return Tensor(n);
  };
  Tensor x = Tensor::param({3}, {0.7f, -1.2f, 2.1f});
  const double err = ad::finite_diff_check([&] { return ad::sum_all(bad_square(x)); }, {x});
  EXPECT_GT(err, 1e-1);
}

// Random compositions of three ops drawn from the kernel vocabulary.
TEST(FiniteDiff, RandomThreeOpGraphs) {
  Rng rng(13);
  for (int it = 0; it < 40; ++it) {
    Tensor a = tsu::rand_param(rng, {3, 4}, -1.5f, 1.5f);
    Tensor b = tsu::rand_param(rng, {3, 4}, -1.5f, 1.5f);
    Tensor w = tsu::rand_param(rng, {4, 3}, -1.0f, 1.0f);
    auto pick = [&](Tensor t, long choice) {
      switch (choice) {
        case 0: return ad::gelu(t);
        case 1: return ad::softmax_rows(t, 1.0f);
        case 2: return ad::l2_normalize_rows(t);
        case 3: return ad::add(t, b);
        case 4: return ad::mul(t, b);
        default: return ad::scale(t, -0.5f);
      }
    };
    const long c1 = rng.uniform_int(6), c2 = rng.uniform_int(6);
    auto g = [&, c1, c2] { return ad::sum_all(ad::matmul(pick(pick(a, c1), c2), w)); };
    ad::FiniteDiffOptions opt;
    opt.seed = static_cast<std::uint64_t>(100 + it);
    EXPECT_LE(ad::finite_diff_check(g, {a, b, w}, opt), 1e-3) << "composition " << c1 << "," << c2;
  }
}

TEST(FiniteDiff, PerOpSweep) {
  Rng rng(14);
  ad::FiniteDiffOptions opt;
  for (int it = 0; it < 25; ++it) {
    opt.seed = static_cast<std::uint64_t>(it);
    Tensor a = tsu::rand_param(rng, {2, 6}, -1.5f, 1.5f);
    Tensor b = tsu::rand_param(rng, {2, 6}, -1.5f, 1.5f);
    Tensor v = tsu::rand_param(rng, {6}, -1.0f, 1.0f);
    Tensor s = tsu::rand_param(rng, {1}, 0.5f, 1.5f);
    Tensor g6 = tsu::rand_param(rng, {6}, 0.5f, 1.5f);
    Tensor table = tsu::rand_param(rng, {5, 3}, -1.0f, 1.0f);
    Tensor img = tsu::rand_param(rng, {4, 4, 3}, 0.0f, 1.0f);
    Tensor probe = Tensor::constant({2, 6}, {1, -1, 0.5f, 2, -0.3f, 1, 0.7f, -2, 1, 0.2f, -1, 0.4f});
    auto probe_sum = [&](Tensor t) { return ad::sum_all(ad::mul(t, probe)); };
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::add(a, b)); }, {a, b}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::sub(a, b)); }, {a, b}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::mul(a, b)); }, {a, b}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::add_rowvec(a, v)); }, {a, v}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::scale_by(a, s)); }, {a, s}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::gelu(a)); }, {a}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::exp(ad::scale(a, 0.3f))); }, {a}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::layer_norm(a, g6, v)); }, {a, g6, v}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::l2_normalize_rows(a)); }, {a}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::mul(ad::transpose(a), ad::transpose(probe))); }, {a}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::slice_rows(a, 0, 1)); }, {a}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::slice_cols(a, 1, 4)); }, {a}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return probe_sum(ad::concat_rows({ad::slice_rows(a, 0, 1), ad::slice_rows(b, 1, 2)})); }, {a, b}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::mean_rows(a)); }, {a}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::gather_rows(table, {0, 2, 2, 4})); }, {table}, opt), 1e-3);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::mul(ad::extract_patches(img, 2), ad::extract_patches(img, 2))); }, {img}, opt), 1e-3);
    Tensor q = tsu::rand_param(rng, {2, 4}, -1, 1);
    Tensor k = tsu::rand_param(rng, {3, 4}, -1, 1);
    Tensor vv = tsu::rand_param(rng, {3, 4}, -1, 1);
    EXPECT_LE(ad::finite_diff_check([&] { return ad::sum_all(ad::attention(q, k, vv)); }, {q, k, vv}, opt), 1e-3);
  }
}

TEST(FiniteDiff, StepDomainEnforced) {
  Tensor x = Tensor::param({1}, {1.0f});
  ad::FiniteDiffOptions opt;
  opt.step = 0.5;
  EXPECT_THROW(ad::finite_diff_check([&] { return x; }, {x}, opt), NumericError);
}

TEST(Serialize, RoundTripRestoresValues) {
  ParamStore a;
  Rng rng(15);
  a.create_randn("w1", {3, 4}, rng, 1.0f);
  a.create_randn("w2", {5}, rng, 0.3f);
  const std::string blob = a.serialize();

  ParamStore b;
  b.create_full("w1", {3, 4}, 0.0f);
  b.create_full("w2", {5}, 0.0f);
  b.load(blob);
  for (std::size_t i = 0; i < a.params().size(); ++i)
    EXPECT_EQ(a.params()[i].value(), b.params()[i].value());
}

TEST(Serialize, BadMagicRejected) {
  ParamStore a;
  a.create_full("w", {2}, 1.0f);
  std::string blob = a.serialize();
  blob[0] = 'X';
  ParamStore b;
  b.create_full("w", {2}, 0.0f);
  EXPECT_THROW(b.load(blob), FormatError);
}

TEST(Serialize, ShapeMismatchRejected) {
  ParamStore a;
  a.create_full("w", {2}, 1.0f);
  const std::string blob = a.serialize();
  ParamStore b;
  b.create_full("w", {3}, 0.0f);
  EXPECT_THROW(b.load(blob), FormatError);
}
