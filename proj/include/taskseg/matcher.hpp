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
// Prediction-to-target assignment: a classification + mask cost matrix and an
// exact least-cost bipartite solver (Jonker-Volgenant shortest augmenting
// paths, O(n^3)). Matching runs on plain values; it is not differentiated.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "taskseg/errors.hpp"

namespace taskseg {

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (query index, target index)
  std::vector<int> unmatched_queries;      // assigned no-object
};

/// cost[q,t] = w_cls * (-p(class_t | q)) + w_bce * bce(q,t) + w_dice * dice(q,t).
/// Masks are compared at the prediction resolution (P pixels per mask).
inline std::vector<double> match_cost_matrix(const std::vector<float>& class_probs, long n_queries,
                                             long n_classes_plus1,
                                             const std::vector<float>& mask_logits, long n_pixels,
                                             const std::vector<std::uint8_t>& target_masks,
                                             const std::vector<int>& target_classes,
                                             double w_cls, double w_bce, double w_dice) {
  const long m = static_cast<long>(target_classes.size());
  if (m > n_queries)
    throw CapacityError("match_cost_matrix: " + std::to_string(m) + " targets exceed " +
                            std::to_string(n_queries) + " queries",
                        m - n_queries);
  if (static_cast<long>(class_probs.size()) != n_queries * n_classes_plus1 ||
      static_cast<long>(mask_logits.size()) != n_queries * n_pixels ||
      static_cast<long>(target_masks.size()) != m * n_pixels)
    throw ShapeError("match_cost_matrix: inconsistent buffer sizes");
  for (int c : target_classes)
    if (c < 0 || c >= n_classes_plus1 - 1)
      throw ShapeError("match_cost_matrix: target class " + std::to_string(c) + " out of range");

  std::vector<double> cost(static_cast<std::size_t>(n_queries * std::max(m, 1L)), 0.0);
  if (m == 0) return cost;
  // Per-query sums reused across targets.
  std::vector<double> sig(static_cast<std::size_t>(n_queries * n_pixels));
  for (long i = 0; i < n_queries * n_pixels; ++i)
    sig[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-static_cast<double>(
                                                 mask_logits[static_cast<std::size_t>(i)])));
  for (long q = 0; q < n_queries; ++q) {
    const float* zrow = mask_logits.data() + q * n_pixels;
    const double* srow = sig.data() + q * n_pixels;
    double sum_sig = 0.0, sum_sp = 0.0;  // sum sigmoid, sum softplus(z)
    for (long j = 0; j < n_pixels; ++j) {
      sum_sig += srow[j];
      sum_sp += std::max(static_cast<double>(zrow[j]), 0.0) +
                std::log1p(std::exp(-std::abs(static_cast<double>(zrow[j]))));
    }
    for (long t = 0; t < m; ++t) {
      const std::uint8_t* g = target_masks.data() + t * n_pixels;
      double inter = 0.0, g_area = 0.0, z_on_g = 0.0;
      for (long j = 0; j < n_pixels; ++j)
        if (g[j]) {
          inter += srow[j];
          g_area += 1.0;
          z_on_g += zrow[j];
        }
      // mean over pixels of softplus(z) - z*g
      const double bce = (sum_sp - z_on_g) / static_cast<double>(n_pixels);
      const double dice = 1.0 - (2.0 * inter + 1.0) / (sum_sig + g_area + 1.0);
      const double p_cls =
          class_probs[static_cast<std::size_t>(q * n_classes_plus1 + target_classes[static_cast<std::size_t>(t)])];
      cost[static_cast<std::size_t>(q * m + t)] = w_cls * (-p_cls) + w_bce * bce + w_dice * dice;
    }
  }
  for (double c : cost)
    if (!std::isfinite(c)) throw NumericError("match_cost_matrix: non-finite cost");
  return cost;
}

/// Least-cost assignment of every target (column) to a distinct query (row).
/// Requires n_targets <= n_queries; remaining queries come back unmatched.
inline MatchResult hungarian_solve(const std::vector<double>& cost, long n_queries,
                                   long n_targets) {
  if (n_targets > n_queries)
    throw CapacityError("hungarian_solve: more targets than queries", n_targets - n_queries);
  MatchResult out;
  if (n_targets == 0) {
    for (long q = 0; q < n_queries; ++q) out.unmatched_queries.push_back(static_cast<int>(q));
    return out;
  }
  if (static_cast<long>(cost.size()) != n_queries * n_targets)
    throw ShapeError("hungarian_solve: cost buffer size mismatch");
  for (double c : cost)
    if (!std::isfinite(c)) throw NumericError("hungarian_solve: non-finite cost entry");

  // Square n x n problem; padding columns cost 0 for every row.
  const long n = n_queries;
  auto entry = [&](long r, long c) -> double {
    return c < n_targets ? cost[static_cast<std::size_t>(r * n_targets + c)] : 0.0;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<long> p(static_cast<std::size_t>(n + 1), 0), way(static_cast<std::size_t>(n + 1), 0);
  for (long i = 1; i <= n; ++i) {
    p[0] = i;
    long j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(n + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const long i0 = p[static_cast<std::size_t>(j0)];
      long j1 = 0;
      double delta = inf;
      for (long j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = entry(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (long j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const long j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<long> row_to_col(static_cast<std::size_t>(n), -1);
  for (long j = 1; j <= n; ++j)
    if (p[static_cast<std::size_t>(j)] > 0) row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  for (long q = 0; q < n; ++q) {
    const long c = row_to_col[static_cast<std::size_t>(q)];
    if (c >= 0 && c < n_targets)
      out.pairs.emplace_back(static_cast<int>(q), static_cast<int>(c));
    else
      out.unmatched_queries.push_back(static_cast<int>(q));
  }
  std::sort(out.pairs.begin(), out.pairs.end());
  return out;
}

inline double assignment_cost(const std::vector<double>& cost, long n_targets,
                              const MatchResult& match) {
  double total = 0.0;
  for (const auto& [q, t] : match.pairs) total += cost[static_cast<std::size_t>(q) * n_targets + t];
  return total;
}

}  // namespace taskseg
