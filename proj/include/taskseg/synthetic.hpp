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
// Synthetic scenes: horizontal stuff bands with 1-4 colored thing shapes on
// top. Color correlates with class, which is the learnable signal. Every
// segment is guaranteed to stay visible, including on the stride-4 lattice
// the training masks are sampled on.

#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/dataset.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/rng.hpp"

namespace taskseg {

inline ClassTable default_class_table() {
  ClassTable t;
  t.entries = {{0, "sky", false}, {1, "grass", false}, {2, "box", true}, {3, "ball", true}};
  return t;
}

/// Distinct, stable per-class color (golden-ratio hue walk).
inline std::array<float, 3> class_color(int class_id) {
  double h = std::fmod(0.13 + 0.61803398875 * class_id, 1.0) * 6.0;
  const double s = 0.65, v = 0.85;
  const double c = v * s;
  const double x = c * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

namespace detail {

/// True when every recorded segment keeps at least one pixel on the
/// full grid and one on the stride-4 lattice.
inline bool segments_visible(const std::vector<int>& map, int h, int w, int max_id) {
  std::vector<bool> full(static_cast<std::size_t>(max_id) + 1, false);
  std::vector<bool> lattice(static_cast<std::size_t>(max_id) + 1, false);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int id = map[static_cast<std::size_t>(y) * w + x];
      if (id == 0) continue;
      full[static_cast<std::size_t>(id)] = true;
      if (y % 4 == 0 && x % 4 == 0) lattice[static_cast<std::size_t>(id)] = true;
    }
  for (int id = 1; id <= max_id; ++id)
    if (!full[static_cast<std::size_t>(id)] || !lattice[static_cast<std::size_t>(id)]) return false;
  return true;
}

}  // namespace detail

/// One scene. Draws from the rng until the visibility constraints hold, so a
/// fixed rng stream yields a fixed scene.
inline DatasetSample generate_scene(Rng& rng, int h, int w, const ClassTable& classes) {
  const auto stuff = classes.stuff_ids();
  const auto things = classes.thing_ids();
  if (stuff.empty() || things.size() < 2)
    throw ValidationError("scene generator needs at least one stuff and two thing classes");

  DatasetSample sample;
  auto& label = sample.label;
  label.width = w;
  label.height = h;

  for (int attempt = 0; attempt < 1000; ++attempt) {
    label.segments.clear();
    label.segment_map.assign(static_cast<std::size_t>(h) * w, 0);

    // Stuff bands with jittered boundaries.
    const int s_count = static_cast<int>(stuff.size());
    std::vector<int> bounds{0};
    for (int i = 1; i < s_count; ++i) {
      const int base = h * i / s_count;
      const int jitter = static_cast<int>(rng.uniform_int(std::max(1L, h / (2L * s_count)))) -
                         h / (4 * s_count);
      bounds.push_back(std::clamp(base + jitter, i, h - (s_count - i)));
    }
    bounds.push_back(h);
    for (int i = 0; i < s_count; ++i) {
      const int id = i + 1;
      for (int y = bounds[static_cast<std::size_t>(i)]; y < bounds[static_cast<std::size_t>(i) + 1]; ++y)
        for (int x = 0; x < w; ++x) label.segment_map[static_cast<std::size_t>(y) * w + x] = id;
      label.segments.push_back({id, stuff[static_cast<std::size_t>(i)], false});
    }

    // Thing shapes, later ones drawn on top. Sizes scale with the scene.
    const int k = std::max(1, std::min(h, w) / 32);
    const int n_shapes = 1 + static_cast<int>(rng.uniform_int(4));
    for (int i = 0; i < n_shapes; ++i) {
      const int id = s_count + 1 + i;
      const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(static_cast<long>(things.size())));
      const int cls = things[pick];
      if (pick % 2 == 0) {
        const int bw = k * (4 + static_cast<int>(rng.uniform_int(7)));
        const int bh = k * (4 + static_cast<int>(rng.uniform_int(7)));
        const int x0 = static_cast<int>(rng.uniform_int(std::max(1, w - bw)));
        const int y0 = static_cast<int>(rng.uniform_int(std::max(1, h - bh)));
        for (int y = y0; y < std::min(h, y0 + bh); ++y)
          for (int x = x0; x < std::min(w, x0 + bw); ++x)
            label.segment_map[static_cast<std::size_t>(y) * w + x] = id;
      } else {
        const int r = k * 3 + static_cast<int>(rng.uniform_int(4L * k + 1));
        const int cx = r + static_cast<int>(rng.uniform_int(std::max(1, w - 2 * r)));
        const int cy = r + static_cast<int>(rng.uniform_int(std::max(1, h - 2 * r)));
        for (int y = std::max(0, cy - r); y <= std::min(h - 1, cy + r); ++y)
          for (int x = std::max(0, cx - r); x <= std::min(w - 1, cx + r); ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
              label.segment_map[static_cast<std::size_t>(y) * w + x] = id;
      }
      label.segments.push_back({id, cls, true});
    }

    if (detail::segments_visible(label.segment_map, h, w, s_count + n_shapes)) break;
    if (attempt == 999) throw ValidationError("scene generator failed to place visible segments");
  }

  // Render: class color plus per-pixel noise.
  sample.image.width = w;
  sample.image.height = h;
  sample.image.pixels.resize(static_cast<std::size_t>(h) * w * 3);
  std::vector<int> seg_class(label.segments.size() + 1, 0);
  for (const auto& s : label.segments) seg_class[static_cast<std::size_t>(s.id)] = s.class_id;
  for (long i = 0; i < static_cast<long>(h) * w; ++i) {
    const int id = label.segment_map[static_cast<std::size_t>(i)];
    const auto color = class_color(seg_class[static_cast<std::size_t>(id)]);
    for (int ch = 0; ch < 3; ++ch) {
      const double v =
          std::clamp(static_cast<double>(color[static_cast<std::size_t>(ch)]) + rng.uniform(-0.08, 0.08),
                     0.0, 1.0);
      sample.image.pixels[static_cast<std::size_t>(3 * i + ch)] =
          static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return sample;
}

/// Writes `count` scenes plus the class table in the dataset layout.
inline Dataset generate_synthetic(std::uint64_t seed, int count, int h, int w,
                                  const ClassTable& classes, const std::string& out_dir) {
  Dataset ds;
  ds.classes = classes;
  Rng master(seed);
  for (int i = 0; i < count; ++i) {
    Rng scene_rng = master.fork("scene-" + std::to_string(i));
    DatasetSample s = generate_scene(scene_rng, h, w, classes);
    char name[32];
    std::snprintf(name, sizeof(name), "scene_%05d.png", i);
    s.file_name = name;
    s.label.validate(classes);
    ds.samples.push_back(std::move(s));
  }
  if (!out_dir.empty()) write_dataset(out_dir, ds);
  return ds;
}

}  // namespace taskseg
