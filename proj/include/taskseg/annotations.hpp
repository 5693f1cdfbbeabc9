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
// Panoptic annotation data model. A single panoptic label is the source for
// all three task regimes: per-task ground truths are derived, never stored.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "taskseg/errors.hpp"
#include "taskseg/rng.hpp"

namespace taskseg {

enum class TaskKind { panoptic, instance, semantic };

inline const char* to_string(TaskKind t) {
  switch (t) {
    case TaskKind::panoptic: return "panoptic";
    case TaskKind::instance: return "instance";
    case TaskKind::semantic: return "semantic";
  }
  return "?";
}

inline TaskKind task_from_string(const std::string& s) {
  if (s == "panoptic") return TaskKind::panoptic;
  if (s == "instance") return TaskKind::instance;
  if (s == "semantic") return TaskKind::semantic;
  throw ValidationError("unknown task: " + s);
}

struct ClassEntry {
  int id = 0;
  std::string name;
  bool is_thing = false;
};

/// Category table. Ids must be contiguous from 0.
struct ClassTable {
  std::vector<ClassEntry> entries;

  int size() const { return static_cast<int>(entries.size()); }

  const ClassEntry& at(int id) const {
    if (id < 0 || id >= size()) throw ValidationError("class id out of range: " + std::to_string(id));
    return entries[static_cast<std::size_t>(id)];
  }

  bool is_thing(int id) const { return at(id).is_thing; }

  std::vector<int> thing_ids() const {
    std::vector<int> out;
    for (const auto& e : entries)
      if (e.is_thing) out.push_back(e.id);
    return out;
  }

  std::vector<int> stuff_ids() const {
    std::vector<int> out;
    for (const auto& e : entries)
      if (!e.is_thing) out.push_back(e.id);
    return out;
  }

  void validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].id != static_cast<int>(i))
        throw ValidationError("class ids must be contiguous from 0; position " + std::to_string(i) +
                              " holds id " + std::to_string(entries[i].id));
      if (entries[i].name.empty())
        throw ValidationError("class " + std::to_string(entries[i].id) + " has an empty name");
    }
  }
};

struct SegmentInfo {
  int id = 0;  // > 0; 0 in the map means unlabeled
  int class_id = 0;
  bool is_thing = false;
};

/// Per-pixel segment-id map plus per-segment records.
struct PanopticLabel {
  int width = 0;
  int height = 0;
  std::vector<int> segment_map;       // height*width, row-major
  std::vector<SegmentInfo> segments;  // one record per distinct nonzero id

  long pixel_count() const { return static_cast<long>(width) * height; }

  const SegmentInfo* find_segment(int id) const {
    for (const auto& s : segments)
      if (s.id == id) return &s;
    return nullptr;
  }

  /// Checks every structural invariant against a class table.
  void validate(const ClassTable& classes) const {
    if (width <= 0 || height <= 0) throw ValidationError("label has non-positive extent");
    if (static_cast<long>(segment_map.size()) != pixel_count())
      throw ValidationError("segment map size does not match extents");
    std::set<int> seg_ids;
    std::set<int> stuff_classes;
    for (const auto& s : segments) {
      if (s.id <= 0) throw ValidationError("segment id must be positive, got " + std::to_string(s.id));
      if (!seg_ids.insert(s.id).second)
        throw ValidationError("duplicate segment id " + std::to_string(s.id));
      const auto& cls = classes.at(s.class_id);
      if (cls.is_thing != s.is_thing)
        throw ValidationError("segment " + std::to_string(s.id) + " thing/stuff flag disagrees with class " +
                              cls.name);
      if (!s.is_thing && !stuff_classes.insert(s.class_id).second)
        throw ValidationError("stuff class " + std::to_string(s.class_id) +
                              " has more than one segment");
    }
    std::map<int, long> areas;
    for (int v : segment_map) {
      if (v == 0) continue;
      if (!seg_ids.count(v))
        throw ValidationError("segment id " + std::to_string(v) +
                              " present in map but missing from segment records");
      ++areas[v];
    }
    for (const auto& s : segments)
      if (!areas.count(s.id))
        throw ValidationError("segment " + std::to_string(s.id) + " has no pixels");
  }
};

struct MaskTarget {
  int class_id = 0;
  std::vector<std::uint8_t> mask;  // height*width, 0/1
};

/// Task-conditioned set of (class, binary mask) supervision targets.
struct TaskGroundTruth {
  TaskKind task = TaskKind::panoptic;
  int width = 0;
  int height = 0;
  std::vector<MaskTarget> targets;
};

/// Uniform draw over the three task regimes.
inline TaskKind sample_task(Rng& rng) {
  switch (rng.uniform_int(3)) {
    case 0: return TaskKind::panoptic;
    case 1: return TaskKind::instance;
    default: return TaskKind::semantic;
  }
}

/// Derives the task-specific target set from a panoptic label.
///
/// panoptic: one target per thing segment plus one per stuff class;
/// instance: thing segments only; semantic: one merged mask per class.
/// Targets are ordered by (class id, smallest contributing segment id).
inline TaskGroundTruth derive_task_gt(const PanopticLabel& label, const ClassTable& classes,
                                      TaskKind task) {
  for (int v : label.segment_map)
    if (v != 0 && label.find_segment(v) == nullptr)
      throw ValidationError("segment id " + std::to_string(v) +
                            " present in map but missing from segment records");

  TaskGroundTruth gt;
  gt.task = task;
  gt.width = label.width;
  gt.height = label.height;
  const long n = label.pixel_count();

  // (class_id, min segment id, member segment ids) per emitted target.
  struct Bucket {
    int class_id;
    int min_seg;
    std::set<int> members;
  };
  std::vector<Bucket> buckets;
  auto bucket_for = [&](int class_id, int seg_id, bool merge_by_class) -> Bucket& {
    if (merge_by_class) {
      for (auto& b : buckets)
        if (b.class_id == class_id) {
          b.min_seg = std::min(b.min_seg, seg_id);
          return b;
        }
    }
    buckets.push_back({class_id, seg_id, {}});
    return buckets.back();
  };

  std::vector<SegmentInfo> ordered = label.segments;
  std::sort(ordered.begin(), ordered.end(),
            [](const SegmentInfo& a, const SegmentInfo& b) { return a.id < b.id; });
  for (const auto& s : ordered) {
    const bool wanted = task != TaskKind::instance || s.is_thing;
    if (!wanted) continue;
    const bool merge = task == TaskKind::semantic;
    bucket_for(s.class_id, s.id, merge).members.insert(s.id);
  }
  std::stable_sort(buckets.begin(), buckets.end(), [](const Bucket& a, const Bucket& b) {
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.min_seg < b.min_seg;
  });

  std::map<int, int> seg_to_target;  // segment id -> target index
  for (std::size_t t = 0; t < buckets.size(); ++t)
    for (int id : buckets[t].members) seg_to_target[id] = static_cast<int>(t);

  gt.targets.resize(buckets.size());
  for (std::size_t t = 0; t < buckets.size(); ++t) {
    gt.targets[t].class_id = buckets[t].class_id;
    gt.targets[t].mask.assign(static_cast<std::size_t>(n), 0);
  }
  for (long i = 0; i < n; ++i) {
    const int v = label.segment_map[static_cast<std::size_t>(i)];
    if (v == 0) continue;
    auto it = seg_to_target.find(v);
    if (it == seg_to_target.end()) continue;  // stuff pixels under instance task
    gt.targets[static_cast<std::size_t>(it->second)].mask[static_cast<std::size_t>(i)] = 1;
  }
  // A recorded segment with no visible pixels would produce an empty target.
  for (std::size_t t = 0; t < gt.targets.size(); ++t) {
    long area = 0;
    for (auto v : gt.targets[t].mask) area += v;
    if (area == 0)
      throw ValidationError("target for class " + std::to_string(gt.targets[t].class_id) +
                            " has no pixels");
  }
  return gt;
}

// COCO-style id packing used by the panoptic interchange PNGs.

/// id = R + 256*G + 65536*B per pixel.
inline std::vector<int> decode_segment_png(const std::vector<std::uint8_t>& rgb, int width,
                                           int height) {
  if (width <= 0 || height <= 0) throw ShapeError("decode_segment_png: non-positive extents");
  if (static_cast<long>(rgb.size()) != static_cast<long>(width) * height * 3)
    throw ShapeError("decode_segment_png: byte count does not match extents");
  std::vector<int> ids(static_cast<std::size_t>(width) * height);
  for (std::size_t i = 0; i < ids.size(); ++i)
    ids[i] = static_cast<int>(rgb[3 * i]) + 256 * static_cast<int>(rgb[3 * i + 1]) +
             65536 * static_cast<int>(rgb[3 * i + 2]);
  return ids;
}

/// Exact inverse of decode_segment_png. Ids must fit in 24 bits.
inline std::vector<std::uint8_t> encode_segment_png(const std::vector<int>& ids, int width,
                                                    int height) {
  if (width <= 0 || height <= 0) throw ShapeError("encode_segment_png: non-positive extents");
  if (static_cast<long>(ids.size()) != static_cast<long>(width) * height)
    throw ShapeError("encode_segment_png: id count does not match extents");
  std::vector<std::uint8_t> rgb(ids.size() * 3);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const int v = ids[i];
    if (v < 0 || v >= (1 << 24))
      throw NumericError("encode_segment_png: id " + std::to_string(v) + " outside [0, 2^24)");
    rgb[3 * i] = static_cast<std::uint8_t>(v & 0xff);
    rgb[3 * i + 1] = static_cast<std::uint8_t>((v >> 8) & 0xff);
    rgb[3 * i + 2] = static_cast<std::uint8_t>((v >> 16) & 0xff);
  }
  return rgb;
}

/// Per-pixel class map (-1 where unlabeled) for semantic evaluation.
inline std::vector<int> semantic_map_from_label(const PanopticLabel& label) {
  std::map<int, int> seg_class;
  for (const auto& s : label.segments) seg_class[s.id] = s.class_id;
  std::vector<int> out(label.segment_map.size(), -1);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const int v = label.segment_map[i];
    if (v == 0) continue;
    auto it = seg_class.find(v);
    if (it == seg_class.end())
      throw ValidationError("segment id " + std::to_string(v) + " missing from records");
    out[i] = it->second;
  }
  return out;
}

}  // namespace taskseg
