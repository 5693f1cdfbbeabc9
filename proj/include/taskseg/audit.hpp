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
// Consistency audit between panoptic-derived instance ground truth and an
// externally supplied instance annotation set. A derived instance is covered
// by a supplied instance of the same class when more than half of its area
// lies inside it; uncovered instances are reported as missing, and a supplied
// instance covering two or more derived instances flags them as merged.

#pragma once

#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/dataset.hpp"
#include "taskseg/errors.hpp"

namespace taskseg {

struct AuditFinding {
  std::string image;
  int segment_id = 0;  // panoptic segment backing the derived instance
  int class_id = 0;
  std::string issue;     // "missing" or "merged"
  int supplied_id = -1;  // the merging instance, when issue == "merged"
};

inline std::vector<AuditFinding> audit_instances(const Dataset& ds,
                                                 const std::vector<InstanceAnnotation>& supplied) {
  std::map<std::string, const InstanceAnnotation*> by_name;
  for (const auto& a : supplied) by_name[a.file_name] = &a;

  std::vector<AuditFinding> findings;
  for (const auto& sample : ds.samples) {
    auto it = by_name.find(sample.file_name);
    if (it == by_name.end())
      throw ValidationError("audit: no instance annotation for " + sample.file_name);
    const InstanceAnnotation& ann = *it->second;
    if (ann.width != sample.label.width || ann.height != sample.label.height)
      throw ValidationError("audit: resolution mismatch for " + sample.file_name);

    const TaskGroundTruth derived = derive_task_gt(sample.label, ds.classes, TaskKind::instance);
    const long n = sample.label.pixel_count();

    // Segment id behind each derived target (instance targets are 1:1 with
    // thing segments, so any covered pixel identifies it).
    std::vector<int> seg_of_target(derived.targets.size(), 0);
    for (std::size_t t = 0; t < derived.targets.size(); ++t)
      for (long i = 0; i < n; ++i)
        if (derived.targets[t].mask[static_cast<std::size_t>(i)]) {
          seg_of_target[t] = sample.label.segment_map[static_cast<std::size_t>(i)];
          break;
        }

    std::map<int, int> supplied_class;
    for (const auto& [id, cls] : ann.instances) supplied_class[id] = cls;

    // covering[t] = supplied id holding more than half of target t's area.
    std::vector<int> covering(derived.targets.size(), -1);
    for (std::size_t t = 0; t < derived.targets.size(); ++t) {
      std::map<int, long> overlap;
      long area = 0;
      for (long i = 0; i < n; ++i) {
        if (!derived.targets[t].mask[static_cast<std::size_t>(i)]) continue;
        ++area;
        const int sid = ann.instance_map[static_cast<std::size_t>(i)];
        if (sid != 0) ++overlap[sid];
      }
      long best = 0;
      int best_id = -1;
      for (const auto& [sid, count] : overlap) {
        auto cls_it = supplied_class.find(sid);
        if (cls_it == supplied_class.end() || cls_it->second != derived.targets[t].class_id) continue;
        if (count > best) {
          best = count;
          best_id = sid;
        }
      }
      if (best_id >= 0 && 2 * best > area) covering[t] = best_id;
    }

    std::map<int, std::vector<std::size_t>> grouped;  // supplied id -> derived targets
    for (std::size_t t = 0; t < derived.targets.size(); ++t) {
      if (covering[t] < 0) {
        findings.push_back({sample.file_name, seg_of_target[t], derived.targets[t].class_id,
                            "missing", -1});
      } else {
        grouped[covering[t]].push_back(t);
      }
    }
    for (const auto& [sid, members] : grouped) {
      if (members.size() < 2) continue;
      for (std::size_t t : members)
        findings.push_back({sample.file_name, seg_of_target[t], derived.targets[t].class_id,
                            "merged", sid});
    }
  }
  return findings;
}

inline std::string format_findings(const std::vector<AuditFinding>& findings) {
  std::ostringstream os;
  for (const auto& f : findings) {
    os << f.image << '\t' << f.segment_id << '\t' << f.class_id << '\t' << f.issue;
    if (f.issue == "merged") os << '\t' << f.supplied_id;
    os << '\n';
  }
  return os.str();
}

}  // namespace taskseg
