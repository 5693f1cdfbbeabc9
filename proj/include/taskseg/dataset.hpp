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
// On-disk dataset layout:
//   <root>/images/<name>.png     RGB scene
//   <root>/panoptic/<name>.png   id-packed segment map (id = R+256G+65536B)
//   <root>/panoptic.meta         UTF-8, one record per line, tab-separated:
//     class   <id> <name> <thing|stuff>
//     image   <file> <width> <height>
//     segment <id> <class_id> <thing|stuff>   (attached to preceding image)
//
// External instance annotations (audit input) use the same shape:
//   <root>/instance/<name>.png + <root>/instance.meta with
//     image    <file> <width> <height>
//     instance <id> <class_id>

#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "taskseg/annotations.hpp"
#include "taskseg/errors.hpp"
#include "taskseg/png_io.hpp"

namespace taskseg {

struct DatasetSample {
  std::string file_name;
  Rgb8Image image;
  PanopticLabel label;
};

struct Dataset {
  ClassTable classes;
  std::vector<DatasetSample> samples;
};

namespace detail {

inline std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == '\t') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline bool parse_kind_flag(const std::string& s, const std::string& where) {
  if (s == "thing") return true;
  if (s == "stuff") return false;
  throw FormatError("expected thing|stuff in " + where + ", got '" + s + "'");
}

}  // namespace detail

inline void write_dataset(const std::string& root, const Dataset& ds) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(root) / "images", ec);
  fs::create_directories(fs::path(root) / "panoptic", ec);
  if (ec) throw IoError("cannot create dataset directories under " + root);

  std::ofstream meta(fs::path(root) / "panoptic.meta");
  if (!meta) throw IoError("cannot write panoptic.meta under " + root);
  for (const auto& e : ds.classes.entries)
    meta << "class\t" << e.id << '\t' << e.name << '\t' << (e.is_thing ? "thing" : "stuff") << '\n';
  for (const auto& s : ds.samples) {
    write_png_rgb8((fs::path(root) / "images" / s.file_name).string(), s.image);
    Rgb8Image packed{s.label.width, s.label.height,
                     encode_segment_png(s.label.segment_map, s.label.width, s.label.height)};
    write_png_rgb8((fs::path(root) / "panoptic" / s.file_name).string(), packed);
    meta << "image\t" << s.file_name << '\t' << s.label.width << '\t' << s.label.height << '\n';
    for (const auto& seg : s.label.segments)
      meta << "segment\t" << seg.id << '\t' << seg.class_id << '\t'
           << (seg.is_thing ? "thing" : "stuff") << '\n';
  }
  if (!meta) throw IoError("write failed for panoptic.meta under " + root);
}

inline Dataset read_dataset(const std::string& root) {
  namespace fs = std::filesystem;
  const auto meta_path = fs::path(root) / "panoptic.meta";
  std::ifstream meta(meta_path);
  if (!meta) throw IoError("cannot open " + meta_path.string());

  Dataset ds;
  std::string line;
  DatasetSample* current = nullptr;
  long line_no = 0;
  while (std::getline(meta, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    const std::string where = meta_path.string() + ":" + std::to_string(line_no);
    try {
      if (f[0] == "class") {
        if (f.size() != 4) throw FormatError("class record needs 4 fields at " + where);
        ds.classes.entries.push_back(
            {std::stoi(f[1]), f[2], detail::parse_kind_flag(f[3], where)});
      } else if (f[0] == "image") {
        if (f.size() != 4) throw FormatError("image record needs 4 fields at " + where);
        ds.samples.emplace_back();
        current = &ds.samples.back();
        current->file_name = f[1];
        current->label.width = std::stoi(f[2]);
        current->label.height = std::stoi(f[3]);
      } else if (f[0] == "segment") {
        if (current == nullptr) throw FormatError("segment record before any image at " + where);
        if (f.size() != 4) throw FormatError("segment record needs 4 fields at " + where);
        current->label.segments.push_back(
            {std::stoi(f[1]), std::stoi(f[2]), detail::parse_kind_flag(f[3], where)});
      } else {
        throw FormatError("unknown record type '" + f[0] + "' at " + where);
      }
    } catch (const std::invalid_argument&) {
      throw FormatError("bad integer field at " + where);
    }
  }
  ds.classes.validate();

  for (auto& s : ds.samples) {
    s.image = read_png_rgb8((fs::path(root) / "images" / s.file_name).string());
    Rgb8Image packed = read_png_rgb8((fs::path(root) / "panoptic" / s.file_name).string());
    if (packed.width != s.label.width || packed.height != s.label.height)
      throw FormatError("panoptic PNG extents disagree with meta for " + s.file_name);
    s.label.segment_map = decode_segment_png(packed.pixels, packed.width, packed.height);
    s.label.validate(ds.classes);
  }
  return ds;
}

// --- external instance annotations (for the consistency audit) -------------

struct InstanceAnnotation {
  std::string file_name;
  int width = 0;
  int height = 0;
  std::vector<int> instance_map;                    // 0 = background
  std::vector<std::pair<int, int>> instances;       // (instance id, class id)
};

inline void write_instance_annotations(const std::string& root,
                                       const std::vector<InstanceAnnotation>& anns) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(root) / "instance", ec);
  if (ec) throw IoError("cannot create instance directory under " + root);
  std::ofstream meta(fs::path(root) / "instance.meta");
  if (!meta) throw IoError("cannot write instance.meta under " + root);
  for (const auto& a : anns) {
    Rgb8Image packed{a.width, a.height, encode_segment_png(a.instance_map, a.width, a.height)};
    write_png_rgb8((fs::path(root) / "instance" / a.file_name).string(), packed);
    meta << "image\t" << a.file_name << '\t' << a.width << '\t' << a.height << '\n';
    for (const auto& [id, cls] : a.instances) meta << "instance\t" << id << '\t' << cls << '\n';
  }
  if (!meta) throw IoError("write failed for instance.meta under " + root);
}

inline std::vector<InstanceAnnotation> read_instance_annotations(const std::string& root) {
  namespace fs = std::filesystem;
  const auto meta_path = fs::path(root) / "instance.meta";
  std::ifstream meta(meta_path);
  if (!meta) throw IoError("cannot open " + meta_path.string());
  std::vector<InstanceAnnotation> anns;
  std::string line;
  long line_no = 0;
  while (std::getline(meta, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = detail::split_tabs(line);
    const std::string where = meta_path.string() + ":" + std::to_string(line_no);
    if (f[0] == "image") {
      if (f.size() != 4) throw FormatError("image record needs 4 fields at " + where);
      anns.push_back({f[1], std::stoi(f[2]), std::stoi(f[3]), {}, {}});
    } else if (f[0] == "instance") {
      if (anns.empty()) throw FormatError("instance record before any image at " + where);
      if (f.size() != 3) throw FormatError("instance record needs 3 fields at " + where);
      anns.back().instances.emplace_back(std::stoi(f[1]), std::stoi(f[2]));
    } else {
      throw FormatError("unknown record type '" + f[0] + "' at " + where);
    }
  }
  for (auto& a : anns) {
    Rgb8Image packed = read_png_rgb8((fs::path(root) / "instance" / a.file_name).string());
    if (packed.width != a.width || packed.height != a.height)
      throw FormatError("instance PNG extents disagree with meta for " + a.file_name);
    a.instance_map = decode_segment_png(packed.pixels, packed.width, packed.height);
  }
  return anns;
}

}  // namespace taskseg
