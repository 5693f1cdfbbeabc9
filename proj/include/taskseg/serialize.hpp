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
// Named-parameter registry and its on-disk form: a magic header, one version
// byte, then flat (name, shape, little-endian float32 payload) records.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "taskseg/errors.hpp"
#include "taskseg/tensor.hpp"

namespace taskseg {

inline constexpr char kParamMagic[8] = {'T', 'S', 'G', 'P', 'A', 'R', 'M', 'S'};
inline constexpr std::uint8_t kParamVersion = 1;

/// Ordered registry of named trainable tensors.
class ParamStore {
 public:
  ad::Tensor create(const std::string& name, ad::Shape shape, std::vector<float> data) {
    if (index_.count(name)) throw ValidationError("parameter name already registered: " + name);
    ad::Tensor t = ad::Tensor::param(std::move(shape), std::move(data));
    index_[name] = params_.size();
    names_.push_back(name);
    params_.push_back(t);
    return t;
  }

  ad::Tensor create_randn(const std::string& name, ad::Shape shape, Rng& rng, float stddev) {
    std::vector<float> d(static_cast<std::size_t>(ad::numel_of(shape)));
    for (auto& x : d) x = rng.normalf(stddev);
    return create(name, std::move(shape), std::move(d));
  }

  ad::Tensor create_full(const std::string& name, ad::Shape shape, float v) {
    std::vector<float> d(static_cast<std::size_t>(ad::numel_of(shape)), v);
    return create(name, std::move(shape), std::move(d));
  }

  std::size_t size() const { return params_.size(); }
  const std::vector<ad::Tensor>& params() const { return params_; }
  const std::vector<std::string>& names() const { return names_; }

  ad::Tensor get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter: " + name);
    return params_[it->second];
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  long total_count() const {
    long n = 0;
    for (const auto& p : params_) n += p.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Binary blob in registration order.
  std::string serialize() const {
    std::string out;
    out.append(kParamMagic, sizeof(kParamMagic));
    out.push_back(static_cast<char>(kParamVersion));
    append_u32(out, static_cast<std::uint32_t>(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& name = names_[i];
      const auto& t = params_[i];
      append_u16(out, static_cast<std::uint16_t>(name.size()));
      out.append(name);
      out.push_back(static_cast<char>(t.shape().size()));
      for (long e : t.shape()) append_u32(out, static_cast<std::uint32_t>(e));
      const auto& v = t.value();
      for (float f : v) append_f32(out, f);
    }
    return out;
  }

  /// Loads a blob produced by serialize() into already-registered parameters.
  /// Names and shapes must match exactly.
  void load(const std::string& blob) {
    std::size_t at = 0;
    auto need = [&](std::size_t n) {
      if (at + n > blob.size()) throw FormatError("parameter blob truncated");
    };
    need(sizeof(kParamMagic) + 1);
    if (std::memcmp(blob.data(), kParamMagic, sizeof(kParamMagic)) != 0)
      throw FormatError("bad parameter blob magic");
    at = sizeof(kParamMagic);
    const auto version = static_cast<std::uint8_t>(blob[at++]);
    if (version != kParamVersion)
      throw FormatError("unsupported parameter blob version " + std::to_string(version));
    need(4);
    const std::uint32_t count = read_u32(blob, at);
    if (count != params_.size())
      throw FormatError("parameter count mismatch: blob has " + std::to_string(count) +
                        ", store has " + std::to_string(params_.size()));
    for (std::uint32_t r = 0; r < count; ++r) {
      need(2);
      const std::uint16_t name_len = read_u16(blob, at);
      need(name_len);
      std::string name = blob.substr(at, name_len);
      at += name_len;
      need(1);
      const auto ndims = static_cast<std::uint8_t>(blob[at++]);
      ad::Shape shape(ndims);
      for (auto& e : shape) {
        need(4);
        e = static_cast<long>(read_u32(blob, at));
      }
      auto it = index_.find(name);
      if (it == index_.end()) throw FormatError("blob names unknown parameter: " + name);
      ad::Tensor t = params_[it->second];
      if (t.shape() != shape)
        throw FormatError("shape mismatch for " + name + ": blob " + ad::shape_str(shape) +
                          " vs store " + ad::shape_str(t.shape()));
      auto& v = t.mutable_value();
      for (auto& f : v) {
        need(4);
        f = read_f32(blob, at);
      }
    }
    if (at != blob.size()) throw FormatError("trailing bytes in parameter blob");
  }

  void save_file(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    const std::string blob = serialize();
    f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!f) throw IoError("write failed: " + path);
  }

  void load_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    load(blob);
  }

 private:
  static void append_u16(std::string& s, std::uint16_t v) {
    s.push_back(static_cast<char>(v & 0xff));
    s.push_back(static_cast<char>((v >> 8) & 0xff));
  }
  static void append_u32(std::string& s, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  static void append_f32(std::string& s, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    append_u32(s, bits);
  }
  static std::uint16_t read_u16(const std::string& s, std::size_t& at) {
    const auto b0 = static_cast<std::uint8_t>(s[at]);
    const auto b1 = static_cast<std::uint8_t>(s[at + 1]);
    at += 2;
    return static_cast<std::uint16_t>(b0 | (b1 << 8));
  }
  static std::uint32_t read_u32(const std::string& s, std::size_t& at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(s[at + static_cast<std::size_t>(i)])) << (8 * i);
    at += 4;
    return v;
  }
  static float read_f32(const std::string& s, std::size_t& at) {
    const std::uint32_t bits = read_u32(s, at);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }

  std::vector<ad::Tensor> params_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace taskseg
