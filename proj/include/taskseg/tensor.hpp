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
// Dense float32 tensors with tape-based reverse-mode differentiation.
//
// Storage is float32; arithmetic runs through a float64 working buffer that
// each op carries alongside the rounded float32 mirror (leaves hold float32
// only). This extends the accumulate-in-double rule to the whole forward
// chain, which keeps the central-difference oracle out of the float32 noise
// floor. Graphs are single-use: build a forward pass, call backward() on a
// scalar, then drop the result tensors. Parameter leaves persist across steps
// and their grad buffers accumulate until zero_grad().

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "taskseg/errors.hpp"
#include "taskseg/rng.hpp"

namespace taskseg::ad {

using Shape = std::vector<long>;

inline long numel_of(const Shape& s) {
  long n = 1;
  for (long e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<float> value;   // canonical float32 buffer
  std::vector<double> work;   // float64 forward chain; empty on leaves
  std::vector<float> grad;    // sized lazily; parameters keep theirs across steps
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;  // reads this->grad, adds into inputs' grad
  bool needs_grad = false;
  bool is_param = false;

  long numel() const { return numel_of(shape); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
  }
  double at(std::size_t i) const {
    return work.empty() ? static_cast<double>(value[i]) : work[i];
  }
  void mirror() {
    value.resize(work.size());
    for (std::size_t i = 0; i < work.size(); ++i) value[i] = static_cast<float>(work[i]);
  }
};

/// Value-semantics handle onto a graph node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor constant(Shape shape, std::vector<float> data) {
    auto n = std::make_shared<Node>();
    if (static_cast<long>(data.size()) != numel_of(shape))
      throw ShapeError("constant: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    n->shape = std::move(shape);
    n->value = std::move(data);
    return Tensor(n);
  }

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node>();
    n->value.assign(static_cast<std::size_t>(numel_of(shape)), 0.0f);
    n->shape = std::move(shape);
    return Tensor(n);
  }

  static Tensor full(Shape shape, float v) {
    auto n = std::make_shared<Node>();
    n->value.assign(static_cast<std::size_t>(numel_of(shape)), v);
    n->shape = std::move(shape);
    return Tensor(n);
  }

  /// Trainable leaf.
  static Tensor param(Shape shape, std::vector<float> data) {
    Tensor t = constant(std::move(shape), std::move(data));
    t.node_->needs_grad = true;
    t.node_->is_param = true;
    t.node_->ensure_grad();
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, float stddev) {
    std::vector<float> d(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : d) x = rng.normalf(stddev);
    return constant(std::move(shape), std::move(d));
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  long numel() const { return node_->numel(); }
  long dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  const std::vector<float>& value() const { return node_->value; }
  std::vector<float>& mutable_value() { return node_->value; }
  const std::vector<float>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->needs_grad; }
  bool is_param() const { return node_->is_param; }

  float item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->value[0];
  }

  /// Scalar at working precision (float64 chain; float32 on leaves).
  double item_precise() const {
    if (numel() != 1)
      throw ShapeError("item_precise: tensor is not scalar, shape " + shape_str(shape()));
    return node_->at(0);
  }

  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0f); }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline std::shared_ptr<Node> make_op(Shape shape, std::vector<std::shared_ptr<Node>> ins) {
  auto n = std::make_shared<Node>();
  n->work.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  n->shape = std::move(shape);
  for (auto& i : ins) n->needs_grad = n->needs_grad || i->needs_grad;
  n->inputs = std::move(ins);
  return n;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and broadcast ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  auto n = detail::make_op(a.shape(), {a.node(), b.node()});
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (std::size_t i = 0; i < n->work.size(); ++i) n->work[i] = an.at(i) + bn.at(i);
  n->mirror();
  n->backprop = [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      auto& in = *self.inputs[static_cast<std::size_t>(k)];
      if (!in.needs_grad) continue;
      in.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
    }
  };
  return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  auto n = detail::make_op(a.shape(), {a.node(), b.node()});
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (std::size_t i = 0; i < n->work.size(); ++i) n->work[i] = an.at(i) - bn.at(i);
  n->mirror();
  n->backprop = [](Node& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    if (ia.needs_grad) {
      ia.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i];
    }
    if (ib.needs_grad) {
      ib.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ib.grad[i] -= self.grad[i];
    }
  };
  return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  auto n = detail::make_op(a.shape(), {a.node(), b.node()});
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (std::size_t i = 0; i < n->work.size(); ++i) n->work[i] = an.at(i) * bn.at(i);
  n->mirror();
  n->backprop = [](Node& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    if (ia.needs_grad) {
      ia.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        ia.grad[i] += self.grad[i] * static_cast<float>(ib.at(i));
    }
    if (ib.needs_grad) {
      ib.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        ib.grad[i] += self.grad[i] * static_cast<float>(ia.at(i));
    }
  };
  return Tensor(n);
}

inline Tensor scale(const Tensor& a, float c) {
  auto n = detail::make_op(a.shape(), {a.node()});
  const auto& an = *a.node();
  for (std::size_t i = 0; i < n->work.size(); ++i) n->work[i] = an.at(i) * c;
  n->mirror();
  n->backprop = [c](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * c;
  };
  return Tensor(n);
}

inline Tensor add_const(const Tensor& a, float c) {
  auto n = detail::make_op(a.shape(), {a.node()});
  const auto& an = *a.node();
  for (std::size_t i = 0; i < n->work.size(); ++i) n->work[i] = an.at(i) + c;
  n->mirror();
  n->backprop = [](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
  };
  return Tensor(n);
}

/// out[i][j] = a[i][j] + v[j], v is a length-n vector (bias add).
inline Tensor add_rowvec(const Tensor& a, const Tensor& v) {
  if (a.shape().size() != 2 || v.numel() != a.dim(1))
    throw ShapeError("add_rowvec: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(v.shape()) + " incompatible");
  auto n = detail::make_op(a.shape(), {a.node(), v.node()});
  const long rows = a.dim(0), cols = a.dim(1);
  const auto& an = *a.node();
  const auto& vn = *v.node();
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j)
      n->work[static_cast<std::size_t>(i * cols + j)] =
          an.at(static_cast<std::size_t>(i * cols + j)) + vn.at(static_cast<std::size_t>(j));
  n->mirror();
  n->backprop = [rows, cols](Node& self) {
    auto& ia = *self.inputs[0];
    auto& iv = *self.inputs[1];
    if (ia.needs_grad) {
      ia.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i];
    }
    if (iv.needs_grad) {
      iv.ensure_grad();
      for (long j = 0; j < cols; ++j) {
        double acc = 0.0;
        for (long i = 0; i < rows; ++i) acc += self.grad[static_cast<std::size_t>(i * cols + j)];
        iv.grad[static_cast<std::size_t>(j)] += static_cast<float>(acc);
      }
    }
  };
  return Tensor(n);
}

/// Multiply by a differentiable 1-element scalar tensor.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scalar tensor expected, got " + shape_str(s.shape()));
  auto n = detail::make_op(a.shape(), {a.node(), s.node()});
  const auto& an = *a.node();
  const double sv = s.node()->at(0);
  for (std::size_t i = 0; i < n->work.size(); ++i) n->work[i] = an.at(i) * sv;
  n->mirror();
  n->backprop = [](Node& self) {
    auto& ia = *self.inputs[0];
    auto& is = *self.inputs[1];
    const float sv = static_cast<float>(is.at(0));
    if (ia.needs_grad) {
      ia.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia.grad[i] += self.grad[i] * sv;
    }
    if (is.needs_grad) {
      is.ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        acc += static_cast<double>(self.grad[i]) * ia.at(i);
      is.grad[0] += static_cast<float>(acc);
    }
  };
  return Tensor(n);
}

inline Tensor exp(const Tensor& a) {
  auto n = detail::make_op(a.shape(), {a.node()});
  const auto& an = *a.node();
  for (std::size_t i = 0; i < n->work.size(); ++i) n->work[i] = std::exp(an.at(i));
  n->mirror();
  n->backprop = [](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      in.grad[i] += self.grad[i] * static_cast<float>(self.at(i));
  };
  return Tensor(n);
}

/// Exact Gaussian-error-function GELU (smooth; no finite-difference kinks).
inline Tensor gelu(const Tensor& a) {
  auto n = detail::make_op(a.shape(), {a.node()});
  const auto& an = *a.node();
  for (std::size_t i = 0; i < n->work.size(); ++i) {
    const double x = an.at(i);
    n->work[i] = 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476));
  }
  n->mirror();
  n->backprop = [](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = in.at(i);
      const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
      const double pdf = 0.3989422804014327 * std::exp(-0.5 * x * x);
      in.grad[i] += self.grad[i] * static_cast<float>(cdf + x * pdf);
    }
  };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Structure ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not chain");
  const long m = a.dim(0), k = a.dim(1), p = b.dim(1);
  auto n = detail::make_op({m, p}, {a.node(), b.node()});
  const auto& an = *a.node();
  const auto& bn = *b.node();
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < p; ++j) {
      double acc = 0.0;
      for (long t = 0; t < k; ++t)
        acc += an.at(static_cast<std::size_t>(i * k + t)) * bn.at(static_cast<std::size_t>(t * p + j));
      n->work[static_cast<std::size_t>(i * p + j)] = acc;
    }
  n->mirror();
  n->backprop = [m, k, p](Node& self) {
    auto& ia = *self.inputs[0];
    auto& ib = *self.inputs[1];
    if (ia.needs_grad) {
      ia.ensure_grad();
      for (long i = 0; i < m; ++i)
        for (long t = 0; t < k; ++t) {
          double acc = 0.0;
          for (long j = 0; j < p; ++j)
            acc += static_cast<double>(self.grad[static_cast<std::size_t>(i * p + j)]) *
                   ib.at(static_cast<std::size_t>(t * p + j));
          ia.grad[static_cast<std::size_t>(i * k + t)] += static_cast<float>(acc);
        }
    }
    if (ib.needs_grad) {
      ib.ensure_grad();
      for (long t = 0; t < k; ++t)
        for (long j = 0; j < p; ++j) {
          double acc = 0.0;
          for (long i = 0; i < m; ++i)
            acc += ia.at(static_cast<std::size_t>(i * k + t)) *
                   static_cast<double>(self.grad[static_cast<std::size_t>(i * p + j)]);
          ib.grad[static_cast<std::size_t>(t * p + j)] += static_cast<float>(acc);
        }
    }
  };
  return Tensor(n);
}

inline Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: need 2-d, got " + shape_str(a.shape()));
  const long m = a.dim(0), c = a.dim(1);
  auto n = detail::make_op({c, m}, {a.node()});
  const auto& an = *a.node();
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < c; ++j)
      n->work[static_cast<std::size_t>(j * m + i)] = an.at(static_cast<std::size_t>(i * c + j));
  n->mirror();
  n->backprop = [m, c](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < c; ++j)
        in.grad[static_cast<std::size_t>(i * c + j)] += self.grad[static_cast<std::size_t>(j * m + i)];
  };
  return Tensor(n);
}

inline Tensor slice_rows(const Tensor& a, long r0, long r1) {
  if (a.shape().size() != 2 || r0 < 0 || r1 > a.dim(0) || r0 >= r1)
    throw ShapeError("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") for " + shape_str(a.shape()));
  const long c = a.dim(1);
  auto n = detail::make_op({r1 - r0, c}, {a.node()});
  const auto& an = *a.node();
  for (std::size_t i = 0; i < n->work.size(); ++i)
    n->work[i] = an.at(static_cast<std::size_t>(r0 * c) + i);
  n->mirror();
  n->backprop = [r0, c](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      in.grad[static_cast<std::size_t>(r0 * c) + i] += self.grad[i];
  };
  return Tensor(n);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  const long c = parts[0].dim(1);
  long rows = 0;
  std::vector<std::shared_ptr<Node>> ins;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(1) != c)
      throw ShapeError("concat_rows: column mismatch at " + shape_str(p.shape()));
    rows += p.dim(0);
    ins.push_back(p.node());
  }
  auto n = detail::make_op({rows, c}, std::move(ins));
  long r = 0;
  for (const auto& p : parts) {
    const auto& pn = *p.node();
    for (long i = 0; i < p.numel(); ++i)
      n->work[static_cast<std::size_t>(r * c + i)] = pn.at(static_cast<std::size_t>(i));
    r += p.dim(0);
  }
  n->mirror();
  n->backprop = [c](Node& self) {
    long r = 0;
    for (auto& inp : self.inputs) {
      const long pr = inp->shape[0];
      if (inp->needs_grad) {
        inp->ensure_grad();
        for (long i = 0; i < pr * c; ++i)
          inp->grad[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(r * c + i)];
      }
      r += pr;
    }
  };
  return Tensor(n);
}

inline Tensor slice_cols(const Tensor& a, long c0, long c1) {
  if (a.shape().size() != 2 || c0 < 0 || c1 > a.dim(1) || c0 >= c1)
    throw ShapeError("slice_cols: bad range for " + shape_str(a.shape()));
  const long m = a.dim(0), c = a.dim(1), w = c1 - c0;
  auto n = detail::make_op({m, w}, {a.node()});
  const auto& an = *a.node();
  for (long i = 0; i < m; ++i)
    for (long j = 0; j < w; ++j)
      n->work[static_cast<std::size_t>(i * w + j)] = an.at(static_cast<std::size_t>(i * c + c0 + j));
  n->mirror();
  n->backprop = [m, c, c0, w](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < w; ++j)
        in.grad[static_cast<std::size_t>(i * c + c0 + j)] += self.grad[static_cast<std::size_t>(i * w + j)];
  };
  return Tensor(n);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const long m = parts[0].dim(0);
  long cols = 0;
  std::vector<std::shared_ptr<Node>> ins;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(0) != m)
      throw ShapeError("concat_cols: row mismatch at " + shape_str(p.shape()));
    cols += p.dim(1);
    ins.push_back(p.node());
  }
  auto n = detail::make_op({m, cols}, std::move(ins));
  long at = 0;
  for (const auto& p : parts) {
    const long w = p.dim(1);
    const auto& pn = *p.node();
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < w; ++j)
        n->work[static_cast<std::size_t>(i * cols + at + j)] = pn.at(static_cast<std::size_t>(i * w + j));
    at += w;
  }
  n->mirror();
  n->backprop = [m, cols](Node& self) {
    long at = 0;
    for (auto& inp : self.inputs) {
      const long w = inp->shape[1];
      if (inp->needs_grad) {
        inp->ensure_grad();
        for (long i = 0; i < m; ++i)
          for (long j = 0; j < w; ++j)
            inp->grad[static_cast<std::size_t>(i * w + j)] +=
                self.grad[static_cast<std::size_t>(i * cols + at + j)];
      }
      at += w;
    }
  };
  return Tensor(n);
}

/// Select rows of a matrix by index; gradients scatter-add back.
inline Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.shape().size() != 2) throw ShapeError("gather_rows: need 2-d table");
  const long v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ShapeError("gather_rows: index " + std::to_string(id) + " out of [0," + std::to_string(v) + ")");
  auto n = detail::make_op({static_cast<long>(ids.size()), d}, {table.node()});
  const auto& tn = *table.node();
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (long j = 0; j < d; ++j)
      n->work[static_cast<std::size_t>(static_cast<long>(i) * d + j)] =
          tn.at(static_cast<std::size_t>(static_cast<long>(ids[i]) * d + j));
  n->mirror();
  n->backprop = [ids, d](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (std::size_t i = 0; i < ids.size(); ++i)
      for (long j = 0; j < d; ++j)
        in.grad[static_cast<std::size_t>(static_cast<long>(ids[i]) * d + j)] +=
            self.grad[static_cast<std::size_t>(static_cast<long>(i) * d + j)];
  };
  return Tensor(n);
}

/// Non-overlapping s-by-s patches of an H-by-W-by-C image, flattened row-major
/// to an (H/s * W/s) x (s*s*C) matrix. Pure rearrangement, so the gradient is
/// the inverse scatter.
inline Tensor extract_patches(const Tensor& img, long s) {
  if (img.shape().size() != 3) throw ShapeError("extract_patches: need HxWxC, got " + shape_str(img.shape()));
  const long h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (s <= 0 || h % s != 0 || w % s != 0)
    throw ShapeError("extract_patches: extents " + shape_str(img.shape()) + " not divisible by stride " +
                     std::to_string(s));
  const long gh = h / s, gw = w / s, plen = s * s * c;
  auto n = detail::make_op({gh * gw, plen}, {img.node()});
  auto src_index = [w, c, s](long gy, long gx, long t) {
    const long py = t / (s * c);
    const long rem = t % (s * c);
    return ((gy * s + py) * w + gx * s + rem / c) * c + rem % c;
  };
  const auto& in = *img.node();
  for (long gy = 0; gy < gh; ++gy)
    for (long gx = 0; gx < gw; ++gx)
      for (long t = 0; t < plen; ++t)
        n->work[static_cast<std::size_t>((gy * gw + gx) * plen + t)] =
            in.at(static_cast<std::size_t>(src_index(gy, gx, t)));
  n->mirror();
  n->backprop = [gh, gw, plen, src_index](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (long gy = 0; gy < gh; ++gy)
      for (long gx = 0; gx < gw; ++gx)
        for (long t = 0; t < plen; ++t)
          in.grad[static_cast<std::size_t>(src_index(gy, gx, t))] +=
              self.grad[static_cast<std::size_t>((gy * gw + gx) * plen + t)];
  };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Reductions and normalizations
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  auto n = detail::make_op({1}, {a.node()});
  const auto& an = *a.node();
  double acc = 0.0;
  for (long i = 0; i < a.numel(); ++i) acc += an.at(static_cast<std::size_t>(i));
  n->work[0] = acc;
  n->mirror();
  n->backprop = [](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (auto& g : in.grad) g += self.grad[0];
  };
  return Tensor(n);
}

/// Column means: m x n -> 1 x n.
inline Tensor mean_rows(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError("mean_rows: need 2-d, got " + shape_str(a.shape()));
  const long m = a.dim(0), c = a.dim(1);
  auto n = detail::make_op({1, c}, {a.node()});
  const auto& an = *a.node();
  for (long j = 0; j < c; ++j) {
    double acc = 0.0;
    for (long i = 0; i < m; ++i) acc += an.at(static_cast<std::size_t>(i * c + j));
    n->work[static_cast<std::size_t>(j)] = acc / static_cast<double>(m);
  }
  n->mirror();
  n->backprop = [m, c](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    const float inv = 1.0f / static_cast<float>(m);
    for (long i = 0; i < m; ++i)
      for (long j = 0; j < c; ++j)
        in.grad[static_cast<std::size_t>(i * c + j)] += self.grad[static_cast<std::size_t>(j)] * inv;
  };
  return Tensor(n);
}

/// Row softmax with temperature scaling exp(x/tau); max-subtracted.
inline Tensor softmax_rows(const Tensor& a, float temperature) {
  if (a.shape().size() != 2) throw ShapeError("softmax_rows: need 2-d, got " + shape_str(a.shape()));
  if (!(temperature > 0.0f)) throw NumericError("softmax_rows: temperature must be positive");
  const long m = a.dim(0), c = a.dim(1);
  auto n = detail::make_op(a.shape(), {a.node()});
  const auto& an = *a.node();
  const double inv_t = 1.0 / static_cast<double>(temperature);
  for (long i = 0; i < m; ++i) {
    double mx = -1e300;
    for (long j = 0; j < c; ++j) mx = std::max(mx, an.at(static_cast<std::size_t>(i * c + j)) * inv_t);
    double z = 0.0;
    for (long j = 0; j < c; ++j) z += std::exp(an.at(static_cast<std::size_t>(i * c + j)) * inv_t - mx);
    for (long j = 0; j < c; ++j)
      n->work[static_cast<std::size_t>(i * c + j)] =
          std::exp(an.at(static_cast<std::size_t>(i * c + j)) * inv_t - mx) / z;
  }
  n->mirror();
  n->backprop = [m, c, inv_t](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (long i = 0; i < m; ++i) {
      const float* g = self.grad.data() + i * c;
      double dot = 0.0;
      for (long j = 0; j < c; ++j)
        dot += static_cast<double>(g[j]) * self.at(static_cast<std::size_t>(i * c + j));
      for (long j = 0; j < c; ++j)
        in.grad[static_cast<std::size_t>(i * c + j)] += static_cast<float>(
            inv_t * self.at(static_cast<std::size_t>(i * c + j)) * (static_cast<double>(g[j]) - dot));
    }
  };
  return Tensor(n);
}

/// Per-row normalization over the last axis, epsilon 1e-5, then affine.
inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
  if (a.shape().size() != 2) throw ShapeError("layer_norm: need 2-d, got " + shape_str(a.shape()));
  const long m = a.dim(0), d = a.dim(1);
  if (gain.numel() != d || bias.numel() != d)
    throw ShapeError("layer_norm: affine params " + shape_str(gain.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match width " + std::to_string(d));
  constexpr double kEps = 1e-5;
  auto n = detail::make_op(a.shape(), {a.node(), gain.node(), bias.node()});
  const auto& an = *a.node();
  const auto& gn = *gain.node();
  const auto& bn = *bias.node();
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * d));
  auto istd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  for (long i = 0; i < m; ++i) {
    double mean = 0.0;
    for (long j = 0; j < d; ++j) mean += an.at(static_cast<std::size_t>(i * d + j));
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (long j = 0; j < d; ++j) {
      const double dx = an.at(static_cast<std::size_t>(i * d + j)) - mean;
      var += dx * dx;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + kEps);
    (*istd)[static_cast<std::size_t>(i)] = is;
    for (long j = 0; j < d; ++j) {
      const double xh = (an.at(static_cast<std::size_t>(i * d + j)) - mean) * is;
      (*xhat)[static_cast<std::size_t>(i * d + j)] = xh;
      n->work[static_cast<std::size_t>(i * d + j)] =
          xh * gn.at(static_cast<std::size_t>(j)) + bn.at(static_cast<std::size_t>(j));
    }
  }
  n->mirror();
  n->backprop = [m, d, xhat, istd](Node& self) {
    auto& ix = *self.inputs[0];
    auto& ig = *self.inputs[1];
    auto& ib = *self.inputs[2];
    if (ig.needs_grad) {
      ig.ensure_grad();
      for (long j = 0; j < d; ++j) {
        double acc = 0.0;
        for (long i = 0; i < m; ++i)
          acc += static_cast<double>(self.grad[static_cast<std::size_t>(i * d + j)]) *
                 (*xhat)[static_cast<std::size_t>(i * d + j)];
        ig.grad[static_cast<std::size_t>(j)] += static_cast<float>(acc);
      }
    }
    if (ib.needs_grad) {
      ib.ensure_grad();
      for (long j = 0; j < d; ++j) {
        double acc = 0.0;
        for (long i = 0; i < m; ++i) acc += self.grad[static_cast<std::size_t>(i * d + j)];
        ib.grad[static_cast<std::size_t>(j)] += static_cast<float>(acc);
      }
    }
    if (ix.needs_grad) {
      ix.ensure_grad();
      std::vector<double> dxh(static_cast<std::size_t>(d));
      for (long i = 0; i < m; ++i) {
        double mean_dxh = 0.0, mean_dxh_xh = 0.0;
        for (long j = 0; j < d; ++j) {
          dxh[static_cast<std::size_t>(j)] =
              static_cast<double>(self.grad[static_cast<std::size_t>(i * d + j)]) *
              ig.at(static_cast<std::size_t>(j));
          mean_dxh += dxh[static_cast<std::size_t>(j)];
          mean_dxh_xh += dxh[static_cast<std::size_t>(j)] * (*xhat)[static_cast<std::size_t>(i * d + j)];
        }
        mean_dxh /= static_cast<double>(d);
        mean_dxh_xh /= static_cast<double>(d);
        const double is = (*istd)[static_cast<std::size_t>(i)];
        for (long j = 0; j < d; ++j)
          ix.grad[static_cast<std::size_t>(i * d + j)] += static_cast<float>(
              is * (dxh[static_cast<std::size_t>(j)] - mean_dxh -
                    (*xhat)[static_cast<std::size_t>(i * d + j)] * mean_dxh_xh));
      }
    }
  };
  return Tensor(n);
}

/// Row-wise x / ||x||_2 with a 1e-12 floor under the square root.
inline Tensor l2_normalize_rows(const Tensor& a) {
  if (a.shape().size() != 2) throw ShapeError("l2_normalize_rows: need 2-d");
  const long m = a.dim(0), d = a.dim(1);
  auto n = detail::make_op(a.shape(), {a.node()});
  const auto& an = *a.node();
  auto inv_norm = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  for (long i = 0; i < m; ++i) {
    double ss = 1e-12;
    for (long j = 0; j < d; ++j) {
      const double v = an.at(static_cast<std::size_t>(i * d + j));
      ss += v * v;
    }
    const double inv = 1.0 / std::sqrt(ss);
    (*inv_norm)[static_cast<std::size_t>(i)] = inv;
    for (long j = 0; j < d; ++j)
      n->work[static_cast<std::size_t>(i * d + j)] = an.at(static_cast<std::size_t>(i * d + j)) * inv;
  }
  n->mirror();
  n->backprop = [m, d, inv_norm](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    for (long i = 0; i < m; ++i) {
      double dot = 0.0;
      for (long j = 0; j < d; ++j)
        dot += static_cast<double>(self.grad[static_cast<std::size_t>(i * d + j)]) *
               self.at(static_cast<std::size_t>(i * d + j));
      const double inv = (*inv_norm)[static_cast<std::size_t>(i)];
      for (long j = 0; j < d; ++j)
        in.grad[static_cast<std::size_t>(i * d + j)] += static_cast<float>(
            inv * (static_cast<double>(self.grad[static_cast<std::size_t>(i * d + j)]) -
                   self.at(static_cast<std::size_t>(i * d + j)) * dot));
    }
  };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Attention (composite; mask is a constant)
// ---------------------------------------------------------------------------

/// Boolean admissibility mask for attention: true = may attend.
struct AttnMask {
  long rows = 0, cols = 0;
  std::vector<std::uint8_t> keep;  // rows*cols
};

/// softmax(q k^T / sqrt(D) + penalty) v. Blocked positions get a -1e9
/// penalty; rows with no admissible key fall back to unmasked attention.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttnMask* mask = nullptr) {
  if (q.shape().size() != 2 || k.shape().size() != 2 || v.shape().size() != 2 ||
      q.dim(1) != k.dim(1) || k.dim(0) != v.dim(0))
    throw ShapeError("attention: incompatible shapes " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const long a = q.dim(0), b = k.dim(0), d = q.dim(1);
  Tensor scores = scale(matmul(q, transpose(k)), 1.0f / std::sqrt(static_cast<float>(d)));
  if (mask != nullptr) {
    if (mask->rows != a || mask->cols != b)
      throw ShapeError("attention: mask " + std::to_string(mask->rows) + "x" +
                       std::to_string(mask->cols) + " does not match scores");
    std::vector<float> penalty(static_cast<std::size_t>(a * b), 0.0f);
    for (long i = 0; i < a; ++i) {
      bool any = false;
      for (long j = 0; j < b; ++j) any = any || mask->keep[static_cast<std::size_t>(i * b + j)];
      if (!any) continue;  // degenerate row: leave unmasked
      for (long j = 0; j < b; ++j)
        if (!mask->keep[static_cast<std::size_t>(i * b + j)])
          penalty[static_cast<std::size_t>(i * b + j)] = -1e9f;
    }
    scores = add(scores, Tensor::constant({a, b}, std::move(penalty)));
  }
  return matmul(softmax_rows(scores, 1.0f), v);
}

// ---------------------------------------------------------------------------
// Loss kernels (fused with analytic gradients for numerical stability)
// ---------------------------------------------------------------------------

/// Weighted-sum cross entropy over rows divided by the row count:
/// sum_i w_i * nll(logits[i], target[i]) / m.
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                                 const std::vector<float>& weights) {
  if (logits.shape().size() != 2) throw ShapeError("cross_entropy_rows: need 2-d logits");
  const long m = logits.dim(0), c = logits.dim(1);
  if (static_cast<long>(targets.size()) != m || static_cast<long>(weights.size()) != m)
    throw ShapeError("cross_entropy_rows: targets/weights length does not match row count");
  for (int t : targets)
    if (t < 0 || t >= c)
      throw ShapeError("cross_entropy_rows: class index " + std::to_string(t) + " out of [0," +
                       std::to_string(c) + ")");
  auto n = detail::make_op({1}, {logits.node()});
  const auto& ln = *logits.node();
  auto probs = std::make_shared<std::vector<double>>(logits.value().size());
  double total = 0.0;
  for (long i = 0; i < m; ++i) {
    double mx = ln.at(static_cast<std::size_t>(i * c));
    for (long j = 1; j < c; ++j) mx = std::max(mx, ln.at(static_cast<std::size_t>(i * c + j)));
    double z = 0.0;
    for (long j = 0; j < c; ++j) z += std::exp(ln.at(static_cast<std::size_t>(i * c + j)) - mx);
    const double logz = std::log(z) + mx;
    for (long j = 0; j < c; ++j)
      (*probs)[static_cast<std::size_t>(i * c + j)] =
          std::exp(ln.at(static_cast<std::size_t>(i * c + j)) - logz);
    total += weights[static_cast<std::size_t>(i)] *
             (logz - ln.at(static_cast<std::size_t>(i * c + targets[static_cast<std::size_t>(i)])));
  }
  n->work[0] = total / static_cast<double>(m);
  n->mirror();
  n->backprop = [m, c, targets, weights, probs](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    const double g = static_cast<double>(self.grad[0]) / static_cast<double>(m);
    for (long i = 0; i < m; ++i) {
      const double w = weights[static_cast<std::size_t>(i)] * g;
      for (long j = 0; j < c; ++j) {
        double p = (*probs)[static_cast<std::size_t>(i * c + j)];
        if (j == targets[static_cast<std::size_t>(i)]) p -= 1.0;
        in.grad[static_cast<std::size_t>(i * c + j)] += static_cast<float>(w * p);
      }
    }
  };
  return Tensor(n);
}

/// Mean sigmoid binary cross entropy over all elements, stable form.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
  detail::require_same_shape(logits, target, "bce_with_logits");
  const long count = logits.numel();
  auto n = detail::make_op({1}, {logits.node()});
  const auto& ln = *logits.node();
  const auto& tn = *target.node();
  double total = 0.0;
  for (long i = 0; i < count; ++i) {
    const double z = ln.at(static_cast<std::size_t>(i));
    const double y = tn.at(static_cast<std::size_t>(i));
    total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  n->work[0] = total / static_cast<double>(count);
  n->mirror();
  auto tgt = target.node();
  n->backprop = [count, tgt](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    const double g = static_cast<double>(self.grad[0]) / static_cast<double>(count);
    for (long i = 0; i < count; ++i) {
      const double z = in.at(static_cast<std::size_t>(i));
      const double s = 1.0 / (1.0 + std::exp(-z));
      in.grad[static_cast<std::size_t>(i)] +=
          static_cast<float>(g * (s - tgt->at(static_cast<std::size_t>(i))));
    }
  };
  return Tensor(n);
}

/// Soft dice loss, mean over masks (rows): 1 - (2*sum(p*g)+1)/(sum(p)+sum(g)+1)
/// with p = sigmoid(logits). Smoothing constant 1 defines the empty case.
inline Tensor dice_loss(const Tensor& logits, const Tensor& target) {
  detail::require_same_shape(logits, target, "dice_loss");
  if (logits.shape().size() != 2) throw ShapeError("dice_loss: need masks as rows (2-d)");
  const long m = logits.dim(0), p = logits.dim(1);
  auto n = detail::make_op({1}, {logits.node()});
  const auto& ln = *logits.node();
  const auto& tn = *target.node();
  auto sig = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * p));
  auto inter = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  auto denom = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  double total = 0.0;
  for (long i = 0; i < m; ++i) {
    double s_pg = 0.0, s_p = 0.0, s_g = 0.0;
    for (long j = 0; j < p; ++j) {
      const double z = ln.at(static_cast<std::size_t>(i * p + j));
      const double sv = 1.0 / (1.0 + std::exp(-z));
      (*sig)[static_cast<std::size_t>(i * p + j)] = sv;
      const double g = tn.at(static_cast<std::size_t>(i * p + j));
      s_pg += sv * g;
      s_p += sv;
      s_g += g;
    }
    (*inter)[static_cast<std::size_t>(i)] = s_pg;
    (*denom)[static_cast<std::size_t>(i)] = s_p + s_g + 1.0;
    total += 1.0 - (2.0 * s_pg + 1.0) / (s_p + s_g + 1.0);
  }
  n->work[0] = total / static_cast<double>(m);
  n->mirror();
  auto tgt = target.node();
  n->backprop = [m, p, sig, inter, denom, tgt](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    const double g0 = static_cast<double>(self.grad[0]) / static_cast<double>(m);
    for (long i = 0; i < m; ++i) {
      const double den = (*denom)[static_cast<std::size_t>(i)];
      const double num = 2.0 * (*inter)[static_cast<std::size_t>(i)] + 1.0;
      for (long j = 0; j < p; ++j) {
        const double sv = (*sig)[static_cast<std::size_t>(i * p + j)];
        const double gt = tgt->at(static_cast<std::size_t>(i * p + j));
        // d(1 - num/den)/dp = -(2*gt*den - num) / den^2, then chain sigmoid.
        const double dloss_dp = -(2.0 * gt * den - num) / (den * den);
        in.grad[static_cast<std::size_t>(i * p + j)] +=
            static_cast<float>(g0 * dloss_dp * sv * (1.0 - sv));
      }
    }
  };
  return Tensor(n);
}

/// Symmetric diagonal InfoNCE over a B x B similarity matrix: mean over rows
/// of -log softmax_row(S)[i,i] plus mean over columns of -log softmax_col(S)[i,i].
inline Tensor info_nce_diag(const Tensor& sim) {
  if (sim.shape().size() != 2 || sim.dim(0) != sim.dim(1))
    throw ShapeError("info_nce_diag: need square matrix, got " + shape_str(sim.shape()));
  const long b = sim.dim(0);
  auto n = detail::make_op({1}, {sim.node()});
  const auto& sn = *sim.node();
  auto p_row = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b * b));
  auto p_col = std::make_shared<std::vector<double>>(static_cast<std::size_t>(b * b));
  double total = 0.0;
  for (long i = 0; i < b; ++i) {
    double mx = -1e300;
    for (long j = 0; j < b; ++j) mx = std::max(mx, sn.at(static_cast<std::size_t>(i * b + j)));
    double z = 0.0;
    for (long j = 0; j < b; ++j) z += std::exp(sn.at(static_cast<std::size_t>(i * b + j)) - mx);
    for (long j = 0; j < b; ++j)
      (*p_row)[static_cast<std::size_t>(i * b + j)] =
          std::exp(sn.at(static_cast<std::size_t>(i * b + j)) - mx) / z;
    total -= std::log((*p_row)[static_cast<std::size_t>(i * b + i)]);
  }
  for (long j = 0; j < b; ++j) {
    double mx = -1e300;
    for (long i = 0; i < b; ++i) mx = std::max(mx, sn.at(static_cast<std::size_t>(i * b + j)));
    double z = 0.0;
    for (long i = 0; i < b; ++i) z += std::exp(sn.at(static_cast<std::size_t>(i * b + j)) - mx);
    for (long i = 0; i < b; ++i)
      (*p_col)[static_cast<std::size_t>(i * b + j)] =
          std::exp(sn.at(static_cast<std::size_t>(i * b + j)) - mx) / z;
    total -= std::log((*p_col)[static_cast<std::size_t>(j * b + j)]);
  }
  n->work[0] = total / static_cast<double>(b);
  n->mirror();
  n->backprop = [b, p_row, p_col](Node& self) {
    auto& in = *self.inputs[0];
    if (!in.needs_grad) return;
    in.ensure_grad();
    const double g = static_cast<double>(self.grad[0]) / static_cast<double>(b);
    for (long i = 0; i < b; ++i)
      for (long j = 0; j < b; ++j) {
        double d = (*p_row)[static_cast<std::size_t>(i * b + j)] +
                   (*p_col)[static_cast<std::size_t>(i * b + j)];
        if (i == j) d -= 2.0;
        in.grad[static_cast<std::size_t>(i * b + j)] += static_cast<float>(g * d);
      }
  };
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode sweep from a scalar. Leaf (parameter) grads accumulate across
/// calls; interior grads are scratch and reset on every call.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  // Iterative postorder DFS for topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  Node* root = loss.node().get();
  if (!root->needs_grad) return;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    bool descended = false;
    while (idx < node->inputs.size()) {
      Node* child = node->inputs[idx++].get();
      if (child->needs_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
        descended = true;
        break;
      }
    }
    if (!descended && (stack.back().second >= stack.back().first->inputs.size())) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    n->ensure_grad();
    if (!n->is_param) std::fill(n->grad.begin(), n->grad.end(), 0.0f);
  }
  root->grad[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop(**it);
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

struct FiniteDiffOptions {
  double step = 1e-3;
  long max_coords_per_leaf = 64;  // 0 = all eligible coordinates
  std::uint64_t seed = 0;
  // Coordinates whose analytic gradient is below this fraction of the leaf's
  // largest gradient are skipped: their central differences sit at the
  // leaf-quantization noise floor and measure nothing. A leaf whose gradient
  // is zero everywhere keeps all coordinates, so dropped-gradient bugs surface.
  double sample_floor = 1e-2;
};

/// Max over sampled coordinates of |analytic - central| / (|central| + 1e-8).
/// The central difference uses the step actually realized in float32.
inline double finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> leaves,
                                FiniteDiffOptions opt = {}) {
  if (!(opt.step > 0.0) || opt.step > 1e-1)
    throw NumericError("finite_diff_check: step must lie in (0, 1e-1]");
  for (auto& l : leaves) l.zero_grad();
  Tensor out = f();
  if (!std::isfinite(out.item_precise())) throw NumericError("finite_diff_check: non-finite loss");
  backward(out);
  std::vector<std::vector<float>> analytic;
  analytic.reserve(leaves.size());
  for (auto& l : leaves) analytic.push_back(l.grad());

  Rng rng(opt.seed ^ 0x5bd1e9955bd1e995ULL);
  double max_rel = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const long n = leaf.numel();
    double gmax = 0.0;
    for (long c = 0; c < n; ++c)
      gmax = std::max(gmax, std::abs(static_cast<double>(analytic[li][static_cast<std::size_t>(c)])));
    std::vector<long> eligible;
    for (long c = 0; c < n; ++c)
      if (gmax == 0.0 ||
          std::abs(static_cast<double>(analytic[li][static_cast<std::size_t>(c)])) >= opt.sample_floor * gmax)
        eligible.push_back(c);
    std::vector<long> coords;
    if (opt.max_coords_per_leaf <= 0 ||
        static_cast<long>(eligible.size()) <= opt.max_coords_per_leaf) {
      coords = eligible;
    } else {
      std::vector<long> by_mag = eligible;
      std::stable_sort(by_mag.begin(), by_mag.end(), [&](long a, long b) {
        return std::abs(analytic[li][static_cast<std::size_t>(a)]) >
               std::abs(analytic[li][static_cast<std::size_t>(b)]);
      });
      const long half = opt.max_coords_per_leaf / 2;
      std::unordered_set<long> chosen;
      for (long i = 0; i < half; ++i) chosen.insert(by_mag[static_cast<std::size_t>(i)]);
      while (static_cast<long>(chosen.size()) < opt.max_coords_per_leaf)
        chosen.insert(eligible[static_cast<std::size_t>(rng.uniform_int(static_cast<long>(eligible.size())))]);
      coords.assign(chosen.begin(), chosen.end());
      std::sort(coords.begin(), coords.end());
    }
    for (long c : coords) {
      float& x = leaf.mutable_value()[static_cast<std::size_t>(c)];
      const float saved = x;
      x = static_cast<float>(static_cast<double>(saved) + opt.step);
      const double realized_up = static_cast<double>(x) - saved;
      const double fp = f().item_precise();
      x = static_cast<float>(static_cast<double>(saved) - opt.step);
      const double realized_down = static_cast<double>(saved) - x;
      const double fm = f().item_precise();
      x = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("finite_diff_check: non-finite loss at perturbed point");
      const double central = (fp - fm) / (realized_up + realized_down);
      const double rel = std::abs(static_cast<double>(analytic[li][static_cast<std::size_t>(c)]) - central) /
                         (std::abs(central) + 1e-8);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace taskseg::ad
