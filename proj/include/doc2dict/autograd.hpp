#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "doc2dict/tensor.hpp"

namespace d2d {

class GraphError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  mul,
  softmax,
  layer_norm,
  relu,
  gelu,
  embedding,
  concat,
  slice,
  transpose,
  cross_entropy,
  scale,
  sum,
  segment,
  segment_output,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::embedding: return "embedding_lookup";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::transpose: return "transpose";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::scale: return "scale";
    case OpKind::sum: return "sum";
    case OpKind::segment: return "segment";
    case OpKind::segment_output: return "segment_output";
  }
  return "?";
}

// Live interior activation tally. Interior = any op result; leaves (parameters,
// constants, replay inputs) are excluded.
struct ActivationStats {
  std::int64_t live = 0;
  std::int64_t peak = 0;
  std::int64_t op_executions = 0;

  void reset_peak() { peak = live; }
  void reset() {
    peak = live;
    op_executions = 0;
  }
};

inline ActivationStats& activation_stats() {
  thread_local ActivationStats stats;
  return stats;
}

namespace detail {

struct GradModeState {
  bool enabled = true;
  std::optional<std::uint32_t> segment;
};

inline GradModeState& grad_mode() {
  thread_local GradModeState state;
  return state;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode().enabled; }

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : prev_(detail::grad_mode().enabled) {
    detail::grad_mode().enabled = enabled;
  }
  ~GradModeGuard() { detail::grad_mode().enabled = prev_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool prev_;
};

class NoGradGuard : public GradModeGuard {
 public:
  NoGradGuard() : GradModeGuard(false) {}
};

class SegmentScope {
 public:
  explicit SegmentScope(std::optional<std::uint32_t> id) : prev_(detail::grad_mode().segment) {
    detail::grad_mode().segment = id;
  }
  ~SegmentScope() { detail::grad_mode().segment = prev_; }
  SegmentScope(const SegmentScope&) = delete;
  SegmentScope& operator=(const SegmentScope&) = delete;

 private:
  std::optional<std::uint32_t> prev_;
};

struct Node {
  Tensor value;
  OpKind op = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  std::optional<Tensor> grad;
  std::optional<std::uint32_t> segment_id;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  std::int64_t counted = 0;

  Node() = default;
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;
  ~Node() { activation_stats().live -= counted; }

  bool is_leaf() const { return op == OpKind::leaf; }

  Tensor& grad_buffer() {
    if (!grad) grad = Tensor::zeros(value.shape());
    return *grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

// Shared handle to a graph node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  const std::optional<Tensor>& grad() const { return node_->grad; }
  bool requires_grad() const { return node_->requires_grad; }
  OpKind op() const { return node_->op; }
  Node* node() const { return node_.get(); }
  const NodePtr& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

  void zero_grad() const { node_->grad.reset(); }

 private:
  NodePtr node_;
};

inline Var leaf(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return Var(std::move(n));
}

inline Var parameter(Tensor value) { return leaf(std::move(value), true); }
inline Var constant(Tensor value) { return leaf(std::move(value), false); }

namespace detail {

inline void count_node(Node& n) {
  auto& s = activation_stats();
  n.counted = static_cast<std::int64_t>(n.value.size());
  s.live += n.counted;
  s.peak = std::max(s.peak, s.live);
  ++s.op_executions;
}

inline Var make_result(OpKind op, Tensor value, std::initializer_list<const Var*> inputs,
                       std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from op ") + op_name(op) + " with shape " +
                       shape_str(value.shape()));
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->segment_id = grad_mode().segment;
  count_node(*n);
  if (grad_enabled()) {
    bool needs = false;
    for (const Var* in : inputs) needs = needs || in->requires_grad();
    if (needs) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (const Var* in : inputs) n->inputs.push_back(in->ptr());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(n));
}

inline Var make_result_multi(OpKind op, Tensor value, std::span<const Var> inputs,
                             std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) {
    throw NumericError(std::string("non-finite output from op ") + op_name(op));
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  n->segment_id = grad_mode().segment;
  count_node(*n);
  if (grad_enabled()) {
    bool needs = false;
    for (const Var& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      n->requires_grad = true;
      for (const Var& in : inputs) n->inputs.push_back(in.ptr());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Var(std::move(n));
}

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// b broadcasts over a when b's shape equals a trailing suffix of a's shape.
inline bool is_suffix_shape(const Shape& a, const Shape& b) {
  if (b.size() > a.size()) return false;
  return std::equal(b.rbegin(), b.rend(), a.rbegin());
}

inline void check_broadcast(const char* op, const Tensor& a, const Tensor& b) {
  if (!is_suffix_shape(a.shape(), b.shape())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline std::uint64_t hash_tensor(const Tensor& t) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ull;
  };
  for (auto d : t.shape()) mix(d);
  for (float f : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof bits);
    mix(bits);
  }
  return h;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: shape mismatch " + shape_str(av.shape()) + " x " +
                     shape_str(bv.shape()));
  }
  const std::size_t n = av.dim(0), k = av.dim(1), m = bv.dim(1);
  Tensor out = Tensor::zeros({n, m});
  kernels::gemm_acc(av.ptr(), bv.ptr(), out.ptr(), n, k, m);
  return detail::make_result(OpKind::matmul, std::move(out), {&a, &b}, [n, k, m](Node& self) {
    const Tensor& g = *self.grad;
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      kernels::gemm_nt_acc(g.ptr(), nb.value.ptr(), na.grad_buffer().ptr(), n, m, k);
    }
    if (nb.requires_grad) {
      kernels::gemm_tn_acc(na.value.ptr(), g.ptr(), nb.grad_buffer().ptr(), n, k, m);
    }
  });
}

inline Var add(const Var& a, const Var& b) {
  detail::check_broadcast("add", a.value(), b.value());
  Tensor out = a.value();
  const std::size_t bn = b.size();
  const float* bp = b.value().ptr();
  float* op = out.ptr();
  for (std::size_t i = 0; i < out.size(); i += bn) {
    for (std::size_t j = 0; j < bn; ++j) op[i + j] += bp[j];
  }
  return detail::make_result(OpKind::add, std::move(out), {&a, &b}, [bn](Node& self) {
    const Tensor& g = *self.grad;
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    if (na.requires_grad) {
      float* ga = na.grad_buffer().ptr();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (nb.requires_grad) {
      float* gb = nb.grad_buffer().ptr();
      for (std::size_t i = 0; i < g.size(); i += bn) {
        for (std::size_t j = 0; j < bn; ++j) gb[j] += g[i + j];
      }
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_broadcast("mul", a.value(), b.value());
  Tensor out = a.value();
  const std::size_t bn = b.size();
  const float* bp = b.value().ptr();
  float* op = out.ptr();
  for (std::size_t i = 0; i < out.size(); i += bn) {
    for (std::size_t j = 0; j < bn; ++j) op[i + j] *= bp[j];
  }
  return detail::make_result(OpKind::mul, std::move(out), {&a, &b}, [bn](Node& self) {
    const Tensor& g = *self.grad;
    Node& na = *self.inputs[0];
    Node& nb = *self.inputs[1];
    const float* av = na.value.ptr();
    const float* bv = nb.value.ptr();
    if (na.requires_grad) {
      float* ga = na.grad_buffer().ptr();
      for (std::size_t i = 0; i < g.size(); i += bn) {
        for (std::size_t j = 0; j < bn; ++j) ga[i + j] += g[i + j] * bv[j];
      }
    }
    if (nb.requires_grad) {
      float* gb = nb.grad_buffer().ptr();
      for (std::size_t i = 0; i < g.size(); i += bn) {
        for (std::size_t j = 0; j < bn; ++j) gb[j] += g[i + j] * av[i + j];
      }
    }
  });
}

inline Var scale(const Var& a, float s) {
  Tensor out = a.value();
  for (float& v : out.data()) v *= s;
  return detail::make_result(OpKind::scale, std::move(out), {&a}, [s](Node& self) {
    const Tensor& g = *self.grad;
    float* ga = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

inline Var softmax(const Var& a, int axis = -1) {
  const std::size_t ax = detail::normalize_axis(axis, a.value().rank(), "softmax");
  const auto sp = detail::split_axis(a.shape(), ax);
  Tensor out = a.value();
  float* y = out.ptr();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      float* base = y + o * sp.len * sp.inner + j;
      float mx = base[0];
      for (std::size_t i = 1; i < sp.len; ++i) mx = std::max(mx, base[i * sp.inner]);
      float total = 0.0f;
      for (std::size_t i = 0; i < sp.len; ++i) {
        const float e = std::exp(base[i * sp.inner] - mx);
        base[i * sp.inner] = e;
        total += e;
      }
      const float inv = 1.0f / total;
      for (std::size_t i = 0; i < sp.len; ++i) base[i * sp.inner] *= inv;
    }
  }
  return detail::make_result(OpKind::softmax, std::move(out), {&a}, [sp](Node& self) {
    const float* g = self.grad->ptr();
    const float* y = self.value.ptr();
    float* gx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t j = 0; j < sp.inner; ++j) {
        const std::size_t base = o * sp.len * sp.inner + j;
        float dot = 0.0f;
        for (std::size_t i = 0; i < sp.len; ++i) {
          dot += g[base + i * sp.inner] * y[base + i * sp.inner];
        }
        for (std::size_t i = 0; i < sp.len; ++i) {
          const std::size_t idx = base + i * sp.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

// Normalizes to zero mean and unit variance along `axis`; no affine terms.
inline Var layer_norm(const Var& a, int axis = -1, float eps = 1e-5f) {
  const std::size_t ax = detail::normalize_axis(axis, a.value().rank(), "layer_norm");
  const auto sp = detail::split_axis(a.shape(), ax);
  Tensor out = a.value();
  float* y = out.ptr();
  std::vector<float> inv_std(sp.outer * sp.inner);
  const float n = static_cast<float>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t j = 0; j < sp.inner; ++j) {
      float* base = y + o * sp.len * sp.inner + j;
      float mean = 0.0f;
      for (std::size_t i = 0; i < sp.len; ++i) mean += base[i * sp.inner];
      mean /= n;
      float var = 0.0f;
      for (std::size_t i = 0; i < sp.len; ++i) {
        const float d = base[i * sp.inner] - mean;
        var += d * d;
      }
      var /= n;
      const float is = 1.0f / std::sqrt(var + eps);
      inv_std[o * sp.inner + j] = is;
      for (std::size_t i = 0; i < sp.len; ++i) base[i * sp.inner] = (base[i * sp.inner] - mean) * is;
    }
  }
  return detail::make_result(
      OpKind::layer_norm, std::move(out), {&a}, [sp, n, inv_std = std::move(inv_std)](Node& self) {
        const float* g = self.grad->ptr();
        const float* xhat = self.value.ptr();
        float* gx = self.inputs[0]->grad_buffer().ptr();
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t j = 0; j < sp.inner; ++j) {
            const std::size_t base = o * sp.len * sp.inner + j;
            float sg = 0.0f, sgx = 0.0f;
            for (std::size_t i = 0; i < sp.len; ++i) {
              const std::size_t idx = base + i * sp.inner;
              sg += g[idx];
              sgx += g[idx] * xhat[idx];
            }
            const float is = inv_std[o * sp.inner + j];
            for (std::size_t i = 0; i < sp.len; ++i) {
              const std::size_t idx = base + i * sp.inner;
              gx[idx] += is / n * (n * g[idx] - sg - xhat[idx] * sgx);
            }
          }
        }
      });
}

inline Var relu(const Var& a) {
  Tensor out = a.value();
  for (float& v : out.data()) v = v > 0.0f ? v : 0.0f;
  return detail::make_result(OpKind::relu, std::move(out), {&a}, [](Node& self) {
    const float* g = self.grad->ptr();
    const float* x = self.inputs[0]->value.ptr();
    float* gx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      if (x[i] > 0.0f) gx[i] += g[i];
    }
  });
}

namespace detail {
constexpr float kGeluC = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluK = 0.044715f;
}  // namespace detail

// tanh approximation
inline Var gelu(const Var& a) {
  Tensor out = a.value();
  for (float& v : out.data()) {
    const float u = detail::kGeluC * (v + detail::kGeluK * v * v * v);
    v = 0.5f * v * (1.0f + std::tanh(u));
  }
  return detail::make_result(OpKind::gelu, std::move(out), {&a}, [](Node& self) {
    const float* g = self.grad->ptr();
    const float* x = self.inputs[0]->value.ptr();
    float* gx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      const float v = x[i];
      const float u = detail::kGeluC * (v + detail::kGeluK * v * v * v);
      const float t = std::tanh(u);
      const float du = detail::kGeluC * (1.0f + 3.0f * detail::kGeluK * v * v);
      gx[i] += g[i] * (0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du);
    }
  });
}

inline Var embedding_lookup(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(tv.shape()));
  if (ids.empty()) throw ShapeError("embedding_lookup: empty id list");
  const std::size_t vocab = tv.dim(0), d = tv.dim(1);
  std::vector<int> idv(ids.begin(), ids.end());
  Tensor out = Tensor::zeros({idv.size(), d});
  for (std::size_t r = 0; r < idv.size(); ++r) {
    if (idv[r] < 0 || static_cast<std::size_t>(idv[r]) >= vocab) {
      throw ShapeError("embedding_lookup: id " + std::to_string(idv[r]) + " outside table " +
                       shape_str(tv.shape()));
    }
    std::copy_n(tv.ptr() + static_cast<std::size_t>(idv[r]) * d, d, out.ptr() + r * d);
  }
  return detail::make_result(OpKind::embedding, std::move(out), {&table},
                             [d, idv = std::move(idv)](Node& self) {
                               const float* g = self.grad->ptr();
                               float* gt = self.inputs[0]->grad_buffer().ptr();
                               for (std::size_t r = 0; r < idv.size(); ++r) {
                                 float* dst = gt + static_cast<std::size_t>(idv[r]) * d;
                                 for (std::size_t j = 0; j < d; ++j) dst[j] += g[r * d + j];
                               }
                             });
}

inline Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  const std::size_t ax = detail::normalize_axis(axis, first.size(), "concat");
  Shape out_shape = first;
  out_shape[ax] = 0;
  std::vector<std::size_t> lens;
  for (const Var& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) {
      throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != first[i]) {
        throw ShapeError("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(s));
      }
    }
    lens.push_back(s[ax]);
    out_shape[ax] += s[ax];
  }
  const auto sp = detail::split_axis(out_shape, ax);
  Tensor out = Tensor::zeros(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const std::size_t chunk = lens[k] * sp.inner;
    const float* src = parts[k].value().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(src + o * chunk, chunk, out.ptr() + o * sp.len * sp.inner + offset * sp.inner);
    }
    offset += lens[k];
  }
  return detail::make_result_multi(
      OpKind::concat, std::move(out), parts, [sp, lens = std::move(lens)](Node& self) {
        const float* g = self.grad->ptr();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < self.inputs.size(); ++k) {
          Node& in = *self.inputs[k];
          const std::size_t chunk = lens[k] * sp.inner;
          if (in.requires_grad) {
            float* dst = in.grad_buffer().ptr();
            for (std::size_t o = 0; o < sp.outer; ++o) {
              const float* src = g + o * sp.len * sp.inner + offset * sp.inner;
              for (std::size_t i = 0; i < chunk; ++i) dst[o * chunk + i] += src[i];
            }
          }
          offset += lens[k];
        }
      });
}

inline Var concat(std::initializer_list<Var> parts, int axis) {
  std::vector<Var> v(parts);
  return concat(std::span<const Var>(v), axis);
}

// Half-open range [begin, end) along `axis`.
inline Var slice(const Var& a, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::normalize_axis(axis, a.value().rank(), "slice");
  const Shape& in_shape = a.shape();
  if (begin >= end || end > in_shape[ax]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + shape_str(in_shape));
  }
  const auto sp = detail::split_axis(in_shape, ax);
  Shape out_shape = in_shape;
  out_shape[ax] = end - begin;
  Tensor out = Tensor::zeros(out_shape);
  const std::size_t chunk = (end - begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(a.value().ptr() + o * sp.len * sp.inner + begin * sp.inner, chunk,
                out.ptr() + o * chunk);
  }
  return detail::make_result(OpKind::slice, std::move(out), {&a}, [sp, begin, chunk](Node& self) {
    const float* g = self.grad->ptr();
    float* gx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t o = 0; o < sp.outer; ++o) {
      float* dst = gx + o * sp.len * sp.inner + begin * sp.inner;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[o * chunk + i];
    }
  });
}

inline Var transpose(const Var& a) {
  const Tensor& av = a.value();
  if (av.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(av.shape()));
  const std::size_t r = av.dim(0), c = av.dim(1);
  Tensor out = Tensor::zeros({c, r});
  kernels::transpose(av.ptr(), out.ptr(), r, c);
  return detail::make_result(OpKind::transpose, std::move(out), {&a}, [r, c](Node& self) {
    std::vector<float> gt(r * c);
    kernels::transpose(self.grad->ptr(), gt.data(), c, r);
    float* gx = self.inputs[0]->grad_buffer().ptr();
    for (std::size_t i = 0; i < gt.size(); ++i) gx[i] += gt[i];
  });
}

// Mean token cross-entropy over rows whose target differs from pad_id.
// A batch with every row padded yields zero loss.
inline Var cross_entropy(const Var& logits, std::span<const int> targets, int pad_id) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != targets.size()) {
    throw ShapeError("cross_entropy: logits " + shape_str(lv.shape()) + " vs targets [" +
                     std::to_string(targets.size()) + "]");
  }
  const std::size_t n = lv.dim(0), v = lv.dim(1);
  std::vector<int> tg(targets.begin(), targets.end());
  std::vector<float> probs(n * v);
  std::size_t count = 0;
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const float* row = lv.ptr() + r * v;
    float mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    float total = 0.0f;
    for (std::size_t j = 0; j < v; ++j) {
      probs[r * v + j] = std::exp(row[j] - mx);
      total += probs[r * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= total;
    if (tg[r] == pad_id) continue;
    if (tg[r] < 0 || static_cast<std::size_t>(tg[r]) >= v) {
      throw ShapeError("cross_entropy: target id " + std::to_string(tg[r]) + " outside [0," +
                       std::to_string(v) + ")");
    }
    loss += static_cast<double>(mx + std::log(total) - row[tg[r]]);
    ++count;
  }
  const float value = count ? static_cast<float>(loss / static_cast<double>(count)) : 0.0f;
  return detail::make_result(
      OpKind::cross_entropy, Tensor::scalar(value), {&logits},
      [n, v, count, pad_id, tg = std::move(tg), probs = std::move(probs)](Node& self) {
        if (count == 0) return;
        const float g = (*self.grad)[0] / static_cast<float>(count);
        float* gx = self.inputs[0]->grad_buffer().ptr();
        for (std::size_t r = 0; r < n; ++r) {
          if (tg[r] == pad_id) continue;
          for (std::size_t j = 0; j < v; ++j) gx[r * v + j] += g * probs[r * v + j];
          gx[r * v + static_cast<std::size_t>(tg[r])] -= g;
        }
      });
}

inline Var sum(const Var& a) {
  double total = 0.0;
  for (float x : a.value().data()) total += x;
  return detail::make_result(OpKind::sum, Tensor::scalar(static_cast<float>(total)), {&a},
                             [](Node& self) {
                               const float g = (*self.grad)[0];
                               for (float& x : self.inputs[0]->grad_buffer().data()) x += g;
                             });
}

// ---------------------------------------------------------------------------
// Backward

namespace detail {

inline std::vector<NodePtr> topo_order(std::span<const Var> roots) {
  std::vector<NodePtr> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  for (const Var& r : roots) {
    if (!r.requires_grad() || !visited.insert(r.node()).second) continue;
    stack.emplace_back(r.ptr(), 0);
    while (!stack.empty()) {
      auto& top = stack.back();
      if (top.second < top.first->inputs.size()) {
        NodePtr child = top.first->inputs[top.second++];
        if (child->requires_grad && visited.insert(child.get()).second) {
          stack.emplace_back(std::move(child), 0);
        }
      } else {
        order.push_back(std::move(top.first));
        stack.pop_back();
      }
    }
  }
  return order;
}

inline void run_backward(std::span<const Var> roots, std::span<const Tensor> seeds) {
  for (std::size_t i = 0; i < roots.size(); ++i) {
    if (!roots[i].requires_grad()) continue;
    const Tensor& s = seeds[i];
    if (!s.same_shape(roots[i].value())) {
      throw ShapeError("backward: seed " + shape_str(s.shape()) + " vs output " +
                       shape_str(roots[i].shape()));
    }
    float* g = roots[i].node()->grad_buffer().ptr();
    for (std::size_t j = 0; j < s.size(); ++j) g[j] += s[j];
  }
  std::vector<NodePtr> order = topo_order(roots);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodePtr& node = *it;
    if (!node->is_leaf()) {
      if (node->grad && node->backward_fn) node->backward_fn(*node);
      // Consume the graph as we go so interior activations can be released.
      node->grad.reset();
      node->inputs.clear();
      node->backward_fn = nullptr;
    }
    node.reset();
  }
}

}  // namespace detail

// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
// The interior graph is consumed. `seed` defaults to 1.
inline void backward(const Var& loss, std::optional<float> seed = std::nullopt) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  Tensor s = Tensor::filled(loss.shape(), seed.value_or(1.0f));
  const Var roots[] = {loss};
  detail::run_backward(roots, std::span<const Tensor>(&s, 1));
}

// Backpropagates several upstream gradients at once (sum over <output_i, grad_i>).
inline void backward_multi(std::span<const Var> outputs, std::span<const Tensor> grads) {
  if (outputs.size() != grads.size()) throw GraphError("backward_multi: output/grad count mismatch");
  detail::run_backward(outputs, grads);
}

// ---------------------------------------------------------------------------
// Checkpoint segments

using ReplayFn = std::function<std::vector<Var>(std::span<const Var>)>;

class ReplayError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct SegmentState {
  ReplayFn replay;
  std::uint32_t id = 0;
  std::vector<std::uint64_t> output_hashes;
  std::vector<std::optional<Tensor>> output_grads;
};

}  // namespace detail

// Runs `replay` without recording interior activations. The returned outputs
// are graph nodes whose backward re-executes `replay` on the saved inputs,
// rebuilds the interior graph and backpropagates through it. Leaves captured
// by `replay` (parameters) receive their gradients during that re-execution.
inline std::vector<Var> checkpoint_segment(ReplayFn replay, std::vector<Var> inputs,
                                           std::uint32_t segment_id) {
  if (!replay) throw GraphError("checkpoint_segment: missing replay function");
  // Parameters captured by the closure are invisible here, so every segment
  // executed with grad enabled is recorded.
  if (!grad_enabled()) {
    SegmentScope scope(segment_id);
    return replay(inputs);
  }
  std::vector<Var> outs;
  {
    NoGradGuard no_grad;
    SegmentScope scope(segment_id);
    outs = replay(inputs);
  }
  auto state = std::make_shared<detail::SegmentState>();
  state->replay = std::move(replay);
  state->id = segment_id;
  state->output_grads.resize(outs.size());

  auto hub = std::make_shared<Node>();
  hub->value = Tensor::scalar(0.0f);
  hub->op = OpKind::segment;
  hub->segment_id = segment_id;
  hub->requires_grad = true;
  for (const Var& in : inputs) hub->inputs.push_back(in.ptr());
  hub->backward_fn = [state](Node& self) {
    if (!state->replay) throw GraphError("checkpoint_segment: replay function missing at backward");
    std::vector<Var> fresh;
    fresh.reserve(self.inputs.size());
    for (const NodePtr& in : self.inputs) fresh.push_back(leaf(in->value, in->requires_grad));
    std::vector<Var> rebuilt;
    {
      GradModeGuard grad_on(true);
      SegmentScope scope(state->id);
      rebuilt = state->replay(fresh);
    }
    if (rebuilt.size() != state->output_hashes.size()) {
      throw ReplayError("checkpoint_segment " + std::to_string(state->id) +
                        ": replay returned a different number of outputs");
    }
    std::vector<Var> roots;
    std::vector<Tensor> seeds;
    for (std::size_t i = 0; i < rebuilt.size(); ++i) {
      if (detail::hash_tensor(rebuilt[i].value()) != state->output_hashes[i]) {
        throw ReplayError("checkpoint_segment " + std::to_string(state->id) +
                          ": replay is nondeterministic (output " + std::to_string(i) + " differs)");
      }
      if (state->output_grads[i]) {
        roots.push_back(rebuilt[i]);
        seeds.push_back(std::move(*state->output_grads[i]));
        state->output_grads[i].reset();
      }
    }
    rebuilt.clear();
    detail::run_backward(roots, seeds);
    roots.clear();
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      Node& target = *self.inputs[i];
      if (!target.requires_grad || !fresh[i].grad()) continue;
      const Tensor& g = *fresh[i].grad();
      float* dst = target.grad_buffer().ptr();
      for (std::size_t j = 0; j < g.size(); ++j) dst[j] += g[j];
    }
  };

  std::vector<Var> result;
  result.reserve(outs.size());
  for (std::size_t i = 0; i < outs.size(); ++i) {
    state->output_hashes.push_back(detail::hash_tensor(outs[i].value()));
    NodePtr out;
    bool reusable = outs[i].ptr().use_count() == 1 && !outs[i].node()->is_leaf();
    if (reusable) {
      out = outs[i].ptr();
    } else {
      out = std::make_shared<Node>();
      out->value = outs[i].value();
      detail::count_node(*out);
    }
    out->op = OpKind::segment_output;
    out->segment_id = segment_id;
    out->requires_grad = true;
    out->inputs = {hub};
    out->backward_fn = [state, i](Node& self) {
      auto& slot = state->output_grads[i];
      if (slot) {
        float* dst = slot->ptr();
        for (std::size_t j = 0; j < self.grad->size(); ++j) dst[j] += (*self.grad)[j];
      } else {
        slot = std::move(*self.grad);
      }
      self.inputs[0]->grad_buffer();
    };
    result.emplace_back(std::move(out));
  }
  return result;
}

}  // namespace d2d
