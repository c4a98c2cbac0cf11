// Copyright 2026 The bscreen Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "bscreen/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "bscreen/kernels.hpp"

namespace bscreen::ad {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_probe_active = false;
thread_local std::uint64_t t_probe_hash = 0;

template <class T>
Var<T> record(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
              std::function<std::vector<Var<T>>(const Var<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  const bool needs = GradMode::enabled() &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    node->op = op;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Var<T>::from_node(std::move(node));
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": shape " + to_string(a) + " vs " + to_string(b));
}

void require_rank(const Shape& s, int rank, const char* op) {
  if (static_cast<int>(s.size()) != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
  }
}

void require_rank_at_least(const Shape& s, int rank, const char* op) {
  if (static_cast<int>(s.size()) < rank) {
    throw ShapeError(std::string(op) + ": expected rank >= " + std::to_string(rank) + ", got " + to_string(s));
  }
}

template <class T, class F>
Tensor<T> map_values(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <class T>
void probe_signs(const Tensor<T>& x) {
  if (!t_probe_active) return;
  std::uint64_t word = 0;
  int bits = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    word = (word << 1) | (x[i] > T{0} ? 1u : 0u);
    if (++bits == 64) {
      KinkProbe::absorb(word);
      word = 0;
      bits = 0;
    }
  }
  KinkProbe::absorb(word ^ (static_cast<std::uint64_t>(bits) << 58));
}

// [N, C, rest...] decomposition.
struct ChannelLayout {
  int batch, channels;
  std::size_t spatial;
};
ChannelLayout channel_layout(const Shape& s, const char* op) {
  require_rank_at_least(s, 2, op);
  std::size_t spatial = 1;
  for (std::size_t i = 2; i < s.size(); ++i) spatial *= static_cast<std::size_t>(s[i]);
  return {s[0], s[1], spatial};
}

// [outer, n, inner] decomposition around `axis`.
struct AxisLayout {
  std::size_t outer, n, inner;
};
AxisLayout axis_layout(const Shape& s, int axis) {
  AxisLayout l{1, static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) l.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) l.inner *= static_cast<std::size_t>(s[i]);
  return l;
}

}  // namespace

// ---------------------------------------------------------------------------

bool GradMode::enabled() { return t_grad_enabled; }
void GradMode::set(bool enabled) { t_grad_enabled = enabled; }

void KinkProbe::start() {
  t_probe_active = true;
  t_probe_hash = 1469598103934665603ull;
}
std::uint64_t KinkProbe::stop() {
  t_probe_active = false;
  return t_probe_hash;
}
bool KinkProbe::active() { return t_probe_active; }
void KinkProbe::absorb(std::uint64_t bits) {
  t_probe_hash = (t_probe_hash ^ bits) * 1099511628211ull;
  t_probe_hash ^= t_probe_hash >> 29;
}

template <class T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <class T>
T Var<T>::item() const {
  if (size() != 1) throw ShapeError("item() on " + to_string(shape()));
  return value()[0];
}

template <class T>
std::vector<Var<T>> grad(const Var<T>& output, std::span<const Var<T>> wrt, bool create_graph) {
  std::vector<Var<T>> result;
  result.reserve(wrt.size());
  auto zeros_like = [](const Var<T>& v) { return constant(Tensor<T>(v.shape())); };
  if (!output.requires_grad()) {
    for (const auto& w : wrt) result.push_back(zeros_like(w));
    return result;
  }

  // Reverse topological order by iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_map<Node<T>*, bool> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{output.node(), 0}};
  visited[output.node()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].node();
      if (child && child->requires_grad && !visited[child]) {
        visited[child] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<Node<T>*, Var<T>> grads;
  grads[output.node()] = constant(Tensor<T>(output.shape(), T{1}));
  GradMode::Guard guard(create_graph);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward) continue;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    const Var<T> g = found->second;
    std::vector<Var<T>> input_grads = node->backward(g);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const Var<T>& in = node->inputs[i];
      if (!in.requires_grad() || i >= input_grads.size() || !input_grads[i].defined()) continue;
      auto [slot, inserted] = grads.try_emplace(in.node(), input_grads[i]);
      if (!inserted) slot->second = add(slot->second, input_grads[i]);
    }
  }
  for (const auto& w : wrt) {
    auto found = w.defined() ? grads.find(w.node()) : grads.end();
    result.push_back(found == grads.end() ? zeros_like(w) : found->second);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return record<T>("add", std::move(out), {a, b}, [](const Var<T>& g) { return std::vector<Var<T>>{g, g}; });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return record<T>("sub", std::move(out), {a, b},
                   [](const Var<T>& g) { return std::vector<Var<T>>{g, scale(g, -1.0)}; });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return record<T>("mul", std::move(out), {a, b}, [a, b](const Var<T>& g) {
    return std::vector<Var<T>>{a.requires_grad() ? mul(g, b) : Var<T>{}, b.requires_grad() ? mul(g, a) : Var<T>{}};
  });
}

template <class T>
Var<T> scale(const Var<T>& a, double c) {
  const T k = static_cast<T>(c);
  return record<T>("scale", map_values(a.value(), [k](T v) { return v * k; }), {a},
                   [c](const Var<T>& g) { return std::vector<Var<T>>{scale(g, c)}; });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, double c) {
  const T k = static_cast<T>(c);
  return record<T>("add_scalar", map_values(a.value(), [k](T v) { return v + k; }), {a},
                   [](const Var<T>& g) { return std::vector<Var<T>>{g}; });
}

template <class T>
Var<T> pow_scalar(const Var<T>& a, double p) {
  return record<T>("pow", map_values(a.value(), [p](T v) { return static_cast<T>(std::pow(v, p)); }), {a},
                   [a, p](const Var<T>& g) { return std::vector<Var<T>>{mul(g, scale(pow_scalar(a, p - 1.0), p))}; });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  return record<T>("exp", map_values(a.value(), [](T v) { return std::exp(v); }), {a},
                   [a](const Var<T>& g) { return std::vector<Var<T>>{mul(g, exp(a))}; });
}

template <class T>
Var<T> log(const Var<T>& a) {
  return record<T>("log", map_values(a.value(), [](T v) { return std::log(v); }), {a},
                   [a](const Var<T>& g) { return std::vector<Var<T>>{mul(g, pow_scalar(a, -1.0))}; });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  auto f = [](T v) {
    if (v >= 0) return T{1} / (T{1} + std::exp(-v));
    const T e = std::exp(v);
    return e / (T{1} + e);
  };
  return record<T>("sigmoid", map_values(a.value(), f), {a}, [a](const Var<T>& g) {
    const Var<T> s = sigmoid(a);
    return std::vector<Var<T>>{mul(g, mul(s, add_scalar(scale(s, -1.0), 1.0)))};
  });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  auto f = [](T v) { return std::max(v, T{0}) + std::log1p(std::exp(-std::abs(v))); };
  return record<T>("softplus", map_values(a.value(), f), {a},
                   [a](const Var<T>& g) { return std::vector<Var<T>>{mul(g, sigmoid(a))}; });
}

template <class T>
Var<T> relu(const Var<T>& a) {
  probe_signs(a.value());
  return record<T>("relu", map_values(a.value(), [](T v) { return v > T{0} ? v : T{0}; }), {a},
                   [a](const Var<T>& g) {
                     auto mask = constant(map_values(a.value(), [](T v) { return v > T{0} ? T{1} : T{0}; }));
                     return std::vector<Var<T>>{mul(g, mask)};
                   });
}

template <class T>
Var<T> abs(const Var<T>& a) {
  probe_signs(a.value());
  return record<T>("abs", map_values(a.value(), [](T v) { return std::abs(v); }), {a}, [a](const Var<T>& g) {
    auto sign = constant(map_values(a.value(), [](T v) { return v > T{0} ? T{1} : (v < T{0} ? T{-1} : T{0}); }));
    return std::vector<Var<T>>{mul(g, sign)};
  });
}

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Shape original = a.shape();
  return record<T>("reshape", a.value().reshaped(std::move(shape)), {a},
                   [original](const Var<T>& g) { return std::vector<Var<T>>{reshape(g, original)}; });
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().values()) acc += v;
  Shape original = a.shape();
  return record<T>("sum_all", Tensor<T>({1}, std::vector<T>{acc}), {a},
                   [original](const Var<T>& g) { return std::vector<Var<T>>{expand(g, original)}; });
}

template <class T>
Var<T> expand(const Var<T>& a, Shape shape) {
  if (a.size() != 1) throw ShapeError("expand: source must hold one element, got " + to_string(a.shape()));
  Shape original = a.shape();
  return record<T>("expand", Tensor<T>(std::move(shape), a.value()[0]), {a}, [original](const Var<T>& g) {
    return std::vector<Var<T>>{reshape(sum_all(g), original)};
  });
}

// ---------------------------------------------------------------------------
// 2-D

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 2, "matmul");
  require_rank(b.shape(), 2, "matmul");
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  Tensor<T> out({m, n});
  const T* A = a.value().data();
  const T* B = b.value().data();
  T* C = out.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      const T av = A[static_cast<std::size_t>(i) * k + p];
      const T* brow = B + static_cast<std::size_t>(p) * n;
      T* crow = C + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  return record<T>("matmul", std::move(out), {a, b}, [a, b](const Var<T>& g) {
    return std::vector<Var<T>>{a.requires_grad() ? matmul(g, transpose(b)) : Var<T>{},
                               b.requires_grad() ? matmul(transpose(a), g) : Var<T>{}};
  });
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  require_rank(a.shape(), 2, "transpose");
  const int r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = a.value()[static_cast<std::size_t>(i) * c + j];
  return record<T>("transpose", std::move(out), {a},
                   [](const Var<T>& g) { return std::vector<Var<T>>{transpose(g)}; });
}

template <class T>
Var<T> sum_rows(const Var<T>& a) {
  require_rank(a.shape(), 2, "sum_rows");
  const int r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out({c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j)] += a.value()[static_cast<std::size_t>(i) * c + j];
  return record<T>("sum_rows", std::move(out), {a},
                   [r](const Var<T>& g) { return std::vector<Var<T>>{broadcast_rows(g, r)}; });
}

template <class T>
Var<T> broadcast_rows(const Var<T>& v, int rows) {
  require_rank(v.shape(), 1, "broadcast_rows");
  const int c = v.shape()[0];
  Tensor<T> out({rows, c});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = v.value()[static_cast<std::size_t>(j)];
  return record<T>("broadcast_rows", std::move(out), {v},
                   [](const Var<T>& g) { return std::vector<Var<T>>{sum_rows(g)}; });
}

template <class T>
Var<T> sum_cols(const Var<T>& a) {
  require_rank(a.shape(), 2, "sum_cols");
  const int r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out({r});
  for (int i = 0; i < r; ++i) {
    T acc = 0;
    for (int j = 0; j < c; ++j) acc += a.value()[static_cast<std::size_t>(i) * c + j];
    out[static_cast<std::size_t>(i)] = acc;
  }
  return record<T>("sum_cols", std::move(out), {a},
                   [c](const Var<T>& g) { return std::vector<Var<T>>{broadcast_cols(g, c)}; });
}

template <class T>
Var<T> broadcast_cols(const Var<T>& v, int cols) {
  require_rank(v.shape(), 1, "broadcast_cols");
  const int r = v.shape()[0];
  Tensor<T> out({r, cols});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < cols; ++j) out[static_cast<std::size_t>(i) * cols + j] = v.value()[static_cast<std::size_t>(i)];
  return record<T>("broadcast_cols", std::move(out), {v},
                   [](const Var<T>& g) { return std::vector<Var<T>>{sum_cols(g)}; });
}

template <class T>
Var<T> log_softmax_rows(const Var<T>& a) {
  require_rank(a.shape(), 2, "log_softmax_rows");
  const int r = a.shape()[0], c = a.shape()[1];
  Tensor<T> out(a.shape());
  for (int i = 0; i < r; ++i) {
    const T* row = a.value().data() + static_cast<std::size_t>(i) * c;
    const T mx = *std::max_element(row, row + c);
    T s = 0;
    for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
    const T lse = mx + std::log(s);
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = row[j] - lse;
  }
  return record<T>("log_softmax_rows", std::move(out), {a}, [a, c](const Var<T>& g) {
    const Var<T> p = exp(log_softmax_rows(a));
    return std::vector<Var<T>>{sub(g, mul(p, broadcast_cols(sum_cols(g), c)))};
  });
}

// ---------------------------------------------------------------------------
// Channel-structured

template <class T>
Var<T> channel_sum(const Var<T>& x) {
  const auto l = channel_layout(x.shape(), "channel_sum");
  Tensor<T> out({l.channels});
  const T* p = x.value().data();
  for (int n = 0; n < l.batch; ++n)
    for (int c = 0; c < l.channels; ++c) {
      T acc = 0;
      const T* src = p + (static_cast<std::size_t>(n) * l.channels + c) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) acc += src[s];
      out[static_cast<std::size_t>(c)] += acc;
    }
  Shape shape = x.shape();
  return record<T>("channel_sum", std::move(out), {x},
                   [shape](const Var<T>& g) { return std::vector<Var<T>>{channel_broadcast(g, shape)}; });
}

template <class T>
Var<T> channel_broadcast(const Var<T>& v, const Shape& shape) {
  const auto l = channel_layout(shape, "channel_broadcast");
  if (v.shape() != Shape{l.channels}) {
    throw ShapeError("channel_broadcast: " + to_string(v.shape()) + " onto " + to_string(shape));
  }
  Tensor<T> out(shape);
  for (int n = 0; n < l.batch; ++n)
    for (int c = 0; c < l.channels; ++c) {
      T* dst = out.data() + (static_cast<std::size_t>(n) * l.channels + c) * l.spatial;
      std::fill(dst, dst + l.spatial, v.value()[static_cast<std::size_t>(c)]);
    }
  return record<T>("channel_broadcast", std::move(out), {v},
                   [](const Var<T>& g) { return std::vector<Var<T>>{channel_sum(g)}; });
}

template <class T>
Var<T> spatial_sum(const Var<T>& x) {
  const auto l = channel_layout(x.shape(), "spatial_sum");
  Tensor<T> out({l.batch, l.channels});
  for (std::size_t p = 0; p < static_cast<std::size_t>(l.batch) * l.channels; ++p) {
    T acc = 0;
    const T* src = x.value().data() + p * l.spatial;
    for (std::size_t s = 0; s < l.spatial; ++s) acc += src[s];
    out[p] = acc;
  }
  Shape shape = x.shape();
  return record<T>("spatial_sum", std::move(out), {x},
                   [shape](const Var<T>& g) { return std::vector<Var<T>>{spatial_broadcast(g, shape)}; });
}

template <class T>
Var<T> spatial_broadcast(const Var<T>& v, const Shape& shape) {
  const auto l = channel_layout(shape, "spatial_broadcast");
  if (v.shape() != Shape{l.batch, l.channels}) {
    throw ShapeError("spatial_broadcast: " + to_string(v.shape()) + " onto " + to_string(shape));
  }
  Tensor<T> out(shape);
  for (std::size_t p = 0; p < static_cast<std::size_t>(l.batch) * l.channels; ++p) {
    std::fill(out.data() + p * l.spatial, out.data() + (p + 1) * l.spatial, v.value()[p]);
  }
  return record<T>("spatial_broadcast", std::move(out), {v},
                   [](const Var<T>& g) { return std::vector<Var<T>>{spatial_sum(g)}; });
}

template <class T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  const auto la = channel_layout(a.shape(), "concat_channels");
  const auto lb = channel_layout(b.shape(), "concat_channels");
  Shape sa = a.shape(), sb = b.shape();
  sa[1] = sb[1] = 0;
  if (sa != sb) throw ShapeError("concat_channels: " + to_string(a.shape()) + " with " + to_string(b.shape()));
  Shape shape = a.shape();
  shape[1] = la.channels + lb.channels;
  Tensor<T> out(shape);
  const std::size_t pa = static_cast<std::size_t>(la.channels) * la.spatial;
  const std::size_t pb = static_cast<std::size_t>(lb.channels) * lb.spatial;
  for (int n = 0; n < la.batch; ++n) {
    T* dst = out.data() + static_cast<std::size_t>(n) * (pa + pb);
    std::copy_n(a.value().data() + static_cast<std::size_t>(n) * pa, pa, dst);
    std::copy_n(b.value().data() + static_cast<std::size_t>(n) * pb, pb, dst + pa);
  }
  const int ca = la.channels, cb = lb.channels;
  return record<T>("concat_channels", std::move(out), {a, b}, [ca, cb](const Var<T>& g) {
    return std::vector<Var<T>>{slice_channels(g, 0, ca), slice_channels(g, ca, ca + cb)};
  });
}

template <class T>
Var<T> slice_channels(const Var<T>& x, int begin, int end) {
  const auto l = channel_layout(x.shape(), "slice_channels");
  if (begin < 0 || end > l.channels || begin >= end) throw ShapeError("slice_channels: bad range");
  Shape shape = x.shape();
  shape[1] = end - begin;
  Tensor<T> out(shape);
  const std::size_t width = static_cast<std::size_t>(end - begin) * l.spatial;
  for (int n = 0; n < l.batch; ++n) {
    const T* src = x.value().data() + (static_cast<std::size_t>(n) * l.channels + begin) * l.spatial;
    std::copy_n(src, width, out.data() + static_cast<std::size_t>(n) * width);
  }
  const int total = l.channels;
  return record<T>("slice_channels", std::move(out), {x}, [total, begin](const Var<T>& g) {
    return std::vector<Var<T>>{pad_channels(g, total, begin)};
  });
}

template <class T>
Var<T> pad_channels(const Var<T>& x, int total, int begin) {
  const auto l = channel_layout(x.shape(), "pad_channels");
  if (begin < 0 || begin + l.channels > total) throw ShapeError("pad_channels: bad range");
  Shape shape = x.shape();
  shape[1] = total;
  Tensor<T> out(shape);
  const std::size_t width = static_cast<std::size_t>(l.channels) * l.spatial;
  for (int n = 0; n < l.batch; ++n) {
    T* dst = out.data() + (static_cast<std::size_t>(n) * total + begin) * l.spatial;
    std::copy_n(x.value().data() + static_cast<std::size_t>(n) * width, width, dst);
  }
  const int end = begin + l.channels;
  return record<T>("pad_channels", std::move(out), {x}, [begin, end](const Var<T>& g) {
    return std::vector<Var<T>>{slice_channels(g, begin, end)};
  });
}

// ---------------------------------------------------------------------------
// Volumetric

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, int stride, int pad) {
  const auto g = kernels::Conv3dGeometry::make(x.shape(), w.shape(), stride, pad);
  Tensor<T> out(g.output_shape());
  kernels::parallel::conv3d_forward(g, x.value().data(), w.value().data(), out.data());
  return record<T>("conv3d", std::move(out), {x, w}, [x, w, stride, pad](const Var<T>& gy) {
    return std::vector<Var<T>>{
        x.requires_grad() ? conv3d_backward_data(gy, w, x.shape(), stride, pad) : Var<T>{},
        w.requires_grad() ? conv3d_backward_weight(x, gy, w.shape(), stride, pad) : Var<T>{}};
  });
}

template <class T>
Var<T> conv3d_backward_data(const Var<T>& dy, const Var<T>& w, const Shape& input_shape, int stride, int pad) {
  const auto g = kernels::Conv3dGeometry::make(input_shape, w.shape(), stride, pad);
  require_same(dy.shape(), g.output_shape(), "conv3d_backward_data");
  Tensor<T> out(input_shape);
  kernels::parallel::conv3d_backward_data(g, dy.value().data(), w.value().data(), out.data());
  return record<T>("conv3d_backward_data", std::move(out), {dy, w}, [dy, w, stride, pad](const Var<T>& gx) {
    return std::vector<Var<T>>{dy.requires_grad() ? conv3d(gx, w, stride, pad) : Var<T>{},
                               w.requires_grad() ? conv3d_backward_weight(gx, dy, w.shape(), stride, pad) : Var<T>{}};
  });
}

template <class T>
Var<T> conv3d_backward_weight(const Var<T>& x, const Var<T>& dy, const Shape& weight_shape, int stride, int pad) {
  const auto g = kernels::Conv3dGeometry::make(x.shape(), weight_shape, stride, pad);
  require_same(dy.shape(), g.output_shape(), "conv3d_backward_weight");
  Tensor<T> out(weight_shape);
  kernels::parallel::conv3d_backward_weight(g, x.value().data(), dy.value().data(), out.data());
  return record<T>("conv3d_backward_weight", std::move(out), {x, dy}, [x, dy, stride, pad](const Var<T>& gw) {
    return std::vector<Var<T>>{x.requires_grad() ? conv3d_backward_data(dy, gw, x.shape(), stride, pad) : Var<T>{},
                               dy.requires_grad() ? conv3d(x, gw, stride, pad) : Var<T>{}};
  });
}

template <class T>
Var<T> avgpool3d(const Var<T>& x, int factor) {
  const auto g = kernels::PoolGeometry::make(x.shape(), factor);
  Tensor<T> out(g.coarse_shape());
  kernels::parallel::avgpool3d(g, x.value().data(), out.data());
  const double k = 1.0 / (factor * factor * factor);
  return record<T>("avgpool3d", std::move(out), {x}, [factor, k](const Var<T>& gy) {
    return std::vector<Var<T>>{scale(upsample3d(gy, factor), k)};
  });
}

template <class T>
Var<T> upsample3d(const Var<T>& x, int factor) {
  require_rank(x.shape(), 5, "upsample3d");
  Shape fine = x.shape();
  for (int i = 2; i < 5; ++i) fine[static_cast<std::size_t>(i)] *= factor;
  const auto g = kernels::PoolGeometry::make(fine, factor);
  Tensor<T> out(fine);
  kernels::parallel::upsample3d(g, x.value().data(), out.data());
  const double k = factor * factor * factor;
  return record<T>("upsample3d", std::move(out), {x}, [factor, k](const Var<T>& gy) {
    return std::vector<Var<T>>{scale(avgpool3d(gy, factor), k)};
  });
}

template <class T>
Var<T> diff_axis(const Var<T>& x, int axis) {
  require_rank(x.shape(), 5, "diff_axis");
  if (axis < 2 || axis > 4) throw ShapeError("diff_axis: axis must be spatial");
  const auto l = axis_layout(x.shape(), axis);
  if (l.n < 2) throw ShapeError("diff_axis: extent below 2 along axis");
  Shape shape = x.shape();
  shape[static_cast<std::size_t>(axis)] -= 1;
  Tensor<T> out(shape);
  const T* src = x.value().data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i + 1 < l.n; ++i)
      for (std::size_t k = 0; k < l.inner; ++k)
        out[(o * (l.n - 1) + i) * l.inner + k] = src[(o * l.n + i + 1) * l.inner + k] - src[(o * l.n + i) * l.inner + k];
  return record<T>("diff_axis", std::move(out), {x},
                   [axis](const Var<T>& g) { return std::vector<Var<T>>{diff_axis_adjoint(g, axis)}; });
}

template <class T>
Var<T> diff_axis_adjoint(const Var<T>& g, int axis) {
  require_rank(g.shape(), 5, "diff_axis_adjoint");
  if (axis < 2 || axis > 4) throw ShapeError("diff_axis_adjoint: axis must be spatial");
  const auto l = axis_layout(g.shape(), axis);
  Shape shape = g.shape();
  shape[static_cast<std::size_t>(axis)] += 1;
  const std::size_t n = l.n + 1;
  Tensor<T> out(shape);
  const T* src = g.value().data();
  for (std::size_t o = 0; o < l.outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < l.inner; ++k) {
        T v = 0;
        if (i > 0) v += src[(o * l.n + i - 1) * l.inner + k];
        if (i < l.n) v -= src[(o * l.n + i) * l.inner + k];
        out[(o * n + i) * l.inner + k] = v;
      }
  return record<T>("diff_axis_adjoint", std::move(out), {g},
                   [axis](const Var<T>& gg) { return std::vector<Var<T>>{diff_axis(gg, axis)}; });
}

// ---------------------------------------------------------------------------

#define BSCREEN_AD_INSTANTIATE(T)                                                                  \
  template class Var<T>;                                                                          \
  template std::vector<Var<T>> grad<T>(const Var<T>&, std::span<const Var<T>>, bool);             \
  template Var<T> add<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                           \
  template Var<T> scale<T>(const Var<T>&, double);                                                \
  template Var<T> add_scalar<T>(const Var<T>&, double);                                           \
  template Var<T> pow_scalar<T>(const Var<T>&, double);                                           \
  template Var<T> exp<T>(const Var<T>&);                                                          \
  template Var<T> log<T>(const Var<T>&);                                                          \
  template Var<T> sigmoid<T>(const Var<T>&);                                                      \
  template Var<T> softplus<T>(const Var<T>&);                                                     \
  template Var<T> relu<T>(const Var<T>&);                                                         \
  template Var<T> abs<T>(const Var<T>&);                                                          \
  template Var<T> reshape<T>(const Var<T>&, Shape);                                               \
  template Var<T> sum_all<T>(const Var<T>&);                                                      \
  template Var<T> expand<T>(const Var<T>&, Shape);                                                \
  template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                        \
  template Var<T> transpose<T>(const Var<T>&);                                                    \
  template Var<T> sum_rows<T>(const Var<T>&);                                                     \
  template Var<T> broadcast_rows<T>(const Var<T>&, int);                                          \
  template Var<T> sum_cols<T>(const Var<T>&);                                                     \
  template Var<T> broadcast_cols<T>(const Var<T>&, int);                                          \
  template Var<T> log_softmax_rows<T>(const Var<T>&);                                             \
  template Var<T> channel_sum<T>(const Var<T>&);                                                  \
  template Var<T> channel_broadcast<T>(const Var<T>&, const Shape&);                              \
  template Var<T> spatial_sum<T>(const Var<T>&);                                                  \
  template Var<T> spatial_broadcast<T>(const Var<T>&, const Shape&);                              \
  template Var<T> concat_channels<T>(const Var<T>&, const Var<T>&);                               \
  template Var<T> slice_channels<T>(const Var<T>&, int, int);                                     \
  template Var<T> pad_channels<T>(const Var<T>&, int, int);                                       \
  template Var<T> conv3d<T>(const Var<T>&, const Var<T>&, int, int);                              \
  template Var<T> conv3d_backward_data<T>(const Var<T>&, const Var<T>&, const Shape&, int, int);  \
  template Var<T> conv3d_backward_weight<T>(const Var<T>&, const Var<T>&, const Shape&, int, int); \
  template Var<T> avgpool3d<T>(const Var<T>&, int);                                               \
  template Var<T> upsample3d<T>(const Var<T>&, int);                                              \
  template Var<T> diff_axis<T>(const Var<T>&, int);                                               \
  template Var<T> diff_axis_adjoint<T>(const Var<T>&, int);

BSCREEN_AD_INSTANTIATE(float)
BSCREEN_AD_INSTANTIATE(double)

#undef BSCREEN_AD_INSTANTIATE

}  // namespace bscreen::ad
