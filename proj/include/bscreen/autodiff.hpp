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

#pragma once

// Tape-free reverse-mode differentiation. Every operation records its inputs
// and a backward rule written in terms of other recorded operations, so the
// gradient of a gradient is available by differentiating with
// `create_graph = true` (needed for second-order meta-gradients).

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "bscreen/tensor.hpp"

namespace bscreen::ad {

template <class T>
class Var;

template <class T>
struct Node {
  Tensor<T> value;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Var<T>> inputs;
  // Maps the gradient of this node to one gradient per input (undefined Var = none).
  std::function<std::vector<Var<T>>(const Var<T>&)> backward;
};

/// Handle to a value in the computation graph. Copies share the node.
template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Scalar value of a single-element Var.
  T item() const;

  Node<T>* node() const { return node_.get(); }
  static Var from_node(std::shared_ptr<Node<T>> node) {
    Var v;
    v.node_ = std::move(node);
    return v;
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set(bool enabled);

  class Guard {
   public:
    explicit Guard(bool enabled) : previous_(GradMode::enabled()) { GradMode::set(enabled); }
    ~Guard() { GradMode::set(previous_); }
    Guard(const Guard&) = delete;
    Guard& operator=(const Guard&) = delete;

   private:
    bool previous_;
  };
};

/// Records the sign pattern of every piecewise-linear op (relu, abs) while
/// active. Finite-difference checks compare signatures to detect kink crossings.
class KinkProbe {
 public:
  static void start();
  static std::uint64_t stop();
  static bool active();
  static void absorb(std::uint64_t bits);
};

/// Gradients of a scalar `output` with respect to `wrt`. Inputs the output does
/// not depend on receive zero tensors. With create_graph the returned Vars are
/// themselves differentiable.
template <class T>
std::vector<Var<T>> grad(const Var<T>& output, std::span<const Var<T>> wrt, bool create_graph = false);

template <class T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

// ---------------------------------------------------------------------------
// Operations. All shapes are checked; mismatches throw ShapeError.

template <class T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> scale(const Var<T>& a, double c);
template <class T> Var<T> add_scalar(const Var<T>& a, double c);
template <class T> Var<T> pow_scalar(const Var<T>& a, double p);
template <class T> Var<T> exp(const Var<T>& a);
template <class T> Var<T> log(const Var<T>& a);
template <class T> Var<T> sigmoid(const Var<T>& a);
template <class T> Var<T> softplus(const Var<T>& a);
template <class T> Var<T> relu(const Var<T>& a);
template <class T> Var<T> abs(const Var<T>& a);
template <class T> Var<T> reshape(const Var<T>& a, Shape shape);

/// Sum of every element, shape {1}.
template <class T> Var<T> sum_all(const Var<T>& a);
/// Broadcasts a single-element Var to `shape`.
template <class T> Var<T> expand(const Var<T>& a, Shape shape);

// 2-D helpers on [rows, cols].
template <class T> Var<T> matmul(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> transpose(const Var<T>& a);
/// Column sums: [rows, cols] -> [cols].
template <class T> Var<T> sum_rows(const Var<T>& a);
/// [cols] -> [rows, cols].
template <class T> Var<T> broadcast_rows(const Var<T>& v, int rows);
/// Row sums: [rows, cols] -> [rows].
template <class T> Var<T> sum_cols(const Var<T>& a);
/// [rows] -> [rows, cols].
template <class T> Var<T> broadcast_cols(const Var<T>& v, int cols);
template <class T> Var<T> log_softmax_rows(const Var<T>& a);

// Channel-structured ops on [N, C, ...spatial].
/// Sum over batch and spatial positions: -> [C].
template <class T> Var<T> channel_sum(const Var<T>& x);
/// [C] -> `shape` (= [N, C, ...]).
template <class T> Var<T> channel_broadcast(const Var<T>& v, const Shape& shape);
/// Sum over spatial positions: -> [N, C].
template <class T> Var<T> spatial_sum(const Var<T>& x);
/// [N, C] -> `shape` (= [N, C, ...]).
template <class T> Var<T> spatial_broadcast(const Var<T>& v, const Shape& shape);
template <class T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);
template <class T> Var<T> slice_channels(const Var<T>& x, int begin, int end);
/// Zero-pads channels so `x` lands at [begin, begin + C) of `total` channels.
template <class T> Var<T> pad_channels(const Var<T>& x, int total, int begin);

// Volumetric ops on [N, C, D, H, W].
template <class T> Var<T> conv3d(const Var<T>& x, const Var<T>& w, int stride, int pad);
template <class T>
Var<T> conv3d_backward_data(const Var<T>& dy, const Var<T>& w, const Shape& input_shape, int stride, int pad);
template <class T>
Var<T> conv3d_backward_weight(const Var<T>& x, const Var<T>& dy, const Shape& weight_shape, int stride, int pad);
template <class T> Var<T> avgpool3d(const Var<T>& x, int factor);
template <class T> Var<T> upsample3d(const Var<T>& x, int factor);
/// Forward difference along spatial axis 2, 3 or 4 (extent shrinks by one).
template <class T> Var<T> diff_axis(const Var<T>& x, int axis);
/// Adjoint of diff_axis (extent grows by one).
template <class T> Var<T> diff_axis_adjoint(const Var<T>& g, int axis);

}  // namespace bscreen::ad
