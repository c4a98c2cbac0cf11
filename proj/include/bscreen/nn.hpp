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

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bscreen/autodiff.hpp"
#include "bscreen/tensor.hpp"

namespace bscreen::nn {

enum class LayerKind {
  Conv,           // 3-D convolution with bias
  BatchNorm,
  ReLU,
  Sigmoid,
  AvgPool,        // non-overlapping average pooling by `factor`
  Upsample,       // nearest-neighbour resize by `factor`
  Residual,       // conv-bn-relu-conv-bn + identity, relu
  Dense,          // `layers` x (bn-relu-conv3) with concatenation, `channels` = growth
  Transition,     // bn-relu-conv1, output floor(C * compression) channels
  GlobalAvgPool,  // [N,C,...] -> [N,C]
  Flatten,
  Linear,
  Tap,            // identity; records the activation as a skip source
  Concat,         // concatenates external skip input `tap` along channels
};

std::string_view to_string(LayerKind kind);

struct LayerDesc {
  LayerKind kind = LayerKind::ReLU;
  int channels = 0;
  int kernel = 3;
  int stride = 1;
  int layers = 0;
  double compression = 0.5;
  int factor = 2;
  int tap = -1;

  bool operator==(const LayerDesc&) const = default;
};

LayerDesc conv(int channels, int kernel = 3, int stride = 1);
LayerDesc batch_norm();
LayerDesc relu();
LayerDesc sigmoid();
LayerDesc avg_pool(int factor = 2);
LayerDesc upsample(int factor = 2);
LayerDesc residual(int channels);
LayerDesc dense_block(int layers, int growth);
LayerDesc transition(double compression);
LayerDesc global_avg_pool();
LayerDesc flatten();
LayerDesc linear(int out);
LayerDesc tap();
LayerDesc concat(int skip_index);

/// Ordered layer list with declared per-sample input shape (no batch axis).
struct NetworkSpec {
  Shape input;
  std::vector<Shape> skip_inputs;  // per-sample shapes of external skip inputs
  std::vector<LayerDesc> layers;

  std::string serialize() const;
  static NetworkSpec parse(std::string_view text);
  bool operator==(const NetworkSpec&) const = default;
};

class LayerError : public ShapeError {
 public:
  LayerError(int layer, const std::string& what)
      : ShapeError("layer " + std::to_string(layer) + ": " + what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

/// Per-layer output shapes (no batch axis). Throws LayerError naming the first
/// incompatible layer.
std::vector<Shape> infer_shapes(const NetworkSpec& spec);
Shape output_shape(const NetworkSpec& spec);
/// Shape of the activation feeding the last layer.
Shape penultimate_shape(const NetworkSpec& spec);

/// Named arrays: trainable weights plus non-trainable buffers (normalization
/// running statistics). Names are unique; insertion order is preserved.
template <class T>
class ParameterMap {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool trainable = true;
    bool operator==(const Entry&) const = default;
  };

  void add(std::string name, Tensor<T> value, bool trainable = true);
  bool contains(std::string_view name) const;
  Tensor<T>& at(std::string_view name);
  const Tensor<T>& at(std::string_view name) const;
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::size_t trainable_count() const;

  /// Trainable entries only, zero-filled.
  ParameterMap zeros_like_trainable() const;

  template <class U>
  ParameterMap<U> cast() const {
    ParameterMap<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.trainable);
    out.training = training;
    return out;
  }

  bool operator==(const ParameterMap& other) const {
    return entries_ == other.entries_ && training == other.training;
  }

  bool training = false;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

using ParameterSet = ParameterMap<float>;

extern template class ParameterMap<float>;
extern template class ParameterMap<double>;

/// Parameters as graph leaves. Buffers become constants.
template <class T>
struct ParamVars {
  std::vector<std::string> names;
  std::vector<ad::Var<T>> vars;
  std::vector<bool> trainable;
  std::unordered_map<std::string, std::size_t> index;

  const ad::Var<T>& at(std::string_view name) const;
  /// The trainable leaves, in entry order.
  std::vector<ad::Var<T>> trainable_vars() const;
  /// Copy with the trainable leaves replaced (same order as trainable_vars()).
  ParamVars with_trainable(const std::vector<ad::Var<T>>& replacement) const;
};

template <class T>
ParamVars<T> make_vars(const ParameterMap<T>& params, bool requires_grad);

/// Packs gradients (ordered as trainable_vars()) back into a named map.
template <class T>
ParameterMap<T> to_parameter_map(const ParamVars<T>& like, const std::vector<ad::Var<T>>& trainable_values);

ParameterSet init_parameters(const NetworkSpec& spec, std::uint64_t seed);

template <class T>
struct ForwardContext {
  bool train = false;
  /// Receives normalization running-statistic updates in train mode.
  ParameterMap<T>* running_stats = nullptr;
  double bn_momentum = 0.9;
  std::vector<ad::Var<T>> skips;
};

template <class T>
struct ForwardResult {
  ad::Var<T> output;
  ad::Var<T> penultimate;
  std::vector<ad::Var<T>> taps;
};

/// Runs `input` ([N, ...spec.input]) through the network.
template <class T>
ForwardResult<T> forward(const NetworkSpec& spec, const ParamVars<T>& params, const ad::Var<T>& input,
                         const ForwardContext<T>& ctx);

/// Mean softmax cross-entropy of [N, K] logits against integer labels.
template <class T>
ad::Var<T> cross_entropy(const ad::Var<T>& logits, std::span<const int> labels);

/// Eval-mode forward without graph recording.
Tensor<float> infer(const NetworkSpec& spec, const ParameterSet& params, const Tensor<float>& input);
/// Same, also returning the penultimate activation.
std::pair<Tensor<float>, Tensor<float>> infer_with_penultimate(const NetworkSpec& spec, const ParameterSet& params,
                                                               const Tensor<float>& input);

/// Softmax probability of class `cls` for each row of [N, K] logits.
std::vector<float> class_probability(const Tensor<float>& logits, int cls);

/// Binds a spec to its parameters. forward() records the graph that
/// backward() differentiates.
class Model {
 public:
  using LossHead = std::function<ad::Var<float>(const ad::Var<float>&)>;

  Model() = default;
  Model(NetworkSpec spec, ParameterSet params);

  Tensor<float> forward(const Tensor<float>& input);
  /// Gradients of loss_head(last output) for every trainable parameter.
  ParameterSet backward(const LossHead& loss_head);

  const NetworkSpec& spec() const { return spec_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  void set_training(bool training) { params_.training = training; }

 private:
  NetworkSpec spec_;
  ParameterSet params_;
  ParamVars<float> vars_;
  ad::Var<float> output_;
};

}  // namespace bscreen::nn
