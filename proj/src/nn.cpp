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

#include "bscreen/nn.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "bscreen/rng.hpp"

namespace bscreen::nn {

namespace {

constexpr double kBnEps = 1e-5;

struct KindName {
  LayerKind kind;
  std::string_view name;
};
constexpr KindName kKindNames[] = {
    {LayerKind::Conv, "conv"},
    {LayerKind::BatchNorm, "batchnorm"},
    {LayerKind::ReLU, "relu"},
    {LayerKind::Sigmoid, "sigmoid"},
    {LayerKind::AvgPool, "avgpool"},
    {LayerKind::Upsample, "upsample"},
    {LayerKind::Residual, "residual"},
    {LayerKind::Dense, "dense"},
    {LayerKind::Transition, "transition"},
    {LayerKind::GlobalAvgPool, "gap"},
    {LayerKind::Flatten, "flatten"},
    {LayerKind::Linear, "linear"},
    {LayerKind::Tap, "tap"},
    {LayerKind::Concat, "concat"},
};

LayerKind kind_from_string(std::string_view name) {
  for (const auto& k : kKindNames)
    if (k.name == name) return k.kind;
  throw std::invalid_argument("unknown layer kind '" + std::string(name) + "'");
}

std::string prefix(int layer) { return "L" + std::to_string(layer); }

int transition_width(int channels, double compression) {
  return std::max(1, static_cast<int>(std::floor(channels * compression)));
}

int conv_extent(int in, int k, int stride) { return (in + 2 * (k / 2) - k) / stride + 1; }

}  // namespace

std::string_view to_string(LayerKind kind) {
  for (const auto& k : kKindNames)
    if (k.kind == kind) return k.name;
  return "?";
}

LayerDesc conv(int channels, int kernel, int stride) {
  LayerDesc d{LayerKind::Conv};
  d.channels = channels;
  d.kernel = kernel;
  d.stride = stride;
  return d;
}
LayerDesc batch_norm() { return {LayerKind::BatchNorm}; }
LayerDesc relu() { return {LayerKind::ReLU}; }
LayerDesc sigmoid() { return {LayerKind::Sigmoid}; }
LayerDesc avg_pool(int factor) {
  LayerDesc d{LayerKind::AvgPool};
  d.factor = factor;
  return d;
}
LayerDesc upsample(int factor) {
  LayerDesc d{LayerKind::Upsample};
  d.factor = factor;
  return d;
}
LayerDesc residual(int channels) {
  LayerDesc d{LayerKind::Residual};
  d.channels = channels;
  return d;
}
LayerDesc dense_block(int layers, int growth) {
  LayerDesc d{LayerKind::Dense};
  d.layers = layers;
  d.channels = growth;
  return d;
}
LayerDesc transition(double compression) {
  LayerDesc d{LayerKind::Transition};
  d.compression = compression;
  return d;
}
LayerDesc global_avg_pool() { return {LayerKind::GlobalAvgPool}; }
LayerDesc flatten() { return {LayerKind::Flatten}; }
LayerDesc linear(int out) {
  LayerDesc d{LayerKind::Linear};
  d.channels = out;
  return d;
}
LayerDesc tap() { return {LayerKind::Tap}; }
LayerDesc concat(int skip_index) {
  LayerDesc d{LayerKind::Concat};
  d.tap = skip_index;
  return d;
}

// ---------------------------------------------------------------------------
// Serialization

std::string NetworkSpec::serialize() const {
  std::ostringstream os;
  auto shape_line = [&os](const char* tag, const Shape& s) {
    os << tag << ' ' << s.size();
    for (int e : s) os << ' ' << e;
    os << '\n';
  };
  os << "netspec 1\n";
  shape_line("input", input);
  for (const auto& s : skip_inputs) shape_line("skip", s);
  for (const auto& l : layers) {
    char comp[40];
    std::snprintf(comp, sizeof comp, "%.17g", l.compression);
    os << "layer " << to_string(l.kind) << " channels=" << l.channels << " kernel=" << l.kernel
       << " stride=" << l.stride << " layers=" << l.layers << " compression=" << comp << " factor=" << l.factor
       << " tap=" << l.tap << '\n';
  }
  os << "end\n";
  return os.str();
}

NetworkSpec NetworkSpec::parse(std::string_view text) {
  std::istringstream is{std::string(text)};
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "netspec" || version != 1) {
    throw std::invalid_argument("not a netspec v1 document");
  }
  auto read_shape = [&is]() {
    std::size_t rank = 0;
    is >> rank;
    Shape s(rank);
    for (auto& e : s) is >> e;
    if (!is) throw std::invalid_argument("truncated shape in netspec");
    return s;
  };
  NetworkSpec spec;
  while (is >> tag) {
    if (tag == "end") return spec;
    if (tag == "input") {
      spec.input = read_shape();
    } else if (tag == "skip") {
      spec.skip_inputs.push_back(read_shape());
    } else if (tag == "layer") {
      std::string kind;
      is >> kind;
      LayerDesc d{kind_from_string(kind)};
      for (int field = 0; field < 7; ++field) {
        std::string kv;
        is >> kv;
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw std::invalid_argument("malformed layer field '" + kv + "'");
        const std::string key = kv.substr(0, eq), value = kv.substr(eq + 1);
        if (key == "channels") d.channels = std::stoi(value);
        else if (key == "kernel") d.kernel = std::stoi(value);
        else if (key == "stride") d.stride = std::stoi(value);
        else if (key == "layers") d.layers = std::stoi(value);
        else if (key == "compression") d.compression = std::strtod(value.c_str(), nullptr);
        else if (key == "factor") d.factor = std::stoi(value);
        else if (key == "tap") d.tap = std::stoi(value);
        else throw std::invalid_argument("unknown layer field '" + key + "'");
      }
      spec.layers.push_back(d);
    } else {
      throw std::invalid_argument("unexpected netspec token '" + tag + "'");
    }
  }
  throw std::invalid_argument("netspec missing 'end'");
}

// ---------------------------------------------------------------------------
// Shape inference

std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
  std::vector<Shape> shapes;
  Shape cur = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const int idx = static_cast<int>(i);
    auto need_volume = [&]() {
      if (cur.size() != 4) throw LayerError(idx, std::string(to_string(l.kind)) + " needs [C,D,H,W], got " + bscreen::to_string(cur));
    };
    switch (l.kind) {
      case LayerKind::Conv: {
        need_volume();
        Shape next{l.channels, conv_extent(cur[1], l.kernel, l.stride), conv_extent(cur[2], l.kernel, l.stride),
                   conv_extent(cur[3], l.kernel, l.stride)};
        if (l.channels < 1 || next[1] < 1 || next[2] < 1 || next[3] < 1)
          throw LayerError(idx, "conv produces empty output from " + bscreen::to_string(cur));
        cur = next;
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::ReLU:
      case LayerKind::Sigmoid:
      case LayerKind::Tap:
        break;
      case LayerKind::AvgPool:
        need_volume();
        for (int a = 1; a < 4; ++a)
          if (cur[static_cast<std::size_t>(a)] % l.factor)
            throw LayerError(idx, "avgpool factor " + std::to_string(l.factor) + " does not divide " + bscreen::to_string(cur));
        cur = {cur[0], cur[1] / l.factor, cur[2] / l.factor, cur[3] / l.factor};
        break;
      case LayerKind::Upsample:
        need_volume();
        cur = {cur[0], cur[1] * l.factor, cur[2] * l.factor, cur[3] * l.factor};
        break;
      case LayerKind::Residual:
        need_volume();
        if (cur[0] != l.channels)
          throw LayerError(idx, "residual block of width " + std::to_string(l.channels) + " on " + bscreen::to_string(cur));
        break;
      case LayerKind::Dense:
        need_volume();
        cur[0] += l.layers * l.channels;
        break;
      case LayerKind::Transition:
        need_volume();
        cur[0] = transition_width(cur[0], l.compression);
        break;
      case LayerKind::GlobalAvgPool:
        need_volume();
        cur = {cur[0]};
        break;
      case LayerKind::Flatten:
        cur = {static_cast<int>(numel(cur))};
        break;
      case LayerKind::Linear:
        if (cur.size() != 1) throw LayerError(idx, "linear needs a flat input, got " + bscreen::to_string(cur));
        cur = {l.channels};
        break;
      case LayerKind::Concat: {
        need_volume();
        if (l.tap < 0 || l.tap >= static_cast<int>(spec.skip_inputs.size()))
          throw LayerError(idx, "concat refers to missing skip input " + std::to_string(l.tap));
        const Shape& s = spec.skip_inputs[static_cast<std::size_t>(l.tap)];
        if (s.size() != 4 || s[1] != cur[1] || s[2] != cur[2] || s[3] != cur[3])
          throw LayerError(idx, "skip " + bscreen::to_string(s) + " does not align with " + bscreen::to_string(cur));
        cur[0] += s[0];
        break;
      }
    }
    shapes.push_back(cur);
  }
  return shapes;
}

Shape output_shape(const NetworkSpec& spec) {
  auto shapes = infer_shapes(spec);
  return shapes.empty() ? spec.input : shapes.back();
}

Shape penultimate_shape(const NetworkSpec& spec) {
  auto shapes = infer_shapes(spec);
  return shapes.size() < 2 ? spec.input : shapes[shapes.size() - 2];
}

// ---------------------------------------------------------------------------
// ParameterMap

template <class T>
void ParameterMap<T>::add(std::string name, Tensor<T> value, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({std::move(name), std::move(value), trainable});
}

template <class T>
bool ParameterMap<T>::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

template <class T>
Tensor<T>& ParameterMap<T>::at(std::string_view name) {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter '" + std::string(name) + "'");
  return entries_[it->second].value;
}

template <class T>
const Tensor<T>& ParameterMap<T>::at(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw std::out_of_range("no parameter '" + std::string(name) + "'");
  return entries_[it->second].value;
}

template <class T>
std::size_t ParameterMap<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.trainable;
  return n;
}

template <class T>
ParameterMap<T> ParameterMap<T>::zeros_like_trainable() const {
  ParameterMap out;
  for (const auto& e : entries_)
    if (e.trainable) out.add(e.name, Tensor<T>(e.value.shape()), true);
  return out;
}

template class ParameterMap<float>;
template class ParameterMap<double>;

template <class T>
const ad::Var<T>& ParamVars<T>::at(std::string_view name) const {
  auto it = index.find(std::string(name));
  if (it == index.end()) throw std::out_of_range("no parameter '" + std::string(name) + "'");
  return vars[it->second];
}

template <class T>
std::vector<ad::Var<T>> ParamVars<T>::trainable_vars() const {
  std::vector<ad::Var<T>> out;
  for (std::size_t i = 0; i < vars.size(); ++i)
    if (trainable[i]) out.push_back(vars[i]);
  return out;
}

template <class T>
ParamVars<T> ParamVars<T>::with_trainable(const std::vector<ad::Var<T>>& replacement) const {
  ParamVars out = *this;
  std::size_t k = 0;
  for (std::size_t i = 0; i < vars.size(); ++i)
    if (trainable[i]) {
      if (k >= replacement.size()) throw std::invalid_argument("with_trainable: too few replacements");
      out.vars[i] = replacement[k++];
    }
  if (k != replacement.size()) throw std::invalid_argument("with_trainable: too many replacements");
  return out;
}

template <class T>
ParamVars<T> make_vars(const ParameterMap<T>& params, bool requires_grad) {
  ParamVars<T> out;
  for (const auto& e : params.entries()) {
    out.index.emplace(e.name, out.vars.size());
    out.names.push_back(e.name);
    out.vars.emplace_back(e.value, requires_grad && e.trainable);
    out.trainable.push_back(e.trainable);
  }
  return out;
}

template <class T>
ParameterMap<T> to_parameter_map(const ParamVars<T>& like, const std::vector<ad::Var<T>>& trainable_values) {
  ParameterMap<T> out;
  std::size_t k = 0;
  for (std::size_t i = 0; i < like.vars.size(); ++i)
    if (like.trainable[i]) out.add(like.names[i], trainable_values.at(k++).value(), true);
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

void add_conv(ParameterSet& p, Rng& rng, const std::string& name, int out, int in, int k, bool bias) {
  const double bound = std::sqrt(6.0 / (static_cast<double>(in) * k * k * k));
  Tensor<float> w({out, in, k, k, k});
  for (auto& v : w.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  p.add(name + ".w", std::move(w));
  if (bias) p.add(name + ".b", Tensor<float>({out}));
}

void add_bn(ParameterSet& p, const std::string& name, int channels) {
  p.add(name + ".gamma", Tensor<float>({channels}, 1.0f));
  p.add(name + ".beta", Tensor<float>({channels}));
  p.add(name + ".running_mean", Tensor<float>({channels}), false);
  p.add(name + ".running_var", Tensor<float>({channels}, 1.0f), false);
}

}  // namespace

ParameterSet init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
  const auto shapes = infer_shapes(spec);
  Rng rng(seed);
  ParameterSet p;
  Shape cur = spec.input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string name = prefix(static_cast<int>(i));
    switch (l.kind) {
      case LayerKind::Conv:
        add_conv(p, rng, name, l.channels, cur[0], l.kernel, true);
        break;
      case LayerKind::BatchNorm:
        add_bn(p, name, cur[0]);
        break;
      case LayerKind::Residual:
        add_conv(p, rng, name + ".conv1", l.channels, l.channels, 3, true);
        add_bn(p, name + ".bn1", l.channels);
        add_conv(p, rng, name + ".conv2", l.channels, l.channels, 3, true);
        add_bn(p, name + ".bn2", l.channels);
        break;
      case LayerKind::Dense: {
        int c = cur[0];
        for (int j = 0; j < l.layers; ++j) {
          const std::string sub = name + ".d" + std::to_string(j);
          add_bn(p, sub + ".bn", c);
          add_conv(p, rng, sub + ".conv", l.channels, c, 3, false);
          c += l.channels;
        }
        break;
      }
      case LayerKind::Transition:
        add_bn(p, name + ".bn", cur[0]);
        add_conv(p, rng, name + ".conv", transition_width(cur[0], l.compression), cur[0], 1, false);
        break;
      case LayerKind::Linear: {
        const double bound = std::sqrt(6.0 / cur[0]);
        Tensor<float> w({cur[0], l.channels});
        for (auto& v : w.values()) v = static_cast<float>(rng.uniform(-bound, bound));
        p.add(name + ".w", std::move(w));
        p.add(name + ".b", Tensor<float>({l.channels}));
        break;
      }
      default:
        break;
    }
    cur = shapes[i];
  }
  return p;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

template <class T>
ad::Var<T> apply_bn(const ad::Var<T>& x, const std::string& name, const ParamVars<T>& P,
                    const ForwardContext<T>& ctx) {
  using namespace ad;
  const Shape& shape = x.shape();
  const Var<T>& gamma = P.at(name + ".gamma");
  const Var<T>& beta = P.at(name + ".beta");
  const double count = static_cast<double>(x.size()) / shape[1];
  if (ctx.train) {
    Var<T> mean = scale(channel_sum(x), 1.0 / count);
    Var<T> xc = sub(x, channel_broadcast(mean, shape));
    Var<T> var = scale(channel_sum(mul(xc, xc)), 1.0 / count);
    if (ctx.running_stats) {
      auto& rm = ctx.running_stats->at(name + ".running_mean");
      auto& rv = ctx.running_stats->at(name + ".running_var");
      const T m = static_cast<T>(ctx.bn_momentum);
      for (std::size_t c = 0; c < rm.size(); ++c) {
        rm[c] = m * rm[c] + (T{1} - m) * mean.value()[c];
        rv[c] = m * rv[c] + (T{1} - m) * var.value()[c];
      }
    }
    Var<T> inv = pow_scalar(add_scalar(var, kBnEps), -0.5);
    return add(mul(xc, channel_broadcast(mul(inv, gamma), shape)), channel_broadcast(beta, shape));
  }
  const Tensor<T>& rm = P.at(name + ".running_mean").value();
  const Tensor<T>& rv = P.at(name + ".running_var").value();
  Tensor<T> inv(rv.shape()), mean = rm;
  for (std::size_t c = 0; c < rv.size(); ++c) inv[c] = static_cast<T>(1.0 / std::sqrt(rv[c] + kBnEps));
  Var<T> s = mul(gamma, constant(inv));
  Var<T> shift = sub(beta, mul(s, constant(mean)));
  return add(mul(x, channel_broadcast(s, shape)), channel_broadcast(shift, shape));
}

template <class T>
ad::Var<T> apply_conv(const ad::Var<T>& x, const std::string& name, const ParamVars<T>& P, int stride, bool bias) {
  const ad::Var<T>& w = P.at(name + ".w");
  const int k = w.shape()[2];
  ad::Var<T> y = ad::conv3d(x, w, stride, k / 2);
  if (bias) y = ad::add(y, ad::channel_broadcast(P.at(name + ".b"), y.shape()));
  return y;
}

template <class T>
ad::Var<T> apply_layer(const LayerDesc& l, int index, const ad::Var<T>& x, const ParamVars<T>& P,
                       const ForwardContext<T>& ctx) {
  using namespace ad;
  const std::string name = prefix(index);
  switch (l.kind) {
    case LayerKind::Conv:
      return apply_conv(x, name, P, l.stride, true);
    case LayerKind::BatchNorm:
      return apply_bn(x, name, P, ctx);
    case LayerKind::ReLU:
      return relu(x);
    case LayerKind::Sigmoid:
      return sigmoid(x);
    case LayerKind::AvgPool:
      return avgpool3d(x, l.factor);
    case LayerKind::Upsample:
      return upsample3d(x, l.factor);
    case LayerKind::Residual: {
      Var<T> h = relu(apply_bn(apply_conv(x, name + ".conv1", P, 1, true), name + ".bn1", P, ctx));
      h = apply_bn(apply_conv(h, name + ".conv2", P, 1, true), name + ".bn2", P, ctx);
      return relu(add(h, x));
    }
    case LayerKind::Dense: {
      Var<T> cur = x;
      for (int j = 0; j < l.layers; ++j) {
        const std::string sub = name + ".d" + std::to_string(j);
        Var<T> h = apply_conv(relu(apply_bn(cur, sub + ".bn", P, ctx)), sub + ".conv", P, 1, false);
        cur = concat_channels(cur, h);
      }
      return cur;
    }
    case LayerKind::Transition:
      return apply_conv(relu(apply_bn(x, name + ".bn", P, ctx)), name + ".conv", P, 1, false);
    case LayerKind::GlobalAvgPool: {
      const double spatial = static_cast<double>(x.size()) / (x.shape()[0] * x.shape()[1]);
      return scale(spatial_sum(x), 1.0 / spatial);
    }
    case LayerKind::Flatten:
      return reshape(x, Shape{x.shape()[0], static_cast<int>(x.size() / x.shape()[0])});
    case LayerKind::Linear: {
      Var<T> y = matmul(x, P.at(name + ".w"));
      return add(y, broadcast_rows(P.at(name + ".b"), x.shape()[0]));
    }
    case LayerKind::Tap:
      return x;
    case LayerKind::Concat:
      if (l.tap < 0 || l.tap >= static_cast<int>(ctx.skips.size()))
        throw std::invalid_argument("skip input " + std::to_string(l.tap) + " not supplied");
      return concat_channels(x, ctx.skips[static_cast<std::size_t>(l.tap)]);
  }
  throw std::logic_error("unhandled layer kind");
}

}  // namespace

template <class T>
ForwardResult<T> forward(const NetworkSpec& spec, const ParamVars<T>& params, const ad::Var<T>& input,
                         const ForwardContext<T>& ctx) {
  const Shape& in = input.shape();
  if (in.size() != spec.input.size() + 1 || !std::equal(spec.input.begin(), spec.input.end(), in.begin() + 1)) {
    throw LayerError(-1, "input " + bscreen::to_string(in) + " does not match declared " +
                             bscreen::to_string(spec.input));
  }
  ForwardResult<T> result;
  ad::Var<T> cur = input;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (i + 1 == spec.layers.size()) result.penultimate = cur;
    try {
      cur = apply_layer(spec.layers[i], static_cast<int>(i), cur, params, ctx);
    } catch (const LayerError&) {
      throw;
    } catch (const ShapeError& e) {
      throw LayerError(static_cast<int>(i), e.what());
    }
    if (spec.layers[i].kind == LayerKind::Tap) result.taps.push_back(cur);
  }
  if (spec.layers.empty()) result.penultimate = cur;
  result.output = cur;
  return result;
}

template <class T>
ad::Var<T> cross_entropy(const ad::Var<T>& logits, std::span<const int> labels) {
  if (logits.shape().size() != 2 || static_cast<std::size_t>(logits.shape()[0]) != labels.size()) {
    throw ShapeError("cross_entropy: logits " + bscreen::to_string(logits.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const int n = logits.shape()[0], k = logits.shape()[1];
  Tensor<T> onehot(logits.shape());
  for (int i = 0; i < n; ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k) throw std::invalid_argument("cross_entropy: label out of range");
    onehot[static_cast<std::size_t>(i) * k + y] = T{1};
  }
  return ad::scale(ad::sum_all(ad::mul(ad::log_softmax_rows(logits), ad::constant(std::move(onehot)))), -1.0 / n);
}

Tensor<float> infer(const NetworkSpec& spec, const ParameterSet& params, const Tensor<float>& input) {
  return infer_with_penultimate(spec, params, input).first;
}

std::pair<Tensor<float>, Tensor<float>> infer_with_penultimate(const NetworkSpec& spec, const ParameterSet& params,
                                                               const Tensor<float>& input) {
  ad::GradMode::Guard off(false);
  ForwardContext<float> ctx;
  auto r = forward(spec, make_vars(params, false), ad::constant(input), ctx);
  return {r.output.value(), r.penultimate.value()};
}

std::vector<float> class_probability(const Tensor<float>& logits, int cls) {
  const int n = logits.dim(0), k = logits.dim(1);
  std::vector<float> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const float* row = logits.data() + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max<double>(mx, row[j]);
    double s = 0;
    for (int j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    out[static_cast<std::size_t>(i)] = static_cast<float>(std::exp(row[cls] - mx) / s);
  }
  return out;
}

// ---------------------------------------------------------------------------

Model::Model(NetworkSpec spec, ParameterSet params) : spec_(std::move(spec)), params_(std::move(params)) {
  infer_shapes(spec_);
}

Tensor<float> Model::forward(const Tensor<float>& input) {
  ad::GradMode::Guard guard(true);
  vars_ = make_vars(params_, true);
  ForwardContext<float> ctx;
  ctx.train = params_.training;
  ctx.running_stats = &params_;
  output_ = nn::forward(spec_, vars_, ad::constant(input), ctx).output;
  return output_.value();
}

ParameterSet Model::backward(const LossHead& loss_head) {
  if (!output_.defined()) throw std::logic_error("backward() requires a recorded forward pass");
  ad::GradMode::Guard guard(true);
  const ad::Var<float> loss = loss_head(output_);
  const auto leaves = vars_.trainable_vars();
  auto grads = ad::grad<float>(loss, leaves, false);
  output_ = {};
  return to_parameter_map(vars_, grads);
}

#define BSCREEN_NN_INSTANTIATE(T)                                                                          \
  template struct ParamVars<T>;                                                                           \
  template ParamVars<T> make_vars<T>(const ParameterMap<T>&, bool);                                       \
  template ParameterMap<T> to_parameter_map<T>(const ParamVars<T>&, const std::vector<ad::Var<T>>&);      \
  template ForwardResult<T> forward<T>(const NetworkSpec&, const ParamVars<T>&, const ad::Var<T>&,       \
                                       const ForwardContext<T>&);                                        \
  template ad::Var<T> cross_entropy<T>(const ad::Var<T>&, std::span<const int>);

BSCREEN_NN_INSTANTIATE(float)
BSCREEN_NN_INSTANTIATE(double)

#undef BSCREEN_NN_INSTANTIATE

}  // namespace bscreen::nn
