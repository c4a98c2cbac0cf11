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

#include "bscreen/optim.hpp"

#include <cmath>

namespace bscreen::optim {

namespace {

template <class T>
void validate(const nn::ParameterMap<T>& params, const nn::ParameterMap<T>& grads, double lr) {
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
  for (const auto& g : grads.entries()) {
    const auto& p = params.at(g.name);
    if (p.shape() != g.value.shape()) {
      throw ShapeError("gradient for '" + g.name + "' has shape " + to_string(g.value.shape()) + ", parameter " +
                       to_string(p.shape()));
    }
    for (T v : g.value.values())
      if (!std::isfinite(v)) throw NonFiniteGradient(g.name);
  }
}

}  // namespace

template <class T>
void sgd_step(nn::ParameterMap<T>& params, const nn::ParameterMap<T>& grads, double lr) {
  validate(params, grads, lr);
  for (const auto& g : grads.entries()) {
    auto& p = params.at(g.name);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<T>(p[i] - lr * g.value[i]);
  }
}

template <class T>
void adam_step(nn::ParameterMap<T>& params, const nn::ParameterMap<T>& grads, AdamState<T>& state,
               const AdamOptions& o) {
  validate(params, grads, o.lr);
  if (state.step == 0 && state.m.size() == 0) {
    state.m = params.zeros_like_trainable();
    state.v = params.zeros_like_trainable();
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (const auto& g : grads.entries()) {
    auto& p = params.at(g.name);
    auto& m = state.m.at(g.name);
    auto& v = state.v.at(g.name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g.value[i];
      const double mi = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
      const double vi = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - o.lr * (mi / c1) / (std::sqrt(vi / c2) + o.eps));
    }
  }
}

template void sgd_step<float>(nn::ParameterMap<float>&, const nn::ParameterMap<float>&, double);
template void sgd_step<double>(nn::ParameterMap<double>&, const nn::ParameterMap<double>&, double);
template void adam_step<float>(nn::ParameterMap<float>&, const nn::ParameterMap<float>&, AdamState<float>&,
                               const AdamOptions&);
template void adam_step<double>(nn::ParameterMap<double>&, const nn::ParameterMap<double>&, AdamState<double>&,
                                const AdamOptions&);

}  // namespace bscreen::optim
