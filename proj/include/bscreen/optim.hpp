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

#include <stdexcept>
#include <string>

#include "bscreen/nn.hpp"

namespace bscreen::optim {

/// Raised before any parameter is touched when a gradient holds NaN or Inf.
class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& name)
      : std::runtime_error("non-finite gradient for '" + name + "'"), name_(name) {}
  const std::string& parameter() const { return name_; }

 private:
  std::string name_;
};

/// `grads` holds one entry per trainable parameter, matched by name.
template <class T>
void sgd_step(nn::ParameterMap<T>& params, const nn::ParameterMap<T>& grads, double lr);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamState {
  nn::ParameterMap<T> m, v;
  long step = 0;
};

template <class T>
void adam_step(nn::ParameterMap<T>& params, const nn::ParameterMap<T>& grads, AdamState<T>& state,
               const AdamOptions& options);

}  // namespace bscreen::optim
