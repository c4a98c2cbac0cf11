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

#include "bscreen/tensor.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <sstream>

namespace bscreen {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e < 0) throw ShapeError("negative extent in shape " + to_string(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <class T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)), values_(numel(shape_), fill) {}

template <class T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != numel(shape_)) {
    throw ShapeError("buffer of " + std::to_string(values_.size()) + " values does not fit shape " +
                     to_string(shape_));
  }
}

template <class T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (numel(shape) != values_.size()) {
    throw ShapeError("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
  }
  return Tensor<T>(std::move(shape), values_);
}

template class Tensor<float>;
template class Tensor<double>;

template <class T>
Tensor<T> stack(std::span<const Tensor<T>* const> items, const Shape& item_shape) {
  const std::size_t per = numel(item_shape);
  Shape shape{static_cast<int>(items.size())};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->size() != per) {
      throw ShapeError("stack: item " + std::to_string(i) + " has shape " + to_string(items[i]->shape()) +
                       ", expected " + to_string(item_shape));
    }
    std::copy(items[i]->data(), items[i]->data() + per, out.data() + i * per);
  }
  return out;
}

template Tensor<float> stack<float>(std::span<const Tensor<float>* const>, const Shape&);
template Tensor<double> stack<double>(std::span<const Tensor<double>* const>, const Shape&);

}  // namespace bscreen
