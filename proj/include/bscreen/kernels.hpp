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

// Dense 3D kernels on [N, C, D, H, W] buffers.
//
// Two implementations share each signature: `serial` is the plain loop nest
// kept as the reference, `parallel` distributes independent output planes
// over OpenMP threads. Every output element of the parallel kernels is
// accumulated in a fixed order, so results do not depend on the thread count.

#include "bscreen/tensor.hpp"

namespace bscreen::kernels {

struct Conv3dGeometry {
  int batch = 0;
  int in_channels = 0, in_d = 0, in_h = 0, in_w = 0;
  int out_channels = 0, kd = 0, kh = 0, kw = 0;
  int stride = 1, pad = 0;
  int out_d = 0, out_h = 0, out_w = 0;

  /// Geometry from an input shape [N,Ci,D,H,W] and weight shape [Co,Ci,KD,KH,KW].
  static Conv3dGeometry make(const Shape& input, const Shape& weight, int stride, int pad);

  Shape input_shape() const { return {batch, in_channels, in_d, in_h, in_w}; }
  Shape weight_shape() const { return {out_channels, in_channels, kd, kh, kw}; }
  Shape output_shape() const { return {batch, out_channels, out_d, out_h, out_w}; }
};

struct PoolGeometry {
  int batch = 0, channels = 0, d = 0, h = 0, w = 0;  // fine-resolution extents
  int factor = 2;

  /// Geometry from the fine-resolution shape; every spatial extent must divide by factor.
  static PoolGeometry make(const Shape& fine, int factor);
  Shape fine_shape() const { return {batch, channels, d, h, w}; }
  Shape coarse_shape() const { return {batch, channels, d / factor, h / factor, w / factor}; }
};

namespace serial {
template <class T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, T* y);
template <class T>
void conv3d_backward_data(const Conv3dGeometry& g, const T* dy, const T* w, T* dx);
template <class T>
void conv3d_backward_weight(const Conv3dGeometry& g, const T* x, const T* dy, T* dw);
template <class T>
void avgpool3d(const PoolGeometry& g, const T* fine, T* coarse);
template <class T>
void upsample3d(const PoolGeometry& g, const T* coarse, T* fine);
}  // namespace serial

namespace parallel {
template <class T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, T* y);
template <class T>
void conv3d_backward_data(const Conv3dGeometry& g, const T* dy, const T* w, T* dx);
template <class T>
void conv3d_backward_weight(const Conv3dGeometry& g, const T* x, const T* dy, T* dw);
template <class T>
void avgpool3d(const PoolGeometry& g, const T* fine, T* coarse);
template <class T>
void upsample3d(const PoolGeometry& g, const T* coarse, T* fine);
}  // namespace parallel

/// Caps the OpenMP team size used by the parallel kernels (1 forces serial execution).
void set_thread_count(int threads);
int thread_count();

}  // namespace bscreen::kernels
