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

#include "bscreen/kernels.hpp"

#include <algorithm>
#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bscreen::kernels {

namespace {

std::atomic<int> g_threads{0};

int out_extent(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

// Output positions o with 0 <= o*stride - pad + tap < in.
struct Range {
  int lo, hi;
};
Range valid_outputs(int in, int out, int tap, int stride, int pad) {
  const int first = pad - tap;
  int lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  const int last = in - 1 + pad - tap;
  int hi = last < 0 ? 0 : last / stride + 1;
  hi = std::min(hi, out);
  lo = std::min(lo, hi);
  return {lo, hi};
}

}  // namespace

void set_thread_count(int threads) { g_threads.store(std::max(threads, 1)); }

int thread_count() {
  const int t = g_threads.load();
  if (t > 0) return t;
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

Conv3dGeometry Conv3dGeometry::make(const Shape& input, const Shape& weight, int stride, int pad) {
  if (input.size() != 5 || weight.size() != 5) {
    throw ShapeError("conv3d expects 5-D input and weight, got " + to_string(input) + " and " +
                     to_string(weight));
  }
  if (input[1] != weight[1]) {
    throw ShapeError("conv3d channel mismatch: input " + to_string(input) + " weight " +
                     to_string(weight));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv3d needs stride >= 1 and pad >= 0");
  Conv3dGeometry g;
  g.batch = input[0];
  g.in_channels = input[1];
  g.in_d = input[2];
  g.in_h = input[3];
  g.in_w = input[4];
  g.out_channels = weight[0];
  g.kd = weight[2];
  g.kh = weight[3];
  g.kw = weight[4];
  g.stride = stride;
  g.pad = pad;
  g.out_d = out_extent(g.in_d, g.kd, stride, pad);
  g.out_h = out_extent(g.in_h, g.kh, stride, pad);
  g.out_w = out_extent(g.in_w, g.kw, stride, pad);
  if (g.out_d < 1 || g.out_h < 1 || g.out_w < 1) {
    throw ShapeError("conv3d kernel larger than padded input " + to_string(input));
  }
  return g;
}

PoolGeometry PoolGeometry::make(const Shape& fine, int factor) {
  if (fine.size() != 5) throw ShapeError("pooling expects a 5-D shape, got " + to_string(fine));
  if (factor < 1 || fine[2] % factor || fine[3] % factor || fine[4] % factor) {
    throw ShapeError("spatial extents " + to_string(fine) + " not divisible by " +
                     std::to_string(factor));
  }
  return {fine[0], fine[1], fine[2], fine[3], fine[4], factor};
}

// ---------------------------------------------------------------------------
// Serial reference kernels: one output element at a time, bounds-checked.

namespace serial {

template <class T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, T* y) {
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int od = 0; od < g.out_d; ++od)
        for (int oh = 0; oh < g.out_h; ++oh)
          for (int ow = 0; ow < g.out_w; ++ow) {
            T acc = 0;
            for (int ci = 0; ci < g.in_channels; ++ci)
              for (int a = 0; a < g.kd; ++a)
                for (int b = 0; b < g.kh; ++b)
                  for (int c = 0; c < g.kw; ++c) {
                    const int id = od * g.stride - g.pad + a;
                    const int ih = oh * g.stride - g.pad + b;
                    const int iw = ow * g.stride - g.pad + c;
                    if (id < 0 || ih < 0 || iw < 0 || id >= g.in_d || ih >= g.in_h || iw >= g.in_w)
                      continue;
                    const auto xi =
                        ((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_d + id) * g.in_h * g.in_w +
                        static_cast<std::size_t>(ih) * g.in_w + iw;
                    const auto wi = (((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kd + a) * g.kh + b) *
                                        g.kw + c;
                    acc += x[xi] * w[wi];
                  }
            y[(((static_cast<std::size_t>(n) * g.out_channels + co) * g.out_d + od) * g.out_h + oh) * g.out_w +
              ow] = acc;
          }
}

template <class T>
void conv3d_backward_data(const Conv3dGeometry& g, const T* dy, const T* w, T* dx) {
  std::fill(dx, dx + numel(g.input_shape()), T{0});
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int od = 0; od < g.out_d; ++od)
        for (int oh = 0; oh < g.out_h; ++oh)
          for (int ow = 0; ow < g.out_w; ++ow) {
            const T gy =
                dy[(((static_cast<std::size_t>(n) * g.out_channels + co) * g.out_d + od) * g.out_h + oh) *
                       g.out_w + ow];
            for (int ci = 0; ci < g.in_channels; ++ci)
              for (int a = 0; a < g.kd; ++a)
                for (int b = 0; b < g.kh; ++b)
                  for (int c = 0; c < g.kw; ++c) {
                    const int id = od * g.stride - g.pad + a;
                    const int ih = oh * g.stride - g.pad + b;
                    const int iw = ow * g.stride - g.pad + c;
                    if (id < 0 || ih < 0 || iw < 0 || id >= g.in_d || ih >= g.in_h || iw >= g.in_w)
                      continue;
                    const auto xi =
                        ((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_d + id) * g.in_h * g.in_w +
                        static_cast<std::size_t>(ih) * g.in_w + iw;
                    const auto wi = (((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kd + a) * g.kh + b) *
                                        g.kw + c;
                    dx[xi] += gy * w[wi];
                  }
          }
}

template <class T>
void conv3d_backward_weight(const Conv3dGeometry& g, const T* x, const T* dy, T* dw) {
  std::fill(dw, dw + numel(g.weight_shape()), T{0});
  for (int n = 0; n < g.batch; ++n)
    for (int co = 0; co < g.out_channels; ++co)
      for (int od = 0; od < g.out_d; ++od)
        for (int oh = 0; oh < g.out_h; ++oh)
          for (int ow = 0; ow < g.out_w; ++ow) {
            const T gy =
                dy[(((static_cast<std::size_t>(n) * g.out_channels + co) * g.out_d + od) * g.out_h + oh) *
                       g.out_w + ow];
            for (int ci = 0; ci < g.in_channels; ++ci)
              for (int a = 0; a < g.kd; ++a)
                for (int b = 0; b < g.kh; ++b)
                  for (int c = 0; c < g.kw; ++c) {
                    const int id = od * g.stride - g.pad + a;
                    const int ih = oh * g.stride - g.pad + b;
                    const int iw = ow * g.stride - g.pad + c;
                    if (id < 0 || ih < 0 || iw < 0 || id >= g.in_d || ih >= g.in_h || iw >= g.in_w)
                      continue;
                    const auto xi =
                        ((static_cast<std::size_t>(n) * g.in_channels + ci) * g.in_d + id) * g.in_h * g.in_w +
                        static_cast<std::size_t>(ih) * g.in_w + iw;
                    const auto wi = (((static_cast<std::size_t>(co) * g.in_channels + ci) * g.kd + a) * g.kh + b) *
                                        g.kw + c;
                    dw[wi] += gy * x[xi];
                  }
          }
}

template <class T>
void avgpool3d(const PoolGeometry& g, const T* fine, T* coarse) {
  const int f = g.factor;
  const int cd = g.d / f, ch = g.h / f, cw = g.w / f;
  const T inv = T{1} / static_cast<T>(f * f * f);
  for (int p = 0; p < g.batch * g.channels; ++p)
    for (int z = 0; z < cd; ++z)
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) {
          T acc = 0;
          for (int a = 0; a < f; ++a)
            for (int b = 0; b < f; ++b)
              for (int c = 0; c < f; ++c)
                acc += fine[((static_cast<std::size_t>(p) * g.d + z * f + a) * g.h + y * f + b) * g.w + x * f + c];
          coarse[((static_cast<std::size_t>(p) * cd + z) * ch + y) * cw + x] = acc * inv;
        }
}

template <class T>
void upsample3d(const PoolGeometry& g, const T* coarse, T* fine) {
  const int f = g.factor;
  const int cd = g.d / f, ch = g.h / f, cw = g.w / f;
  for (int p = 0; p < g.batch * g.channels; ++p)
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y)
        for (int x = 0; x < g.w; ++x)
          fine[((static_cast<std::size_t>(p) * g.d + z) * g.h + y) * g.w + x] =
              coarse[((static_cast<std::size_t>(p) * cd + z / f) * ch + y / f) * cw + x / f];
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP kernels: row-wise inner loops over contiguous memory.

namespace parallel {

template <class T>
void conv3d_forward(const Conv3dGeometry& g, const T* x, const T* w, T* y) {
  const long planes = static_cast<long>(g.batch) * g.out_channels;
  const std::size_t in_plane = static_cast<std::size_t>(g.in_d) * g.in_h * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_d) * g.out_h * g.out_w;
  const std::size_t ksize = static_cast<std::size_t>(g.kd) * g.kh * g.kw;
  const int s = g.stride;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (long p = 0; p < planes; ++p) {
    const int n = static_cast<int>(p / g.out_channels);
    const int co = static_cast<int>(p % g.out_channels);
    T* yp = y + static_cast<std::size_t>(p) * out_plane;
    std::fill(yp, yp + out_plane, T{0});
    for (int ci = 0; ci < g.in_channels; ++ci) {
      const T* xp = x + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
      const T* wp = w + (static_cast<std::size_t>(co) * g.in_channels + ci) * ksize;
      for (int a = 0; a < g.kd; ++a)
        for (int b = 0; b < g.kh; ++b)
          for (int c = 0; c < g.kw; ++c) {
            const T wv = wp[(a * g.kh + b) * g.kw + c];
            const Range rw = valid_outputs(g.in_w, g.out_w, c, s, g.pad);
            for (int od = 0; od < g.out_d; ++od) {
              const int id = od * s - g.pad + a;
              if (id < 0 || id >= g.in_d) continue;
              for (int oh = 0; oh < g.out_h; ++oh) {
                const int ih = oh * s - g.pad + b;
                if (ih < 0 || ih >= g.in_h) continue;
                T* yrow = yp + (static_cast<std::size_t>(od) * g.out_h + oh) * g.out_w;
                const T* xrow = xp + (static_cast<std::size_t>(id) * g.in_h + ih) * g.in_w;
                const int off = c - g.pad;
                if (s == 1) {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) yrow[ow] += wv * xrow[ow + off];
                } else {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) yrow[ow] += wv * xrow[ow * s + off];
                }
              }
            }
          }
    }
  }
}

template <class T>
void conv3d_backward_data(const Conv3dGeometry& g, const T* dy, const T* w, T* dx) {
  const long planes = static_cast<long>(g.batch) * g.in_channels;
  const std::size_t in_plane = static_cast<std::size_t>(g.in_d) * g.in_h * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_d) * g.out_h * g.out_w;
  const std::size_t ksize = static_cast<std::size_t>(g.kd) * g.kh * g.kw;
  const int s = g.stride;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (long p = 0; p < planes; ++p) {
    const int n = static_cast<int>(p / g.in_channels);
    const int ci = static_cast<int>(p % g.in_channels);
    T* dxp = dx + static_cast<std::size_t>(p) * in_plane;
    std::fill(dxp, dxp + in_plane, T{0});
    for (int co = 0; co < g.out_channels; ++co) {
      const T* dyp = dy + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
      const T* wp = w + (static_cast<std::size_t>(co) * g.in_channels + ci) * ksize;
      for (int a = 0; a < g.kd; ++a)
        for (int b = 0; b < g.kh; ++b)
          for (int c = 0; c < g.kw; ++c) {
            const T wv = wp[(a * g.kh + b) * g.kw + c];
            const Range rw = valid_outputs(g.in_w, g.out_w, c, s, g.pad);
            for (int od = 0; od < g.out_d; ++od) {
              const int id = od * s - g.pad + a;
              if (id < 0 || id >= g.in_d) continue;
              for (int oh = 0; oh < g.out_h; ++oh) {
                const int ih = oh * s - g.pad + b;
                if (ih < 0 || ih >= g.in_h) continue;
                const T* dyrow = dyp + (static_cast<std::size_t>(od) * g.out_h + oh) * g.out_w;
                T* dxrow = dxp + (static_cast<std::size_t>(id) * g.in_h + ih) * g.in_w;
                const int off = c - g.pad;
                if (s == 1) {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) dxrow[ow + off] += wv * dyrow[ow];
                } else {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) dxrow[ow * s + off] += wv * dyrow[ow];
                }
              }
            }
          }
    }
  }
}

template <class T>
void conv3d_backward_weight(const Conv3dGeometry& g, const T* x, const T* dy, T* dw) {
  const long pairs = static_cast<long>(g.out_channels) * g.in_channels;
  const std::size_t in_plane = static_cast<std::size_t>(g.in_d) * g.in_h * g.in_w;
  const std::size_t out_plane = static_cast<std::size_t>(g.out_d) * g.out_h * g.out_w;
  const std::size_t ksize = static_cast<std::size_t>(g.kd) * g.kh * g.kw;
  const int s = g.stride;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (long p = 0; p < pairs; ++p) {
    const int co = static_cast<int>(p / g.in_channels);
    const int ci = static_cast<int>(p % g.in_channels);
    T* dwp = dw + static_cast<std::size_t>(p) * ksize;
    for (int a = 0; a < g.kd; ++a)
      for (int b = 0; b < g.kh; ++b)
        for (int c = 0; c < g.kw; ++c) {
          const Range rw = valid_outputs(g.in_w, g.out_w, c, s, g.pad);
          const int off = c - g.pad;
          T acc = 0;
          for (int n = 0; n < g.batch; ++n) {
            const T* xp = x + (static_cast<std::size_t>(n) * g.in_channels + ci) * in_plane;
            const T* dyp = dy + (static_cast<std::size_t>(n) * g.out_channels + co) * out_plane;
            for (int od = 0; od < g.out_d; ++od) {
              const int id = od * s - g.pad + a;
              if (id < 0 || id >= g.in_d) continue;
              for (int oh = 0; oh < g.out_h; ++oh) {
                const int ih = oh * s - g.pad + b;
                if (ih < 0 || ih >= g.in_h) continue;
                const T* dyrow = dyp + (static_cast<std::size_t>(od) * g.out_h + oh) * g.out_w;
                const T* xrow = xp + (static_cast<std::size_t>(id) * g.in_h + ih) * g.in_w;
                if (s == 1) {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) acc += dyrow[ow] * xrow[ow + off];
                } else {
                  for (int ow = rw.lo; ow < rw.hi; ++ow) acc += dyrow[ow] * xrow[ow * s + off];
                }
              }
            }
          }
          dwp[(a * g.kh + b) * g.kw + c] = acc;
        }
  }
}

template <class T>
void avgpool3d(const PoolGeometry& g, const T* fine, T* coarse) {
  const int f = g.factor;
  const int cd = g.d / f, ch = g.h / f, cw = g.w / f;
  const T inv = T{1} / static_cast<T>(f * f * f);
  const long planes = static_cast<long>(g.batch) * g.channels;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (long p = 0; p < planes; ++p) {
    const T* src = fine + static_cast<std::size_t>(p) * g.d * g.h * g.w;
    T* dst = coarse + static_cast<std::size_t>(p) * cd * ch * cw;
    std::fill(dst, dst + static_cast<std::size_t>(cd) * ch * cw, T{0});
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y) {
        const T* row = src + (static_cast<std::size_t>(z) * g.h + y) * g.w;
        T* out = dst + (static_cast<std::size_t>(z / f) * ch + y / f) * cw;
        for (int x = 0; x < g.w; ++x) out[x / f] += row[x];
      }
    for (std::size_t i = 0; i < static_cast<std::size_t>(cd) * ch * cw; ++i) dst[i] *= inv;
  }
}

template <class T>
void upsample3d(const PoolGeometry& g, const T* coarse, T* fine) {
  const int f = g.factor;
  const int cd = g.d / f, ch = g.h / f, cw = g.w / f;
  const long planes = static_cast<long>(g.batch) * g.channels;
#pragma omp parallel for schedule(static) num_threads(thread_count())
  for (long p = 0; p < planes; ++p) {
    const T* src = coarse + static_cast<std::size_t>(p) * cd * ch * cw;
    T* dst = fine + static_cast<std::size_t>(p) * g.d * g.h * g.w;
    for (int z = 0; z < g.d; ++z)
      for (int y = 0; y < g.h; ++y) {
        const T* in = src + (static_cast<std::size_t>(z / f) * ch + y / f) * cw;
        T* row = dst + (static_cast<std::size_t>(z) * g.h + y) * g.w;
        for (int x = 0; x < g.w; ++x) row[x] = in[x / f];
      }
  }
}

}  // namespace parallel

#define BSCREEN_INSTANTIATE(NS, T)                                                      \
  template void NS::conv3d_forward<T>(const Conv3dGeometry&, const T*, const T*, T*);        \
  template void NS::conv3d_backward_data<T>(const Conv3dGeometry&, const T*, const T*, T*);  \
  template void NS::conv3d_backward_weight<T>(const Conv3dGeometry&, const T*, const T*, T*); \
  template void NS::avgpool3d<T>(const PoolGeometry&, const T*, T*);                         \
  template void NS::upsample3d<T>(const PoolGeometry&, const T*, T*);

BSCREEN_INSTANTIATE(serial, float)
BSCREEN_INSTANTIATE(serial, double)
BSCREEN_INSTANTIATE(parallel, float)
BSCREEN_INSTANTIATE(parallel, double)

#undef BSCREEN_INSTANTIATE

}  // namespace bscreen::kernels
