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

// Serial reference vs OpenMP kernels on diagnosis-network sized layers.
// The argument of each parallel benchmark is the thread count. Before timing,
// main() checks that both implementations agree and prints the max abs diff.

#include <benchmark/benchmark.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

#include "bscreen/kernels.hpp"
#include "bscreen/rng.hpp"

using namespace bscreen;
using kernels::Conv3dGeometry;
using kernels::PoolGeometry;

namespace {

struct Buffers {
  Conv3dGeometry conv;
  PoolGeometry pool;
  std::vector<float> x, w, y, dx, dw, coarse;
};

std::vector<float> random_buffer(const Shape& shape, Rng& rng) {
  std::vector<float> v(numel(shape));
  for (auto& e : v) e = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

Buffers& buffers() {
  static Buffers b = [] {
    Buffers r;
    r.conv = Conv3dGeometry::make({8, 16, 16, 32, 32}, {16, 16, 3, 3, 3}, 1, 1);
    r.pool = PoolGeometry::make(r.conv.input_shape(), 2);
    Rng rng(1);
    r.x = random_buffer(r.conv.input_shape(), rng);
    r.w = random_buffer(r.conv.weight_shape(), rng);
    r.y = random_buffer(r.conv.output_shape(), rng);
    r.dx.resize(r.x.size());
    r.dw.resize(r.w.size());
    r.coarse.resize(numel(r.pool.coarse_shape()));
    return r;
  }();
  return b;
}

float max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  float m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void set_threads(const benchmark::State& state) { kernels::set_thread_count(static_cast<int>(state.range(0))); }

void BM_conv_forward_serial(benchmark::State& state) {
  auto& b = buffers();
  for (auto _ : state) {
    kernels::serial::conv3d_forward(b.conv, b.x.data(), b.w.data(), b.y.data());
    benchmark::DoNotOptimize(b.y.data());
  }
}

void BM_conv_forward_parallel(benchmark::State& state) {
  auto& b = buffers();
  set_threads(state);
  for (auto _ : state) {
    kernels::parallel::conv3d_forward(b.conv, b.x.data(), b.w.data(), b.y.data());
    benchmark::DoNotOptimize(b.y.data());
  }
}

void BM_conv_backward_data_serial(benchmark::State& state) {
  auto& b = buffers();
  for (auto _ : state) {
    kernels::serial::conv3d_backward_data(b.conv, b.y.data(), b.w.data(), b.dx.data());
    benchmark::DoNotOptimize(b.dx.data());
  }
}

void BM_conv_backward_data_parallel(benchmark::State& state) {
  auto& b = buffers();
  set_threads(state);
  for (auto _ : state) {
    kernels::parallel::conv3d_backward_data(b.conv, b.y.data(), b.w.data(), b.dx.data());
    benchmark::DoNotOptimize(b.dx.data());
  }
}

void BM_conv_backward_weight_serial(benchmark::State& state) {
  auto& b = buffers();
  for (auto _ : state) {
    kernels::serial::conv3d_backward_weight(b.conv, b.x.data(), b.y.data(), b.dw.data());
    benchmark::DoNotOptimize(b.dw.data());
  }
}

void BM_conv_backward_weight_parallel(benchmark::State& state) {
  auto& b = buffers();
  set_threads(state);
  for (auto _ : state) {
    kernels::parallel::conv3d_backward_weight(b.conv, b.x.data(), b.y.data(), b.dw.data());
    benchmark::DoNotOptimize(b.dw.data());
  }
}

void BM_avgpool_serial(benchmark::State& state) {
  auto& b = buffers();
  for (auto _ : state) {
    kernels::serial::avgpool3d(b.pool, b.x.data(), b.coarse.data());
    benchmark::DoNotOptimize(b.coarse.data());
  }
}

void BM_avgpool_parallel(benchmark::State& state) {
  auto& b = buffers();
  set_threads(state);
  for (auto _ : state) {
    kernels::parallel::avgpool3d(b.pool, b.x.data(), b.coarse.data());
    benchmark::DoNotOptimize(b.coarse.data());
  }
}

void BM_upsample_serial(benchmark::State& state) {
  auto& b = buffers();
  for (auto _ : state) {
    kernels::serial::upsample3d(b.pool, b.coarse.data(), b.dx.data());
    benchmark::DoNotOptimize(b.dx.data());
  }
}

void BM_upsample_parallel(benchmark::State& state) {
  auto& b = buffers();
  set_threads(state);
  for (auto _ : state) {
    kernels::parallel::upsample3d(b.pool, b.coarse.data(), b.dx.data());
    benchmark::DoNotOptimize(b.dx.data());
  }
}

// Returns false when any parallel kernel disagrees with the serial one.
bool check_agreement() {
  auto& b = buffers();
  kernels::set_thread_count(4);
  std::vector<float> s(b.y.size()), p(b.y.size());
  kernels::serial::conv3d_forward(b.conv, b.x.data(), b.w.data(), s.data());
  kernels::parallel::conv3d_forward(b.conv, b.x.data(), b.w.data(), p.data());
  const float fwd = max_abs_diff(s, p);

  // The parallel backward pass gathers instead of scattering, so it sums in another order.
  s.assign(b.x.size(), 0), p.assign(b.x.size(), 0);
  kernels::serial::conv3d_backward_data(b.conv, b.y.data(), b.w.data(), s.data());
  kernels::parallel::conv3d_backward_data(b.conv, b.y.data(), b.w.data(), p.data());
  const float bwd_data = max_abs_diff(s, p);
  std::vector<float> one(b.x.size(), 0);
  kernels::set_thread_count(1);
  kernels::parallel::conv3d_backward_data(b.conv, b.y.data(), b.w.data(), one.data());
  const float across_threads = max_abs_diff(one, p);

  s.assign(b.w.size(), 0), p.assign(b.w.size(), 0);
  kernels::serial::conv3d_backward_weight(b.conv, b.x.data(), b.y.data(), s.data());
  kernels::parallel::conv3d_backward_weight(b.conv, b.x.data(), b.y.data(), p.data());
  const float bwd_weight = max_abs_diff(s, p);

  s.assign(b.coarse.size(), 0), p.assign(b.coarse.size(), 0);
  kernels::serial::avgpool3d(b.pool, b.x.data(), s.data());
  kernels::parallel::avgpool3d(b.pool, b.x.data(), p.data());
  const float pool = max_abs_diff(s, p);

  std::printf("max |serial - parallel|: forward %g, backward data %g, backward weight %g, avgpool %g\n", fwd,
              bwd_data, bwd_weight, pool);
  std::printf("max |1 thread - 4 threads| backward data: %g\n", across_threads);
  return std::max({fwd, bwd_data, bwd_weight, pool}) < 1e-4f && across_threads == 0;
}

}  // namespace

#define PARALLEL_ARGS ->Arg(1)->Arg(2)->Arg(4)->UseRealTime()->Unit(benchmark::kMillisecond)

BENCHMARK(BM_conv_forward_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_forward_parallel) PARALLEL_ARGS;
BENCHMARK(BM_conv_backward_data_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_data_parallel) PARALLEL_ARGS;
BENCHMARK(BM_conv_backward_weight_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_weight_parallel) PARALLEL_ARGS;
BENCHMARK(BM_avgpool_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_avgpool_parallel) PARALLEL_ARGS;
BENCHMARK(BM_upsample_serial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_upsample_parallel) PARALLEL_ARGS;

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  if (!check_agreement()) {
    std::fprintf(stderr, "parallel kernels disagree with the serial reference\n");
    return 1;
  }
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
