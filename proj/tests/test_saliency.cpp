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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <array>
#include <deque>
#include <filesystem>
#include <limits>

#include "bscreen/binary_io.hpp"
#include "bscreen/saliency.hpp"
#include "support/gradcheck.hpp"

using namespace bscreen;
using saliency::LossWeights;

namespace {

// Four taps at halving resolutions over a 16^3 input.
nn::NetworkSpec tap_encoder() {
  nn::NetworkSpec s;
  s.input = {1, 16, 16, 16};
  s.layers = {nn::avg_pool(2), nn::tap(),       nn::conv(2, 3, 2), nn::batch_norm(), nn::relu(),       nn::tap(),
              nn::avg_pool(2), nn::tap(),       nn::avg_pool(2),   nn::tap(),        nn::global_avg_pool(),
              nn::linear(2)};
  return s;
}

nn::NetworkSpec small_classifier() {
  nn::NetworkSpec s;
  s.input = {1, 4, 4, 4};
  s.layers = {nn::conv(2, 3, 1), nn::batch_norm(), nn::relu(), nn::global_avg_pool(), nn::linear(2)};
  return s;
}

template <class T>
nn::ParameterMap<T> with_random_buffers(nn::ParameterMap<T> p, Rng& rng) {
  for (auto& e : p.entries()) {
    if (e.trainable) continue;
    const bool var = e.name.find("running_var") != std::string::npos;
    for (auto& v : e.value.values()) v = static_cast<T>(var ? rng.uniform(0.5, 2.0) : rng.uniform(-0.5, 0.5));
  }
  return p;
}

phantom::BreastSample cube_sample(int y, std::uint64_t seed) {
  Rng rng(seed);
  phantom::BreastSample s;
  s.patient_id = "C" + std::to_string(seed);
  s.y = y;
  s.extents = {16, 16, 16};
  s.volume.resize(s.extents.voxels());
  for (auto& v : s.volume) v = static_cast<float>(rng.uniform(0.2, 0.4));
  if (y == 2)
    for (int k = 6; k < 10; ++k)
      for (int j = 6; j < 10; ++j)
        for (int i = 6; i < 10; ++i) s.volume[s.extents.index(i, j, k)] = 0.9f;
  return s;
}

// Breadth-first labelling, components in scan order of their first voxel.
std::vector<std::vector<std::size_t>> flood_fill(const std::vector<std::uint8_t>& b, const phantom::Extents& e) {
  std::vector<int> label(b.size(), -1);
  std::vector<std::vector<std::size_t>> comps;
  for (std::size_t start = 0; start < b.size(); ++start) {
    if (!b[start] || label[start] >= 0) continue;
    const int id = static_cast<int>(comps.size());
    comps.emplace_back();
    std::deque<std::size_t> q{start};
    label[start] = id;
    while (!q.empty()) {
      const auto v = q.front();
      q.pop_front();
      comps.back().push_back(v);
      const int i = static_cast<int>(v % e.x), j = static_cast<int>((v / e.x) % e.y), k = static_cast<int>(v / (e.x * e.y));
      const int nb[6][3] = {{i - 1, j, k}, {i + 1, j, k}, {i, j - 1, k}, {i, j + 1, k}, {i, j, k - 1}, {i, j, k + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[1] < 0 || n[2] < 0 || n[0] >= e.x || n[1] >= e.y || n[2] >= e.z) continue;
        const auto w = e.index(n[0], n[1], n[2]);
        if (b[w] && label[w] < 0) {
          label[w] = id;
          q.push_back(w);
        }
      }
    }
  }
  return comps;
}

}  // namespace

TEST_CASE("EER: separated scores and scores equal to labels") {
  const std::vector<double> s{0.1, 0.2, 0.05, 0.8, 0.95};
  const std::vector<int> y{0, 0, 0, 1, 1};
  const auto r = saliency::eer_threshold(s, y);
  CHECK(r.threshold > 0.2);
  CHECK(r.threshold < 0.8);
  CHECK(r.fpr == 0);
  CHECK(r.fnr == 0);

  const std::vector<double> s2{0, 1, 1, 0, 1};
  const std::vector<int> y2{0, 1, 1, 0, 1};
  const auto r2 = saliency::eer_threshold(s2, y2);
  CHECK(r2.threshold == 0.5);
  CHECK(r2.rate() == 0);

  CHECK_THROWS_AS(saliency::eer_threshold(s, std::vector<int>{1, 1, 1, 1, 1}), std::invalid_argument);
}

TEST_CASE("EER matches an exhaustive midpoint sweep") {
  Rng rng(3);
  for (int rep = 0; rep < 300; ++rep) {
    const int n = rng.uniform_int(2, 14);
    std::vector<double> s;
    std::vector<int> y;
    for (int i = 0; i < n; ++i) {
      s.push_back(rng.uniform_int(0, 8) / 8.0);  // plenty of ties
      y.push_back(i < 1 ? 0 : i < 2 ? 1 : rng.uniform_int(0, 1));
    }
    // Candidates: below, between and above the distinct scores.
    std::vector<double> d(s);
    std::sort(d.begin(), d.end());
    d.erase(std::unique(d.begin(), d.end()), d.end());
    std::vector<double> cand{d.front() - 1};
    for (std::size_t i = 0; i + 1 < d.size(); ++i) cand.push_back(0.5 * (d[i] + d[i + 1]));
    cand.push_back(d.back() + 1);
    // |FPR - FNR| scaled by (#pos * #neg), exact.
    auto counts = [&](double t) {
      long long fp = 0, fn = 0, p = 0, q = 0;
      for (int i = 0; i < n; ++i) {
        const bool call = s[static_cast<std::size_t>(i)] > t;
        if (y[static_cast<std::size_t>(i)]) {
          ++p;
          fn += !call;
        } else {
          ++q;
          fp += call;
        }
      }
      return std::array<long long, 4>{fp, fn, p, q};
    };
    auto gap = [&](double t) {
      const auto c = counts(t);
      return std::llabs(c[0] * c[2] - c[1] * c[3]);
    };
    long long best = std::numeric_limits<long long>::max();
    for (double t : cand) best = std::min(best, gap(t));
    // Optimal interval: from the lowest optimal candidate region to the highest.
    std::size_t lo = cand.size(), hi = 0;
    for (std::size_t c = 0; c < cand.size(); ++c) {
      if (gap(cand[c]) == best) {
        lo = std::min(lo, c);
        hi = std::max(hi, c);
      }
    }
    // Candidate c sits in region [d[c-1], d[c]); clamp the open ends to the score range.
    const double lower = lo == 0 ? d.front() : d[lo - 1];
    const double upper = hi == cand.size() - 1 ? d.back() : d[hi];
    const auto r = saliency::eer_threshold(s, y);
    CHECK(gap(r.threshold) == best);
    CHECK(r.threshold == 0.5 * (lower + upper));
    const auto c = counts(r.threshold);
    CHECK(r.fpr == static_cast<double>(c[0]) / static_cast<double>(c[3]));
    CHECK(r.fnr == static_cast<double>(c[1]) / static_cast<double>(c[2]));
  }
}

TEST_CASE("total variation and area") {
  const Shape shape{1, 1, 2, 3, 4};
  auto m = [&](double v) { return ad::Var<double>(Tensor<double>(shape, std::vector<double>(24, v)), false); };
  CHECK(saliency::total_variation(m(0.7)).item() == 0);
  CHECK(saliency::mask_area(m(1.0)).item() == 1);
  CHECK(saliency::mask_area(m(0.0)).item() == 0);
  CHECK(saliency::total_variation(m(0.0)).item() == 0);

  // A single 1 in the interior corner: it differs from 3 forward neighbours
  // and is the forward neighbour of none (it sits at index 0).
  Tensor<double> t(shape);
  t[0] = 1;
  CHECK(saliency::total_variation(ad::Var<double>(t, false)).item() == doctest::Approx(3.0 / 24));

  Rng rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor<double> r(shape);
    for (auto& v : r.values()) v = rng.uniform();
    const ad::Var<double> rv(r, false);
    CHECK(saliency::total_variation(rv).item() >= 0);
    const double a = saliency::mask_area(rv).item();
    CHECK(a >= 0);
    CHECK(a <= 1);
  }
}

TEST_CASE("negative volumes reduce the loss to the mask terms") {
  Rng rng(5);
  const auto spec = small_classifier();
  const auto params = with_random_buffers(nn::init_parameters(spec, 1).cast<double>(), rng);
  const auto vars = nn::make_vars(params, false);
  const Shape shape{2, 1, 4, 4, 4};
  Tensor<double> mask(shape), x(shape), x2(shape);
  for (auto& v : mask.values()) v = rng.uniform();
  for (auto& v : x.values()) v = rng.uniform();
  for (auto& v : x2.values()) v = rng.uniform();
  const std::vector<int> y{0, 0};
  const LossWeights w;
  for (auto form : {saliency::DestroyForm::LogProbability, saliency::DestroyForm::Probability}) {
    LossWeights wf = w;
    wf.destroy_form = form;
    const ad::Var<double> m(mask, false);
    const auto a = saliency::saliency_loss<double>(m, x, y, spec, vars, wf);
    const auto b = saliency::saliency_loss<double>(m, x2, y, spec, vars, wf);
    const double expected = w.tv * saliency::total_variation(m).item() + w.area * saliency::mask_area(m).item();
    CHECK(a.total.item() == doctest::Approx(expected).epsilon(1e-12));
    CHECK(a.total.item() == b.total.item());
  }
  CHECK_THROWS_AS(saliency::saliency_loss<double>(ad::Var<double>(Tensor<double>({2, 1, 4, 4, 3}), false), x, y, spec,
                                                  vars, w),
                  ShapeError);
}

TEST_CASE("saliency loss gradient passes finite differences") {
  Rng rng(6);
  const auto spec = small_classifier();
  for (auto form : {saliency::DestroyForm::LogProbability, saliency::DestroyForm::Probability}) {
    double worst = 0;
    for (int rep = 0; rep < 20; ++rep) {
      const auto params = with_random_buffers(nn::init_parameters(spec, static_cast<std::uint64_t>(rep)).cast<double>(), rng);
      const auto vars = nn::make_vars(params, false);
      const Shape shape{2, 1, 4, 4, 4};
      Tensor<double> x(shape);
      for (auto& v : x.values()) v = rng.uniform();
      const std::vector<int> y{1, rng.uniform_int(0, 1)};
      LossWeights w;
      w.destroy_form = form;
      const auto mask = testing::random_tensor(shape, rng, 0.05, 0.95);
      const auto r = testing::check_gradients(
          [&](const std::vector<ad::Var<double>>& in) {
            return saliency::saliency_loss<double>(in[0], x, y, spec, vars, w).total;
          },
          {mask});
      CHECK(r.checked > 100);
      worst = std::max(worst, r.max_rel_error);
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("train_saliency leaves the encoder alone and emits valid masks") {
  const auto enc = tap_encoder();
  Rng rng(7);
  const auto enc_params = with_random_buffers(nn::init_parameters(enc, 2), rng);
  std::vector<phantom::BreastSample> data;
  for (int i = 0; i < 6; ++i) data.push_back(cube_sample(i % 2 ? 2 : 0, 10 + static_cast<std::uint64_t>(i)));
  std::vector<const phantom::BreastSample*> ptrs;
  for (const auto& s : data) ptrs.push_back(&s);
  saliency::SaliencyConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 3;
  const auto before = enc_params;
  const auto a = saliency::train_saliency(ptrs, enc, enc_params, cfg, 1);
  const auto b = saliency::train_saliency(ptrs, enc, enc_params, cfg, 1);
  CHECK(enc_params == before);
  CHECK(a.model.encoder_params.entries() == before.entries());
  CHECK(a.model.decoder_params == b.model.decoder_params);
  CHECK(a.history.size() == 2);
  for (const auto& s : data) {
    const auto m = saliency::mask(a.model, s);
    REQUIRE(m.size() == s.extents.voxels());
    for (float v : m) {
      CHECK(v >= 0);
      CHECK(v <= 1);
    }
  }
  auto wrong = data[0];
  wrong.extents = {8, 8, 8};
  wrong.volume.resize(512);
  CHECK_THROWS_AS(saliency::mask(a.model, wrong), ShapeError);
}

TEST_CASE("connected components match a flood-fill oracle") {
  Rng rng(8);
  for (int rep = 0; rep < 200; ++rep) {
    const phantom::Extents e{rng.uniform_int(1, 9), rng.uniform_int(1, 9), rng.uniform_int(1, 6)};
    const double density = rng.uniform(0.1, 0.7);
    std::vector<std::uint8_t> b(e.voxels());
    for (auto& v : b) v = rng.bernoulli(density);
    const auto comps = saliency::connected_components(b, e);
    const auto oracle = flood_fill(b, e);
    REQUIRE(comps.size() == oracle.size());
    for (std::size_t c = 0; c < comps.size(); ++c) {
      CHECK(comps[c].voxels == oracle[c].size());
      env::BoundingVolume box{e.x, e.y, e.z, 0, 0, 0};
      for (auto v : oracle[c]) {
        const int i = static_cast<int>(v % e.x), j = static_cast<int>((v / e.x) % e.y), k = static_cast<int>(v / (e.x * e.y));
        box = {std::min(box.x0, i), std::min(box.y0, j), std::min(box.z0, k),
               std::max(box.x1, i + 1), std::max(box.y1, j + 1), std::max(box.z1, k + 1)};
      }
      CHECK(comps[c].box == box);
    }
  }
}

TEST_CASE("mask detections: single blob, size filter and monotonicity in zeta") {
  const phantom::Extents e{12, 10, 6};
  std::vector<float> m(e.voxels(), 0.0f);
  for (int k = 1; k < 4; ++k)
    for (int j = 2; j < 5; ++j)
      for (int i = 3; i < 7; ++i) m[e.index(i, j, k)] = 0.9f;
  m[e.index(10, 8, 5)] = 0.95f;  // speckle below the size floor
  const auto d = saliency::mask_detections(m, e, {});
  REQUIRE(d.size() == 1);
  CHECK(d[0].box == env::BoundingVolume{3, 2, 1, 7, 5, 4});
  CHECK(d[0].score == doctest::Approx(0.9));
  saliency::LocalizeConfig loose;
  loose.min_voxels = 1;
  CHECK(saliency::mask_detections(m, e, loose).size() == 2);
  saliency::LocalizeConfig high;
  high.zeta = 0.92;
  CHECK(saliency::mask_detections(m, e, high).empty());
  CHECK_THROWS_AS(saliency::mask_detections(m, e, {1.0, 8}), std::invalid_argument);

  Rng rng(9);
  std::vector<float> r(e.voxels());
  for (auto& v : r) v = static_cast<float>(rng.uniform());
  // Raising zeta only removes salient voxels.
  std::vector<std::uint8_t> prev(r.size(), 1);
  for (double z : {0.1, 0.3, 0.5, 0.7, 0.9}) {
    std::vector<std::uint8_t> cur(r.size(), 0);
    for (const auto& det : saliency::mask_detections(r, e, {z, 1}))
      for (int k = det.box.z0; k < det.box.z1; ++k)
        for (int j = det.box.y0; j < det.box.y1; ++j)
          for (int i = det.box.x0; i < det.box.x1; ++i)
            if (r[e.index(i, j, k)] > z) cur[e.index(i, j, k)] = 1;
    for (std::size_t v = 0; v < r.size(); ++v) CHECK(cur[v] <= prev[v]);
    prev = cur;
  }
}

TEST_CASE("localize is gated by the diagnosis") {
  const auto enc = tap_encoder();
  saliency::SaliencyModel model;
  model.encoder = enc;
  model.encoder_params = nn::init_parameters(enc, 3);
  model.decoder = presets::saliency_decoder(enc);
  model.decoder_params = nn::init_parameters(model.decoder, 4);
  // Saturate the output so every voxel is salient.
  const std::string last = "L" + std::to_string(model.decoder.layers.size() - 2) + ".b";
  REQUIRE(model.decoder_params.contains(last));
  model.decoder_params.at(last)[0] = 50.0f;
  const auto s = cube_sample(2, 1);
  const double p = nn::class_probability(nn::infer(enc, model.encoder_params, s.as_input()), 1)[0];
  const auto above = saliency::localize(model, s, p, {});
  CHECK_FALSE(above.positive);
  CHECK(above.detections.empty());
  CHECK(above.diagnosis == doctest::Approx(p));
  const auto below = saliency::localize(model, s, std::nextafter(p, -1.0), {});
  CHECK(below.positive);
  REQUIRE(below.detections.size() == 1);
  CHECK(below.detections[0].box == env::BoundingVolume{0, 0, 0, 16, 16, 16});
}

TEST_CASE("mask files round trip") {
  const phantom::Extents e{3, 2, 2};
  std::vector<float> m(e.voxels());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<float>(i) / 7.0f;
  const auto path = std::filesystem::temp_directory_path() / "bscreen_mask.bin";
  saliency::write_mask(path, m, e);
  phantom::Extents back_e;
  const auto back = saliency::read_mask(path, back_e);
  CHECK(back_e == e);
  CHECK(back == m);
  io::write_file(path, "nope");
  CHECK_THROWS_AS(saliency::read_mask(path, back_e), io::FormatError);
  CHECK_THROWS_AS(saliency::write_mask(path, m, {2, 2, 2}), ShapeError);
  std::filesystem::remove(path);
}
