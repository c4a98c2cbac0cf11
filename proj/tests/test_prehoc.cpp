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
#include <filesystem>

#include "bscreen/prehoc.hpp"
#include "bscreen/rng.hpp"

using namespace bscreen;
using env::BoundingVolume;
using phantom::LesionClass;

namespace {

BoundingVolume mask_bounds(const phantom::Mask& m, const phantom::Extents& e) {
  BoundingVolume b{e.x, e.y, e.z, 0, 0, 0};
  for (int k = 0; k < e.z; ++k)
    for (int j = 0; j < e.y; ++j)
      for (int i = 0; i < e.x; ++i)
        if (m[e.index(i, j, k)]) {
          b.x0 = std::min(b.x0, i);
          b.y0 = std::min(b.y0, j);
          b.z0 = std::min(b.z0, k);
          b.x1 = std::max(b.x1, i + 1);
          b.y1 = std::max(b.y1, j + 1);
          b.z1 = std::max(b.z1, k + 1);
        }
  return b;
}

// A box that misses every lesion of the sample.
BoundingVolume empty_corner(const phantom::BreastSample& s) {
  const BoundingVolume corners[] = {{0, 0, 0, 4, 4, 2}, {28, 28, 14, 32, 32, 16}, {0, 28, 0, 4, 32, 2},
                                    {28, 0, 14, 32, 4, 16}};
  for (const auto& b : corners) {
    bool hit = false;
    for (const auto& m : s.masks)
      for (int k = b.z0; k < b.z1; ++k)
        for (int j = b.y0; j < b.y1; ++j)
          for (int i = b.x0; i < b.x1; ++i) hit = hit || m[s.extents.index(i, j, k)];
    if (!hit) return b;
  }
  FAIL("no empty corner");
  return {};
}

phantom::BreastSample mixed_sample(std::uint64_t seed) {
  return phantom::generate_phantom(seed, {}, {{LesionClass::Malignant, LesionClass::Benign}});
}

}  // namespace

TEST_CASE("label_detections: malignant match, benign match, false positive") {
  const auto s = mixed_sample(3);
  REQUIRE(s.masks.size() == 2);
  const std::vector<metrics::Detection> dets{{mask_bounds(s.masks[0], s.extents), 0.9},
                                             {mask_bounds(s.masks[1], s.extents), 0.8},
                                             {empty_corner(s), 0.7}};
  const auto labels = prehoc::label_detections(dets, s);
  CHECK(labels == std::vector<int>{1, 0, 0});
  // A threshold above any achievable Dice turns every match into a false positive.
  CHECK(prehoc::label_detections(dets, s, 1.01) == std::vector<int>{0, 0, 0});
  CHECK(prehoc::label_detections({}, s).empty());
}

TEST_CASE("extract_patch matches the classifier input") {
  const auto s = mixed_sample(4);
  const auto spec = presets::lesion_classifier();
  const auto patch = prehoc::extract_patch(s, mask_bounds(s.masks[0], s.extents), spec);
  CHECK(patch.shape() == spec.input);
  for (float v : patch.values()) {
    CHECK(v >= 0);
    CHECK(v <= 1);
  }
}

TEST_CASE("classify: range, determinism, chunking and extent checks") {
  const auto s = mixed_sample(5);
  const auto spec = presets::lesion_classifier();
  const auto params = nn::init_parameters(spec, 1);
  std::vector<Tensor<float>> patches;
  for (int i = 0; i < 70; ++i) {
    const int x = i % 16, y = (i / 16) % 16;
    patches.push_back(prehoc::extract_patch(s, {x, y, 0, x + 12 + i % 5, y + 12, 10 + i % 6}, spec));
  }
  const auto p = prehoc::classify(spec, params, patches);
  REQUIRE(p.size() == patches.size());
  for (double v : p) {
    CHECK(v >= 0);
    CHECK(v <= 1);
  }
  CHECK(prehoc::classify(spec, params, patches) == p);
  for (std::size_t i : {0u, 63u, 64u, 69u}) {
    const auto one = prehoc::classify(spec, params, std::span(&patches[i], 1));
    CHECK(one[0] == doctest::Approx(p[i]).epsilon(1e-5));
  }
  std::vector<Tensor<float>> wrong{Tensor<float>({1, 4, 16, 16})};
  CHECK_THROWS_AS(prehoc::classify(spec, params, wrong), ShapeError);
  CHECK(prehoc::classify(spec, params, {}).empty());
}

TEST_CASE("breast_score is the maximum probability") {
  CHECK(prehoc::breast_score({}) == 0.0);
  const std::vector<double> p{0.2, 0.9, 0.5};
  CHECK(prehoc::breast_score(p) == 0.9);
  Rng rng(2);
  for (int rep = 0; rep < 200; ++rep) {
    std::vector<double> v(static_cast<std::size_t>(rng.uniform_int(1, 8)));
    for (auto& x : v) x = rng.uniform();
    const double s = prehoc::breast_score(v);
    auto shuffled = v;
    rng.shuffle(std::span<double>(shuffled));
    CHECK(prehoc::breast_score(shuffled) == s);
    auto raised = v;
    raised[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(v.size()) - 1))] += rng.uniform();
    CHECK(prehoc::breast_score(raised) >= s);
    auto more = v;
    more.push_back(rng.uniform());
    CHECK(prehoc::breast_score(more) >= s);
  }
}

TEST_CASE("breast and patient AUC") {
  // Patient A: one malignant breast (0.8) and a clean one (0.1).
  // Patient B: two clean breasts (0.9, 0.2). Patient C: malignant (0.3), clean (0.05).
  const std::vector<prehoc::BreastScore> s{{"AL", "A", 0.8, 1}, {"AR", "A", 0.1, 0}, {"BL", "B", 0.9, 0},
                                           {"BR", "B", 0.2, 0}, {"CL", "C", 0.3, 1}, {"CR", "C", 0.05, 0}};
  // Breasts: positives {0.8, 0.3} vs negatives {0.1, 0.9, 0.2, 0.05}: wins 3 + 3 = 6 of 8.
  CHECK(prehoc::breast_auc(s) == doctest::Approx(6.0 / 8.0));
  // Patients: A 0.8 (+), C 0.3 (+) vs B 0.9 (-): 0 of 2.
  CHECK(prehoc::patient_auc(s) == doctest::Approx(0.0));
}

TEST_CASE("scores CSV round trip") {
  const std::vector<prehoc::BreastScore> s{{"AL", "A", 0.123456789012345678, 1}, {"AR", "A", 1e-17, 0}};
  const auto path = std::filesystem::temp_directory_path() / "bscreen_scores.csv";
  prehoc::write_scores_csv(path, s);
  const auto back = prehoc::read_scores_csv(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].breast_id == s[i].breast_id);
    CHECK(back[i].patient_id == s[i].patient_id);
    CHECK(back[i].score == s[i].score);
    CHECK(back[i].label == s[i].label);
  }
  std::filesystem::remove(path);
}

TEST_CASE("train_classifier keeps the untrained model as a candidate and is deterministic") {
  std::vector<phantom::BreastSample> samples;
  for (int i = 0; i < 6; ++i) samples.push_back(mixed_sample(100 + static_cast<std::uint64_t>(i)));
  std::vector<prehoc::BreastDetections> train, val;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    std::vector<metrics::Detection> d{{mask_bounds(s.masks[0], s.extents), 0.9},
                                      {mask_bounds(s.masks[1], s.extents), 0.8},
                                      {empty_corner(s), 0.5}};
    (i < 4 ? train : val).push_back({&s, d});
  }
  // Validation needs both classes: drop the malignant detection of one breast.
  val[0].detections.erase(val[0].detections.begin());
  val[0].detections.pop_back();
  auto clean = val[0];
  phantom::BreastSample negative = *clean.sample;
  negative.y = 0;
  val[0].sample = &negative;

  prehoc::ClassifierConfig cfg;
  cfg.epochs = 3;
  const auto a = prehoc::train_classifier(train, val, cfg, 7);
  const auto b = prehoc::train_classifier(train, val, cfg, 7);
  CHECK(a.params == b.params);
  CHECK(a.positives == 4);
  CHECK(a.negatives == 8);
  REQUIRE(a.history.size() == 4);
  REQUIRE(a.history[0].val_auc.has_value());
  for (const auto& h : a.history)
    if (h.val_auc) CHECK(a.val_auc >= *h.val_auc);
}
