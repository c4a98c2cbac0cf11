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
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bscreen/metrics.hpp"
#include "bscreen/rng.hpp"

using namespace bscreen;
using env::BoundingVolume;
using metrics::Detection;

#ifndef BSCREEN_TEST_DATA
#define BSCREEN_TEST_DATA "tests/data"
#endif

namespace {

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& l) {
  double wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (l[i] == 1 && l[j] == 0) {
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
  return wins / pairs;
}

// Largest matching by trying every assignment of detections to lesions.
int exhaustive_max_tp(const std::vector<std::vector<double>>& dice, double dmin, std::size_t d,
                      std::vector<char>& used) {
  if (d == dice.size()) return 0;
  int best = exhaustive_max_tp(dice, dmin, d + 1, used);
  for (std::size_t l = 0; l < dice[d].size(); ++l)
    if (!used[l] && dice[d][l] >= dmin) {
      used[l] = 1;
      best = std::max(best, 1 + exhaustive_max_tp(dice, dmin, d + 1, used));
      used[l] = 0;
    }
  return best;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

struct Fixture {
  phantom::Extents e{16, 16, 8};
  std::vector<std::vector<phantom::Mask>> masks;
  std::vector<metrics::PatientEval> patients;
};

// Three patients, four lesions; every Dice value is 0 or 1.
Fixture golden_fixture() {
  Fixture f;
  auto box = [&](BoundingVolume b) { return env::rasterize(b, f.e); };
  const BoundingVolume l1{0, 0, 0, 4, 4, 4}, l3{8, 8, 4, 12, 12, 8}, l4{4, 4, 0, 8, 8, 4};
  f.masks = {{box(l1)}, {box(l1), box(l3)}, {}, {box(l4)}};
  f.patients.resize(3);
  f.patients[0].patient_id = "A";
  f.patients[0].breasts.push_back({{{l1, 0.9}, {{8, 8, 0, 12, 12, 4}, 0.4}}, &f.masks[0], f.e, true});
  f.patients[1].patient_id = "B";
  f.patients[1].breasts.push_back({{{l3, 0.7}, {l3, 0.5}}, &f.masks[1], f.e, true});
  f.patients[2].patient_id = "C";
  f.patients[2].breasts.push_back({{{{10, 10, 0, 14, 14, 4}, 0.6}}, &f.masks[2], f.e, true});
  f.patients[2].breasts.push_back({{{l4, 0.2}}, &f.masks[3], f.e, true});
  return f;
}

}  // namespace

TEST_CASE("roc_auc examples") {
  CHECK(metrics::roc_auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
  CHECK(metrics::roc_auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}) == 0.0);
  CHECK(metrics::roc_auc(std::vector<double>{0.5, 0.5}, std::vector<int>{1, 0}) == 0.5);
  CHECK_THROWS(metrics::roc_auc(std::vector<double>{0.5, 0.6}, std::vector<int>{1, 1}));
  CHECK_THROWS(metrics::roc_auc(std::vector<double>{NAN, 0.6}, std::vector<int>{1, 0}));
}

TEST_CASE("roc_auc matches the pairwise oracle, ties included") {
  Rng rng(17);
  for (int t = 0; t < 30; ++t) {
    std::vector<double> s(50);
    std::vector<int> l(50);
    for (std::size_t i = 0; i < 50; ++i) {
      s[i] = std::round(rng.uniform() * 10) / 10;  // coarse grid forces ties
      l[i] = rng.bernoulli(0.4);
    }
    l[0] = 1;
    l[1] = 0;
    CHECK(std::abs(metrics::roc_auc(s, l) - pairwise_auc(s, l)) < 1e-12);
  }
}

TEST_CASE("roc_auc is invariant under strictly monotone transforms") {
  Rng rng(5);
  std::vector<double> s(40), t(40);
  std::vector<int> l(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = rng.uniform();
    t[i] = std::exp(3 * s[i]) - 7;
    l[i] = i % 3 == 0;
  }
  CHECK(metrics::roc_auc(s, l) == metrics::roc_auc(t, l));
}

TEST_CASE("roc_curve runs from (0,0) to (1,1)") {
  const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
  const std::vector<int> l{0, 0, 1, 1};
  const auto c = metrics::roc_curve(s, l);
  REQUIRE(c.size() == 5);
  CHECK(c.front().tpr == 0);
  CHECK(c.front().fpr == 0);
  CHECK(c.back().tpr == 1);
  CHECK(c.back().fpr == 1);
  // Trapezoidal area equals the rank AUC.
  double area = 0;
  for (std::size_t i = 1; i < c.size(); ++i) area += (c[i].fpr - c[i - 1].fpr) * (c[i].tpr + c[i - 1].tpr) / 2;
  CHECK(area == doctest::Approx(metrics::roc_auc(s, l)));
}

TEST_CASE("match_detections examples") {
  auto m = metrics::match_detections({{0.25}}, 1);
  CHECK(m.true_positives() == 1);
  CHECK(m.false_positives.empty());
  m = metrics::match_detections({{0.15}}, 1);
  CHECK(m.true_positives() == 0);
  CHECK(m.false_positives.size() == 1);
  CHECK(m.missed.size() == 1);
  m = metrics::match_detections({{0.3}, {0.9}}, 1);
  CHECK(m.true_positives() == 1);
  CHECK(m.false_positives.size() == 1);
  CHECK(m.matches[0].detection == 1);  // higher Dice wins
  // Pure greedy would pair d0-l0 and stop at one TP.
  m = metrics::match_detections({{0.9, 0.5}, {0.3, 0.0}}, 2);
  CHECK(m.true_positives() == 2);
  CHECK(metrics::match_detections({}, 0).true_positives() == 0);
  CHECK(metrics::match_detections({}, 3).missed.size() == 3);
  CHECK_THROWS(metrics::match_detections({{0.5}}, 2));
}

TEST_CASE("match_detections reaches the exhaustive maximum") {
  Rng rng(23);
  for (int t = 0; t < 500; ++t) {
    const auto nd = static_cast<std::size_t>(rng.uniform_int(0, 6));
    const auto nl = static_cast<std::size_t>(rng.uniform_int(0, 4));
    std::vector<std::vector<double>> d(nd, std::vector<double>(nl));
    for (auto& row : d)
      for (auto& v : row) v = rng.bernoulli(0.5) ? rng.uniform(0.0, 1.0) : 0.0;
    const auto m = metrics::match_detections(d, nl, 0.2);
    std::vector<char> used(nl, 0);
    CHECK(m.true_positives() == exhaustive_max_tp(d, 0.2, 0, used));
    CHECK(m.true_positives() <= static_cast<int>(nl));
    CHECK(m.true_positives() + m.false_positives.size() == nd);
    CHECK(m.true_positives() + m.missed.size() == nl);
    std::vector<int> seen_l;
    for (const auto& p : m.matches) {
      CHECK(p.dice >= 0.2);
      seen_l.push_back(p.lesion);
    }
    std::sort(seen_l.begin(), seen_l.end());
    CHECK(std::adjacent_find(seen_l.begin(), seen_l.end()) == seen_l.end());
  }
}

TEST_CASE("froc on the hand-enumerated fixture matches the golden file") {
  const auto f = golden_fixture();
  const auto curve = metrics::froc(f.patients, metrics::froc_thresholds(f.patients));
  const auto out = std::filesystem::temp_directory_path() / "bscreen_froc_golden.csv";
  metrics::write_froc_csv(out, curve);
  CHECK(read_text(out) == read_text(std::filesystem::path(BSCREEN_TEST_DATA) / "froc_golden.csv"));
  std::filesystem::remove(out);
}

TEST_CASE("froc trivial cases and monotonicity") {
  const auto f = golden_fixture();
  const std::vector<double> above{2.0};
  const auto none = metrics::froc(f.patients, above);
  CHECK(none[0].tpr == 0);
  CHECK(none[0].fpp == 0);

  // Perfect detections: one exact box per lesion.
  auto perfect = f.patients;
  for (auto& p : perfect)
    for (auto& b : p.breasts) {
      b.detections.clear();
      for (const auto& m : *b.lesion_masks) b.detections.push_back({env::bounding_box(m, b.extents), 0.5});
    }
  const std::vector<double> zero{0.0};
  CHECK(metrics::froc(perfect, zero)[0].tpr == 1.0);
  CHECK(metrics::froc(perfect, zero)[0].fpp == 0.0);

  const auto curve = metrics::froc(f.patients, metrics::froc_thresholds(f.patients));
  for (std::size_t i = 1; i < curve.size(); ++i) {
    CHECK(curve[i].threshold < curve[i - 1].threshold);
    CHECK(curve[i].tpr >= curve[i - 1].tpr);
    CHECK(curve[i].fpp >= curve[i - 1].fpp);
  }
  CHECK(metrics::tpr_at_fpp(curve, 0.0) == 0.5);
  CHECK(metrics::tpr_at_fpp(curve, 3.0) == 0.75);
}

TEST_CASE("(+) scenario restricts lesions and patients to positive diagnoses") {
  auto f = golden_fixture();
  // Patient C missed by the classifier: its detections vanish with the gate.
  for (auto& b : f.patients[2].breasts) {
    b.diagnosed_positive = false;
    b.detections.clear();
  }
  const auto t = metrics::froc_thresholds(f.patients);
  const auto all = metrics::froc(f.patients, t, 0.2, metrics::FrocScope::AllPatients);
  const auto pos = metrics::froc(f.patients, t, 0.2, metrics::FrocScope::PositivePatients);
  REQUIRE(all.size() == pos.size());
  CHECK(all.back().tpr == 0.5);  // 2 of 4
  CHECK(pos.back().tpr == doctest::Approx(2.0 / 3));
  CHECK(pos.back().fpp == 1.0);  // 2 FPs over 2 patients
  for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i].tpr <= pos[i].tpr);
}

TEST_CASE("(A) never beats (+) on random gated fixtures") {
  Rng rng(31);
  const phantom::Extents e{12, 12, 6};
  for (int t = 0; t < 40; ++t) {
    std::vector<std::vector<phantom::Mask>> masks(10);
    std::vector<metrics::PatientEval> patients(5);
    for (int p = 0; p < 5; ++p) {
      patients[static_cast<std::size_t>(p)].patient_id = std::to_string(p);
      for (int s = 0; s < 2; ++s) {
        auto& m = masks[static_cast<std::size_t>(2 * p + s)];
        for (int l = rng.uniform_int(0, 2); l > 0; --l) {
          const int x = rng.uniform_int(0, 8), y = rng.uniform_int(0, 8), z = rng.uniform_int(0, 3);
          m.push_back(env::rasterize({x, y, z, x + 4, y + 4, z + 3}, e));
        }
        metrics::BreastEval b{{}, &m, e, rng.bernoulli(0.6)};
        if (b.diagnosed_positive)
          for (int d = rng.uniform_int(0, 3); d > 0; --d) {
            const int x = rng.uniform_int(0, 8), y = rng.uniform_int(0, 8), z = rng.uniform_int(0, 3);
            b.detections.push_back({{x, y, z, x + 4, y + 4, z + 3}, rng.uniform()});
          }
        patients[static_cast<std::size_t>(p)].breasts.push_back(std::move(b));
      }
    }
    const auto th = metrics::froc_thresholds(patients);
    const auto all = metrics::froc(patients, th, 0.2, metrics::FrocScope::AllPatients);
    const auto pos = metrics::froc(patients, th, 0.2, metrics::FrocScope::PositivePatients);
    for (std::size_t i = 0; i < all.size(); ++i) CHECK(all[i].tpr <= pos[i].tpr);
  }
}

TEST_CASE("patient_score is the breast maximum") {
  CHECK(metrics::patient_score(std::vector<double>{0.3, 0.8}) == 0.8);
  CHECK(metrics::patient_score(std::vector<double>{0.5}) == 0.5);
  CHECK_THROWS(metrics::patient_score(std::vector<double>{}));
}

TEST_CASE("patient-wise AUC equals breast-wise AUC over the deciding breasts") {
  Rng rng(12);
  std::vector<double> patient_scores, deciding_scores;
  std::vector<int> labels;
  for (int p = 0; p < 30; ++p) {
    const int y = p % 2;
    const double deciding = rng.uniform(0.2, 1.0);
    const double other = rng.uniform(0.0, deciding);  // healthy breast scores lower
    patient_scores.push_back(metrics::patient_score(std::vector<double>{other, deciding}));
    deciding_scores.push_back(deciding);
    labels.push_back(y);
  }
  CHECK(metrics::roc_auc(patient_scores, labels) == metrics::roc_auc(deciding_scores, labels));
}

TEST_CASE("curve output") {
  const auto dir = std::filesystem::temp_directory_path() / "bscreen_curves";
  const std::vector<metrics::RocPoint> roc{{INFINITY, 0, 0}, {0.5, 0.5, 0.25}, {0.1, 1, 1}};
  metrics::write_roc_csv(dir / "roc.csv", roc);
  CHECK(read_text(dir / "roc.csv") == "threshold,tpr,fpr\ninf,0,0\n0.5,0.5,0.25\n0.1,1,1\n");
  const std::vector<metrics::Series> series{{"a", {{0, 0}, {1, 1}}}};
  const auto svg = metrics::svg_plot("t", "x", "y", series);
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("polyline") != std::string::npos);
  std::filesystem::remove_all(dir);
}
