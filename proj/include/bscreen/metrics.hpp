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

// ROC / AUC, detection matching at a Dice criterion, FROC, and curve output.

#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bscreen/env.hpp"

namespace bscreen::metrics {

struct ScoredCase {
  std::string id;
  double score = 0;
  int label = 0;  // 1 positive
};

/// P(random positive outscores random negative), ties counting one half.
double roc_auc(std::span<const double> scores, std::span<const int> labels);
double roc_auc(std::span<const ScoredCase> cases);

struct RocPoint {
  double threshold, tpr, fpr;
};
/// Positive iff score >= threshold; thresholds from +inf down through every distinct score.
std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels);

struct Match {
  int detection, lesion;
  double dice;
};

struct MatchResult {
  std::vector<Match> matches;
  std::vector<int> false_positives;  // unmatched detections
  std::vector<int> missed;           // unmatched lesions
  int true_positives() const { return static_cast<int>(matches.size()); }
};

/// `dice[d][l]` for detection d and lesion l < `lesions`. Pairs start greedy in descending
/// Dice; augmenting paths then grow the matching until no further detection
/// can be paired, so the TP count is the largest possible.
MatchResult match_detections(const std::vector<std::vector<double>>& dice, std::size_t lesions,
                             double dice_min = 0.2);

struct Detection {
  env::BoundingVolume box;
  double score = 0;
};

struct BreastEval {
  std::vector<Detection> detections;
  const std::vector<phantom::Mask>* lesion_masks = nullptr;  // lesions that count
  phantom::Extents extents;
  bool diagnosed_positive = true;
};

struct PatientEval {
  std::string patient_id;
  std::vector<BreastEval> breasts;
  bool diagnosed_positive() const;
};

struct FrocPoint {
  double threshold, tpr, fpp;
};

enum class FrocScope {
  AllPatients,       // (A)
  PositivePatients,  // (+): only patients with a positively diagnosed breast
};

/// One point per threshold; detections with score >= threshold are kept.
std::vector<FrocPoint> froc(std::span<const PatientEval> patients, std::span<const double> thresholds,
                            double dice_min = 0.2, FrocScope scope = FrocScope::AllPatients);
/// Thresholds at +inf and at every distinct detection score, descending.
std::vector<double> froc_thresholds(std::span<const PatientEval> patients);
/// Highest TPR among points with FPP <= max_fpp (0 if none).
double tpr_at_fpp(std::span<const FrocPoint> curve, double max_fpp);

double patient_score(std::span<const double> breast_scores);

/// Dice matrix between boxes and lesion masks.
std::vector<std::vector<double>> dice_matrix(std::span<const Detection> detections,
                                             const std::vector<phantom::Mask>& masks, const phantom::Extents& e);

// Output -------------------------------------------------------------------

void write_froc_csv(const std::filesystem::path& path, std::span<const FrocPoint> curve);
void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> curve);

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;
};
/// Minimal SVG line plot.
std::string svg_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                     std::span<const Series> series);

}  // namespace bscreen::metrics
