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

// Second pre-hoc stage: malignancy classification of detected regions and the
// max-rule breast score.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bscreen/metrics.hpp"
#include "bscreen/nn.hpp"
#include "bscreen/phantom.hpp"
#include "bscreen/presets.hpp"

namespace bscreen::prehoc {

using metrics::Detection;

/// 1 when the detection's best-matching lesion (Dice >= dice_min) is
/// malignant; 0 for benign matches and false positives.
std::vector<int> label_detections(std::span<const Detection> detections, const phantom::BreastSample& sample,
                                  double dice_min = 0.2);

/// Box contents resampled to the classifier input, shape [1, D, H, W].
Tensor<float> extract_patch(const phantom::BreastSample& sample, const env::BoundingVolume& box,
                            const nn::NetworkSpec& spec);

/// Malignancy probability per patch (eval mode). Throws ShapeError when a
/// patch does not match the network input.
std::vector<double> classify(const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                             std::span<const Tensor<float>> patches);

/// Max of the probabilities; 0 for no detections.
double breast_score(std::span<const double> probabilities);

struct BreastDetections {
  const phantom::BreastSample* sample = nullptr;
  std::vector<Detection> detections;
};

struct ClassifierConfig {
  int epochs = 30;
  int batch = 16;
  double lr = 0.01;  // plain SGD
  double dice_min = 0.2;
  presets::PresetOptions preset;
};

struct ClassifierEpoch {
  int epoch = 0;
  double train_loss = 0;
  std::optional<double> val_auc;
};

struct ClassifierResult {
  nn::NetworkSpec spec;
  nn::ParameterSet params;
  double val_auc = -1;
  int best_epoch = -1;
  int positives = 0, negatives = 0;
  std::vector<ClassifierEpoch> history;
};

/// Trains on every detection of `train`; keeps the epoch (0 = untrained) with
/// the best breast-wise validation AUC over `val`.
ClassifierResult train_classifier(std::span<const BreastDetections> train, std::span<const BreastDetections> val,
                                  const ClassifierConfig& config, std::uint64_t seed);

struct BreastScore {
  std::string breast_id;
  std::string patient_id;
  double score = 0;
  int label = 0;  // 1 when y = 2
};

std::vector<BreastScore> score_breasts(const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                                       std::span<const BreastDetections> breasts);

/// breast_id,patient_id,score,label
void write_scores_csv(const std::filesystem::path& path, std::span<const BreastScore> scores);
std::vector<BreastScore> read_scores_csv(const std::filesystem::path& path);

/// Breast-wise AUC of a score list (both classes required).
double breast_auc(std::span<const BreastScore> scores);
/// Patient-wise AUC with max aggregation over each patient's breasts.
double patient_auc(std::span<const BreastScore> scores);

}  // namespace bscreen::prehoc
