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

// Second post-hoc stage: a decoder on top of the frozen diagnosis network
// produces a per-voxel malignancy mask; positively diagnosed volumes are
// localized by thresholding it.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bscreen/env.hpp"
#include "bscreen/metrics.hpp"
#include "bscreen/nn.hpp"
#include "bscreen/phantom.hpp"
#include "bscreen/presets.hpp"

namespace bscreen::saliency {

struct EerResult {
  double threshold = 0.5;  // positive iff score > threshold
  double fpr = 0, fnr = 0;
  double rate() const { return 0.5 * (fpr + fnr); }
};

/// Threshold minimizing |FPR - FNR|. Among optimal thresholds the midpoint of
/// the optimal interval is returned (clamped to the score range when the
/// interval is unbounded). Throws std::invalid_argument for single-class input.
EerResult eer_threshold(std::span<const double> scores, std::span<const int> labels);

enum class DestroyForm {
  LogProbability,  // y * log p(malignant | (1 - m) * x)
  Probability,     // y * p(malignant | (1 - m) * x), bounded
};

struct LossWeights {
  double tv = 0.1;
  double area = 3;
  double preserve = 1;
  double destroy = 2.5;
  DestroyForm destroy_form = DestroyForm::LogProbability;
};

/// Sum of absolute forward differences along z, y and x over the voxel count.
template <class T>
ad::Var<T> total_variation(const ad::Var<T>& mask);
/// Mean mask value.
template <class T>
ad::Var<T> mask_area(const ad::Var<T>& mask);

template <class T>
struct LossParts {
  ad::Var<T> total, tv, area;
  ad::Var<T> preserve;  // mean over the batch of y * log p(malignant | m * x)
  ad::Var<T> destroy;   // mean over the batch of y * log p (or p) of malignant | (1 - m) * x
};

/// mask and x are [N, 1, D, H, W]; y holds screening labels (1 malignant).
/// total = tv*TV + area*A - preserve*P + destroy*D. Gradients flow into
/// `mask` only; the encoder runs in eval mode with constant parameters.
template <class T>
LossParts<T> saliency_loss(const ad::Var<T>& mask, const Tensor<T>& x, std::span<const int> y,
                           const nn::NetworkSpec& encoder, const nn::ParamVars<T>& encoder_vars,
                           const LossWeights& weights);

/// Frozen diagnosis network plus mask decoder.
struct SaliencyModel {
  nn::NetworkSpec encoder, decoder;
  nn::ParameterSet encoder_params, decoder_params;
};

/// Decoder input and skip tensors for a batch (eval-mode encoder, no graph).
template <class T>
struct EncoderFeatures {
  Tensor<T> deepest;
  std::vector<ad::Var<T>> skips;
};
template <class T>
EncoderFeatures<T> encoder_features(const nn::NetworkSpec& encoder, const nn::ParamVars<T>& encoder_vars,
                                    const Tensor<T>& x);

/// [N, 1, D, H, W] masks (eval mode).
Tensor<float> masks(const SaliencyModel& model, const Tensor<float>& x);
/// One volume's mask, laid out like BreastSample::volume.
std::vector<float> mask(const SaliencyModel& model, const phantom::BreastSample& sample);

struct SaliencyConfig {
  int epochs = 20;
  int batch = 8;
  double lr = 1e-3;  // Adam
  LossWeights weights;
  presets::PresetOptions preset;
};

struct SaliencyEpoch {
  int epoch = 0;
  double loss = 0, tv = 0, area = 0, preserve = 0, destroy = 0;
};

struct SaliencyResult {
  SaliencyModel model;
  std::vector<SaliencyEpoch> history;
};

/// Trains the decoder on `train`; the encoder parameters are never modified.
SaliencyResult train_saliency(std::span<const phantom::BreastSample* const> train, const nn::NetworkSpec& encoder,
                              const nn::ParameterSet& encoder_params, const SaliencyConfig& config,
                              std::uint64_t seed);

struct Component {
  env::BoundingVolume box;
  std::size_t voxels = 0;
  double mean_value = 0;  // mean mask value over the component
};

/// 6-connected components of `binary` in first-voxel order.
std::vector<Component> connected_components(std::span<const std::uint8_t> binary, const phantom::Extents& extents,
                                            std::span<const float> values = {});

struct LocalizeConfig {
  double zeta = 0.8;  // voxels with mask > zeta are salient
  std::size_t min_voxels = 8;
};

/// Components of the thresholded mask that reach min_voxels, as detections
/// scored by their mean mask value.
std::vector<metrics::Detection> mask_detections(std::span<const float> mask, const phantom::Extents& extents,
                                                const LocalizeConfig& config);

struct Localization {
  double diagnosis = 0;
  bool positive = false;  // diagnosis > eer threshold
  std::vector<metrics::Detection> detections;
};

/// Empty unless the volume is diagnosed positive.
Localization localize(const SaliencyModel& model, const phantom::BreastSample& sample, double eer_threshold,
                      const LocalizeConfig& config);

/// Mask file: "BSMK", u32 x, y, z, then x*y*z little-endian floats.
void write_mask(const std::filesystem::path& path, std::span<const float> mask, const phantom::Extents& extents);
std::vector<float> read_mask(const std::filesystem::path& path, phantom::Extents& extents);

}  // namespace bscreen::saliency
