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

// Bounding-volume search environment: box state, nine actions, Dice-based
// rewards and the residual-encoder observation embedding.

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "bscreen/nn.hpp"
#include "bscreen/phantom.hpp"
#include "bscreen/presets.hpp"

namespace bscreen::env {

using phantom::Extents;
using phantom::Mask;

/// Half-open voxel box [x0, x1) x [y0, y1) x [z0, z1).
struct BoundingVolume {
  int x0 = 0, y0 = 0, z0 = 0, x1 = 0, y1 = 0, z1 = 0;

  int extent(int axis) const;
  std::size_t voxels() const;
  bool valid() const { return x0 < x1 && y0 < y1 && z0 < z1; }
  bool inside(const Extents& e) const;
  bool operator==(const BoundingVolume&) const = default;
};

struct BoundingVolumeHash {
  std::size_t operator()(const BoundingVolume& b) const;
};

enum class Action : std::uint8_t {
  MoveXPos, MoveXNeg, MoveYPos, MoveYNeg, MoveZPos, MoveZNeg, Grow, Shrink, Trigger
};
inline constexpr int kActionCount = 9;
inline constexpr std::array<Action, kActionCount> kAllActions = {
    Action::MoveXPos, Action::MoveXNeg, Action::MoveYPos, Action::MoveYNeg, Action::MoveZPos,
    Action::MoveZNeg, Action::Grow,     Action::Shrink,   Action::Trigger};
std::string_view to_string(Action a);

struct EnvConfig {
  int min_extent = 4;
  double trigger_reward = 10;     // eta
  double trigger_threshold = 0.2; // tau_w
};

/// Translations move one axis by max(1, floor(extent / 3)); Grow/Shrink move
/// every face by max(1, floor(extent / 6)). The result is clamped to the
/// lattice and to the minimum extent. Trigger is rejected.
BoundingVolume apply_action(const BoundingVolume& b, Action a, const Extents& lattice, int min_extent = 4);

/// Box covering `fraction` of each axis, centred in the lattice.
BoundingVolume centered_box(const Extents& lattice, double fraction);
/// Tight box around the set voxels; invalid (all zero) for an empty mask.
BoundingVolume bounding_box(const Mask& mask, const Extents& e);
Mask rasterize(const BoundingVolume& b, const Extents& e);

/// Summed-volume table answering "how many mask voxels lie in this box" in O(1).
class VoxelCounter {
 public:
  VoxelCounter() = default;
  VoxelCounter(const Mask& mask, const Extents& e);
  std::size_t count(const BoundingVolume& b) const;
  std::size_t total() const { return total_; }

 private:
  Extents e_;
  std::vector<std::uint32_t> table_;
  std::size_t total_ = 0;
};

/// 2|A n B| / (|A| + |B|); both empty gives 0.
double dice(const Mask& a, const Mask& b);
double dice(const BoundingVolume& a, const BoundingVolume& b);
double dice(const BoundingVolume& b, const VoxelCounter& mask);
double dice(const BoundingVolume& b, const Mask& mask, const Extents& e);

/// Ground-truth lesions of one volume. Dice against the set is the maximum over lesions.
class LesionTargets {
 public:
  LesionTargets() = default;
  LesionTargets(const std::vector<Mask>& masks, const Extents& e);
  double dice(const BoundingVolume& b) const;
  bool empty() const { return lesions_.empty(); }

 private:
  std::vector<VoxelCounter> lesions_;
};

/// Sign of the Dice change for moves; +eta / -eta for Trigger against tau_w.
double reward_from_dice(Action a, double dice_before, double dice_after, const EnvConfig& config = {});
double step_reward(const BoundingVolume& before, Action a, const BoundingVolume& after, const LesionTargets& targets,
                   const EnvConfig& config = {});

/// Trilinear resample of the box contents to `out` = [D, H, W].
Tensor<float> resample_box(std::span<const float> volume, const Extents& e, const BoundingVolume& b,
                           const Shape& out);

/// Observation embedding: resampled box -> patch encoder (eval mode) ->
/// penultimate activation. Results are cached per (volume key, box).
class Embedder {
 public:
  Embedder() = default;
  Embedder(nn::NetworkSpec encoder, nn::ParameterSet params, int min_extent = 4);

  std::vector<float> embed(std::span<const float> volume, const Extents& e, const BoundingVolume& b) const;
  /// Cached variant; `key` identifies the volume.
  const std::vector<float>& embed(std::size_t key, std::span<const float> volume, const Extents& e,
                                  const BoundingVolume& b);
  int dimension() const;
  void clear_cache() { cache_.clear(); }
  const nn::NetworkSpec& spec() const { return spec_; }
  const nn::ParameterSet& params() const { return params_; }

 private:
  nn::NetworkSpec spec_;
  nn::ParameterSet params_;
  int min_extent_ = 4;
  std::unordered_map<std::size_t, std::unordered_map<BoundingVolume, std::vector<float>, BoundingVolumeHash>> cache_;
};

struct EncoderConfig {
  int positives = 800;
  int negatives = 800;
  double positive_dice = 0.6;
  int epochs = 12;
  int batch = 32;
  double lr = 1e-3;  // Adam
  double val_fraction = 0.2;
  int min_extent = 4;
  presets::PresetOptions preset;
};

struct EncoderResult {
  nn::NetworkSpec spec;
  nn::ParameterSet params;
  double val_accuracy = 0;
};

/// Lesion-vs-background patch classifier over randomly sampled boxes. A box is
/// positive when its Dice with some lesion exceeds `positive_dice`.
EncoderResult train_patch_encoder(std::span<const phantom::BreastSample* const> trainset, const EncoderConfig& config,
                                  std::uint64_t seed);

}  // namespace bscreen::env
