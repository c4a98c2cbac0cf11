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

// Procedural breast-like volumes with benign and malignant blob lesions.
// Volumes are stored z-major: index = (z * ny + y) * nx + x.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bscreen/tensor.hpp"

namespace bscreen::phantom {

struct Extents {
  int x = 32, y = 32, z = 16;

  std::size_t voxels() const { return static_cast<std::size_t>(x) * y * z; }
  std::size_t index(int i, int j, int k) const { return (static_cast<std::size_t>(k) * y + j) * x + i; }
  bool operator==(const Extents&) const = default;
};

enum class LesionClass : std::uint8_t { Benign = 0, Malignant = 1 };
enum class Side : std::uint8_t { Left = 0, Right = 1 };

struct LesionSpec {
  std::array<double, 3> center{};  // voxel coordinates (x, y, z)
  std::array<double, 3> radii{};
  LesionClass cls = LesionClass::Benign;
  double contrast = 0;
  double roughness = 0;
  std::uint64_t shape_seed = 0;  // drives the boundary perturbation
};

using Mask = std::vector<std::uint8_t>;  // 0/1 per voxel

struct BreastSample {
  std::string patient_id;
  Side side = Side::Left;
  Extents extents;
  std::vector<float> volume;  // values in [0, 1]
  std::vector<LesionSpec> lesions;
  std::vector<Mask> masks;  // one per lesion
  int y = 0;                // 0 none, 1 benign only, 2 at least one malignant
  bool masks_overlap = false;

  std::string id() const { return patient_id + (side == Side::Left ? "L" : "R"); }
  std::vector<LesionClass> lesion_classes() const;
  /// The volume as a [1, 1, z, y, x] network input.
  Tensor<float> as_input() const;
};

struct PhantomConfig {
  Extents extents;
  std::array<double, 3> lesion_count_probs{0.4, 0.45, 0.15};  // P(0), P(1), P(2) lesions
  double malignant_prob = 0.45;
  double radius_min = 2.5, radius_max = 4.5;  // in-plane; the z radius is half
  double benign_contrast_min = 0.18, benign_contrast_max = 0.28;
  double malignant_contrast_min = 0.30, malignant_contrast_max = 0.42;
  double benign_roughness = 0.08, malignant_roughness = 0.35;
  double background_level = 0.3;
  double gradient_amplitude = 0.1;
  double texture_noise = 0.06;  // std of the smoothed background texture
  double white_noise = 0.02;

  /// Larger, high-contrast, at most one lesion per breast.
  static PhantomConfig easy();
};

/// Forces the lesion count and classes instead of sampling them.
struct LesionOverride {
  std::vector<LesionClass> classes;
};

BreastSample generate_phantom(std::uint64_t seed, const PhantomConfig& config);
BreastSample generate_phantom(std::uint64_t seed, const PhantomConfig& config, const LesionOverride& lesions);

int label_breast(std::span<const LesionClass> labels);

/// Voxels inside the (possibly rough) ellipsoid.
Mask rasterize_lesion(const LesionSpec& lesion, const Extents& extents);

struct DatasetSplit {
  std::vector<std::string> train, val, test;
};

/// Ratios must sum to one; sizes use largest-remainder rounding.
DatasetSplit make_split(std::vector<std::string> patients, std::array<double, 3> ratios, std::uint64_t seed);
/// 45 / 13 / 59 out of 117.
std::array<double, 3> default_split_ratios();

struct Dataset {
  std::vector<BreastSample> samples;  // two per patient, left then right
  DatasetSplit split;

  std::vector<const BreastSample*> subset(const std::vector<std::string>& patients) const;
  std::vector<const BreastSample*> train() const { return subset(split.train); }
  std::vector<const BreastSample*> val() const { return subset(split.val); }
  std::vector<const BreastSample*> test() const { return subset(split.test); }
};

Dataset generate_dataset(std::uint64_t seed, const PhantomConfig& config, int patients = 117,
                         std::array<double, 3> ratios = default_split_ratios());

// Run-length encoding of binary masks: alternating run lengths, starting with a
// (possibly empty) run of zeros.
std::vector<std::uint32_t> rle_encode(const Mask& mask);
Mask rle_decode(std::span<const std::uint32_t> runs, std::size_t voxels);

/// Writes manifest.csv, lesions.csv, volumes.bin and masks.bin under `dir`.
void save_dataset(const std::filesystem::path& dir, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace bscreen::phantom
