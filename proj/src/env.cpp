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

#include "bscreen/env.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bscreen/log.hpp"
#include "bscreen/optim.hpp"
#include "bscreen/rng.hpp"

namespace bscreen::env {

namespace {

std::array<int, 3> lows(const BoundingVolume& b) { return {b.x0, b.y0, b.z0}; }
std::array<int, 3> highs(const BoundingVolume& b) { return {b.x1, b.y1, b.z1}; }
std::array<int, 3> dims(const Extents& e) { return {e.x, e.y, e.z}; }

BoundingVolume from(const std::array<int, 3>& lo, const std::array<int, 3>& hi) {
  return {lo[0], lo[1], lo[2], hi[0], hi[1], hi[2]};
}

// Moves [lo, hi) inside [0, n) without changing its length (when it fits).
void shift_inside(int& lo, int& hi, int n) {
  if (hi - lo > n) {
    lo = 0;
    hi = n;
    return;
  }
  if (lo < 0) {
    hi -= lo;
    lo = 0;
  }
  if (hi > n) {
    lo -= hi - n;
    hi = n;
  }
}

}  // namespace

int BoundingVolume::extent(int axis) const {
  switch (axis) {
    case 0: return x1 - x0;
    case 1: return y1 - y0;
    case 2: return z1 - z0;
  }
  throw std::out_of_range("axis");
}

std::size_t BoundingVolume::voxels() const {
  if (!valid()) return 0;
  return static_cast<std::size_t>(x1 - x0) * static_cast<std::size_t>(y1 - y0) * static_cast<std::size_t>(z1 - z0);
}

bool BoundingVolume::inside(const Extents& e) const {
  return valid() && x0 >= 0 && y0 >= 0 && z0 >= 0 && x1 <= e.x && y1 <= e.y && z1 <= e.z;
}

std::size_t BoundingVolumeHash::operator()(const BoundingVolume& b) const {
  std::size_t h = 1469598103934665603ull;
  for (int v : {b.x0, b.y0, b.z0, b.x1, b.y1, b.z1}) h = (h ^ static_cast<std::size_t>(v + 1024)) * 1099511628211ull;
  return h;
}

std::string_view to_string(Action a) {
  static constexpr std::string_view names[] = {"move_x+", "move_x-", "move_y+", "move_y-", "move_z+",
                                               "move_z-", "grow",    "shrink",  "trigger"};
  return names[static_cast<int>(a)];
}

BoundingVolume apply_action(const BoundingVolume& b, Action a, const Extents& lattice, int min_extent) {
  if (a == Action::Trigger) throw std::invalid_argument("apply_action: trigger does not move the box");
  auto lo = lows(b), hi = highs(b);
  const auto n = dims(lattice);
  const int code = static_cast<int>(a);
  if (code < 6) {
    const auto axis = static_cast<std::size_t>(code / 2);
    const int sign = code % 2 == 0 ? 1 : -1;
    const int step = std::max(1, (hi[axis] - lo[axis]) / 3);
    lo[axis] += sign * step;
    hi[axis] += sign * step;
    shift_inside(lo[axis], hi[axis], n[axis]);
    return from(lo, hi);
  }
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const int ext = hi[axis] - lo[axis];
    const int step = std::max(1, ext / 6);
    if (a == Action::Grow) {
      lo[axis] = std::max(0, lo[axis] - step);
      hi[axis] = std::min(n[axis], hi[axis] + step);
    } else {
      const int old_lo = lo[axis], old_hi = hi[axis];
      lo[axis] += step;
      hi[axis] -= step;
      const int m = std::min(min_extent, n[axis]);
      if (hi[axis] - lo[axis] < m) {
        lo[axis] = (old_lo + old_hi - m) / 2;
        hi[axis] = lo[axis] + m;
        shift_inside(lo[axis], hi[axis], n[axis]);
      }
    }
  }
  return from(lo, hi);
}

BoundingVolume centered_box(const Extents& e, double fraction) {
  std::array<int, 3> lo{}, hi{};
  const auto n = dims(e);
  for (std::size_t a = 0; a < 3; ++a) {
    const int ext = std::max(1, static_cast<int>(std::lround(n[a] * fraction)));
    lo[a] = (n[a] - ext) / 2;
    hi[a] = lo[a] + ext;
  }
  return from(lo, hi);
}

BoundingVolume bounding_box(const Mask& mask, const Extents& e) {
  std::array<int, 3> lo{e.x, e.y, e.z}, hi{-1, -1, -1};
  for (int k = 0; k < e.z; ++k)
    for (int j = 0; j < e.y; ++j)
      for (int i = 0; i < e.x; ++i)
        if (mask[e.index(i, j, k)]) {
          const int c[3] = {i, j, k};
          for (std::size_t a = 0; a < 3; ++a) {
            lo[a] = std::min(lo[a], c[a]);
            hi[a] = std::max(hi[a], c[a] + 1);
          }
        }
  if (hi[0] < 0) return {};
  return from(lo, hi);
}

Mask rasterize(const BoundingVolume& b, const Extents& e) {
  Mask m(e.voxels(), 0);
  for (int k = std::max(0, b.z0); k < std::min(e.z, b.z1); ++k)
    for (int j = std::max(0, b.y0); j < std::min(e.y, b.y1); ++j)
      for (int i = std::max(0, b.x0); i < std::min(e.x, b.x1); ++i) m[e.index(i, j, k)] = 1;
  return m;
}

VoxelCounter::VoxelCounter(const Mask& mask, const Extents& e) : e_(e) {
  if (mask.size() != e.voxels()) throw std::invalid_argument("VoxelCounter: mask size does not match extents");
  const std::size_t X = static_cast<std::size_t>(e.x) + 1, Y = static_cast<std::size_t>(e.y) + 1;
  table_.assign(X * Y * (static_cast<std::size_t>(e.z) + 1), 0);
  auto at = [&](int i, int j, int k) -> std::uint32_t& {
    return table_[(static_cast<std::size_t>(k) * Y + static_cast<std::size_t>(j)) * X + static_cast<std::size_t>(i)];
  };
  for (int k = 1; k <= e.z; ++k)
    for (int j = 1; j <= e.y; ++j)
      for (int i = 1; i <= e.x; ++i) {
        at(i, j, k) = (mask[e.index(i - 1, j - 1, k - 1)] ? 1u : 0u) + at(i - 1, j, k) + at(i, j - 1, k) +
                      at(i, j, k - 1) - at(i - 1, j - 1, k) - at(i - 1, j, k - 1) - at(i, j - 1, k - 1) +
                      at(i - 1, j - 1, k - 1);
      }
  total_ = at(e.x, e.y, e.z);
}

std::size_t VoxelCounter::count(const BoundingVolume& b) const {
  const int x0 = std::clamp(b.x0, 0, e_.x), x1 = std::clamp(b.x1, 0, e_.x);
  const int y0 = std::clamp(b.y0, 0, e_.y), y1 = std::clamp(b.y1, 0, e_.y);
  const int z0 = std::clamp(b.z0, 0, e_.z), z1 = std::clamp(b.z1, 0, e_.z);
  if (x0 >= x1 || y0 >= y1 || z0 >= z1) return 0;
  const std::size_t X = static_cast<std::size_t>(e_.x) + 1, Y = static_cast<std::size_t>(e_.y) + 1;
  auto at = [&](int i, int j, int k) -> std::int64_t {
    return table_[(static_cast<std::size_t>(k) * Y + static_cast<std::size_t>(j)) * X + static_cast<std::size_t>(i)];
  };
  const std::int64_t v = at(x1, y1, z1) - at(x0, y1, z1) - at(x1, y0, z1) - at(x1, y1, z0) + at(x0, y0, z1) +
                         at(x0, y1, z0) + at(x1, y0, z0) - at(x0, y0, z0);
  return static_cast<std::size_t>(v);
}

namespace {
double dice_from_counts(std::size_t overlap, std::size_t a, std::size_t b) {
  if (a + b == 0) {
    log::debug("dice of two empty regions taken as 0");
    return 0;
  }
  return 2.0 * static_cast<double>(overlap) / static_cast<double>(a + b);
}
}  // namespace

double dice(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) throw std::invalid_argument("dice: masks on different lattices");
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    both += a[i] && b[i];
  }
  return dice_from_counts(both, na, nb);
}

double dice(const BoundingVolume& a, const BoundingVolume& b) {
  const BoundingVolume i{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::max(a.z0, b.z0),
                         std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::min(a.z1, b.z1)};
  return dice_from_counts(i.voxels(), a.voxels(), b.voxels());
}

double dice(const BoundingVolume& b, const VoxelCounter& mask) {
  return dice_from_counts(mask.count(b), b.voxels(), mask.total());
}

double dice(const BoundingVolume& b, const Mask& mask, const Extents& e) { return dice(rasterize(b, e), mask); }

LesionTargets::LesionTargets(const std::vector<Mask>& masks, const Extents& e) {
  for (const auto& m : masks) lesions_.emplace_back(m, e);
}

double LesionTargets::dice(const BoundingVolume& b) const {
  double best = 0;
  for (const auto& l : lesions_) best = std::max(best, env::dice(b, l));
  return best;
}

double reward_from_dice(Action a, double before, double after, const EnvConfig& c) {
  if (a == Action::Trigger) return after >= c.trigger_threshold ? c.trigger_reward : -c.trigger_reward;
  if (after > before) return 1;
  if (after < before) return -1;
  return 0;
}

double step_reward(const BoundingVolume& before, Action a, const BoundingVolume& after, const LesionTargets& t,
                   const EnvConfig& c) {
  return reward_from_dice(a, t.dice(before), t.dice(after), c);
}

Tensor<float> resample_box(std::span<const float> volume, const Extents& e, const BoundingVolume& b,
                           const Shape& out) {
  if (out.size() != 3) throw ShapeError("resample_box: output must be [D, H, W]");
  if (!b.valid()) throw std::invalid_argument("resample_box: empty box");
  const int od = out[0], oh = out[1], ow = out[2];
  // Source coordinate of each output sample along one axis, with its two
  // neighbours and interpolation weight.
  struct Tap {
    int i0, i1;
    float w;
  };
  auto taps = [](int lo, int ext, int n_out, int n_in) {
    std::vector<Tap> t(static_cast<std::size_t>(n_out));
    for (int o = 0; o < n_out; ++o) {
      const double s = std::clamp(lo + (o + 0.5) * ext / n_out - 0.5, 0.0, static_cast<double>(n_in - 1));
      const int i0 = static_cast<int>(std::floor(s));
      const int i1 = std::min(i0 + 1, n_in - 1);
      t[static_cast<std::size_t>(o)] = {i0, i1, static_cast<float>(s - i0)};
    }
    return t;
  };
  const auto tz = taps(b.z0, b.extent(2), od, e.z), ty = taps(b.y0, b.extent(1), oh, e.y),
             tx = taps(b.x0, b.extent(0), ow, e.x);
  Tensor<float> r(out);
  std::size_t idx = 0;
  for (const auto& z : tz)
    for (const auto& y : ty)
      for (const auto& x : tx) {
        auto v = [&](int i, int j, int k) { return volume[e.index(i, j, k)]; };
        const float c00 = v(x.i0, y.i0, z.i0) * (1 - x.w) + v(x.i1, y.i0, z.i0) * x.w;
        const float c10 = v(x.i0, y.i1, z.i0) * (1 - x.w) + v(x.i1, y.i1, z.i0) * x.w;
        const float c01 = v(x.i0, y.i0, z.i1) * (1 - x.w) + v(x.i1, y.i0, z.i1) * x.w;
        const float c11 = v(x.i0, y.i1, z.i1) * (1 - x.w) + v(x.i1, y.i1, z.i1) * x.w;
        const float c0 = c00 * (1 - y.w) + c10 * y.w, c1 = c01 * (1 - y.w) + c11 * y.w;
        r[idx++] = c0 * (1 - z.w) + c1 * z.w;
      }
  return r;
}

Embedder::Embedder(nn::NetworkSpec encoder, nn::ParameterSet params, int min_extent)
    : spec_(std::move(encoder)), params_(std::move(params)), min_extent_(min_extent) {
  params_.training = false;
  if (spec_.input.size() != 4 || spec_.input[0] != 1) throw ShapeError("embedder needs a [1, D, H, W] encoder");
}

int Embedder::dimension() const { return static_cast<int>(numel(nn::penultimate_shape(spec_))); }

std::vector<float> Embedder::embed(std::span<const float> volume, const Extents& e, const BoundingVolume& b) const {
  for (int a = 0; a < 3; ++a) {
    if (b.extent(a) < std::min(min_extent_, a == 0 ? e.x : a == 1 ? e.y : e.z)) {
      std::ostringstream os;
      os << "embed: box [" << b.x0 << ',' << b.y0 << ',' << b.z0 << ',' << b.x1 << ',' << b.y1 << ',' << b.z1
         << ") is below the minimum extent " << min_extent_;
      throw std::invalid_argument(os.str());
    }
  }
  const Shape patch{spec_.input[1], spec_.input[2], spec_.input[3]};
  const auto p = resample_box(volume, e, b, patch);
  const auto [out, pen] = nn::infer_with_penultimate(spec_, params_, p.reshaped({1, 1, patch[0], patch[1], patch[2]}));
  return pen.storage();
}

const std::vector<float>& Embedder::embed(std::size_t key, std::span<const float> volume, const Extents& e,
                                          const BoundingVolume& b) {
  auto& per_volume = cache_[key];
  auto it = per_volume.find(b);
  if (it == per_volume.end()) it = per_volume.emplace(b, embed(volume, e, b)).first;
  return it->second;
}

// ---------------------------------------------------------------------------
// Patch encoder training

namespace {

struct Patch {
  Tensor<float> data;
  int label;
};

BoundingVolume box_around(double cx, double cy, double cz, std::array<int, 3> ext, const Extents& e) {
  std::array<int, 3> lo{}, hi{};
  const double c[3] = {cx, cy, cz};
  const auto n = dims(e);
  for (std::size_t a = 0; a < 3; ++a) {
    ext[a] = std::clamp(ext[a], 1, n[a]);
    lo[a] = static_cast<int>(std::lround(c[a] - ext[a] / 2.0));
    hi[a] = lo[a] + ext[a];
    shift_inside(lo[a], hi[a], n[a]);
  }
  return from(lo, hi);
}

}  // namespace

EncoderResult train_patch_encoder(std::span<const phantom::BreastSample* const> trainset, const EncoderConfig& c,
                                  std::uint64_t seed) {
  EncoderResult result;
  result.spec = presets::patch_encoder(c.preset);
  const Shape patch{result.spec.input[1], result.spec.input[2], result.spec.input[3]};

  std::vector<std::size_t> with_lesions;
  std::vector<LesionTargets> targets;
  for (std::size_t i = 0; i < trainset.size(); ++i) {
    targets.emplace_back(trainset[i]->masks, trainset[i]->extents);
    if (!trainset[i]->masks.empty()) with_lesions.push_back(i);
  }
  if (with_lesions.empty()) {
    throw std::runtime_error("train_patch_encoder: none of the " + std::to_string(trainset.size()) +
                             " training volumes contains a lesion, so no positive patch exists");
  }

  Rng rng(derive_seed(seed, 1));
  std::vector<Patch> patches;
  auto add_patch = [&](std::size_t i, const BoundingVolume& b, int label) {
    patches.push_back({resample_box(trainset[i]->volume, trainset[i]->extents, b, patch), label});
  };

  int positives = 0, attempts = 0;
  const int max_attempts = 50 * std::max(1, c.positives);
  while (positives < c.positives && attempts < max_attempts) {
    ++attempts;
    const std::size_t i = with_lesions[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(with_lesions.size()) - 1))];
    const auto& s = *trainset[i];
    const auto& m = s.masks[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(s.masks.size()) - 1))];
    const auto bb = bounding_box(m, s.extents);
    std::array<int, 3> ext{};
    double ctr[3];
    for (int a = 0; a < 3; ++a) {
      const int be = bb.extent(a);
      ext[static_cast<std::size_t>(a)] = std::max(c.min_extent, static_cast<int>(std::lround(be * rng.uniform(0.8, 1.4))));
      const double mid = (lows(bb)[static_cast<std::size_t>(a)] + highs(bb)[static_cast<std::size_t>(a)]) / 2.0;
      ctr[a] = mid + rng.uniform(-0.2, 0.2) * be;
    }
    const auto b = box_around(ctr[0], ctr[1], ctr[2], ext, s.extents);
    if (targets[i].dice(b) > c.positive_dice) {
      add_patch(i, b, 1);
      ++positives;
    }
  }
  if (positives < c.positives) {
    throw std::runtime_error("train_patch_encoder: obtained only " + std::to_string(positives) + " of " +
                             std::to_string(c.positives) + " positive patches (Dice > " +
                             std::to_string(c.positive_dice) + ") after " + std::to_string(attempts) +
                             " attempts over " + std::to_string(with_lesions.size()) + " lesion volumes");
  }

  int negatives = 0;
  attempts = 0;
  while (negatives < c.negatives && attempts < 100 * std::max(1, c.negatives)) {
    ++attempts;
    const bool near = negatives % 2 == 1;
    std::size_t i;
    BoundingVolume b;
    if (near) {
      // Partial overlaps teach the encoder how much of a lesion a box holds.
      i = with_lesions[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(with_lesions.size()) - 1))];
      const auto& s = *trainset[i];
      const auto bb = bounding_box(s.masks[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(s.masks.size()) - 1))], s.extents);
      std::array<int, 3> ext{};
      double ctr[3];
      for (int a = 0; a < 3; ++a) {
        const int be = bb.extent(a);
        ext[static_cast<std::size_t>(a)] = std::max(c.min_extent, static_cast<int>(std::lround(be * rng.uniform(0.5, 3.0))));
        ctr[a] = (lows(bb)[static_cast<std::size_t>(a)] + highs(bb)[static_cast<std::size_t>(a)]) / 2.0 + rng.uniform(-1.0, 1.0) * be;
      }
      b = box_around(ctr[0], ctr[1], ctr[2], ext, s.extents);
    } else {
      i = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(trainset.size()) - 1));
      const auto n = dims(trainset[i]->extents);
      std::array<int, 3> ext{};
      double ctr[3];
      for (std::size_t a = 0; a < 3; ++a) {
        ext[a] = rng.uniform_int(std::min(c.min_extent, n[a]), std::max(c.min_extent, (3 * n[a]) / 4));
        ctr[a] = rng.uniform(0, n[a]);
      }
      b = box_around(ctr[0], ctr[1], ctr[2], ext, trainset[i]->extents);
    }
    if (targets[i].dice(b) <= c.positive_dice) {
      add_patch(i, b, 0);
      ++negatives;
    }
  }

  rng.shuffle(std::span<Patch>(patches));
  const auto n_val = static_cast<std::size_t>(std::lround(c.val_fraction * static_cast<double>(patches.size())));
  const std::size_t n_train = patches.size() - n_val;
  const Shape item{1, patch[0], patch[1], patch[2]};

  auto accuracy = [&](const nn::ParameterSet& params) {
    if (n_val == 0) return 0.0;
    int correct = 0;
    for (std::size_t s = n_train; s < patches.size(); s += 64) {
      const std::size_t end = std::min(patches.size(), s + 64);
      std::vector<const Tensor<float>*> items;
      for (std::size_t k = s; k < end; ++k) items.push_back(&patches[k].data);
      const auto logits = nn::infer(result.spec, params, stack<float>(items, item));
      for (std::size_t k = s; k < end; ++k) {
        const float* row = logits.data() + (k - s) * 2;
        correct += (row[1] > row[0] ? 1 : 0) == patches[k].label;
      }
    }
    return static_cast<double>(correct) / static_cast<double>(n_val);
  };

  nn::Model model(result.spec, nn::init_parameters(result.spec, derive_seed(seed, 2)));
  optim::AdamState<float> state;
  optim::AdamOptions opts;
  opts.lr = c.lr;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), 0);
  result.params = model.params();
  result.val_accuracy = -1;
  for (int epoch = 0; epoch < c.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    model.set_training(true);
    for (std::size_t s = 0; s < n_train; s += static_cast<std::size_t>(c.batch)) {
      const std::size_t end = std::min(n_train, s + static_cast<std::size_t>(c.batch));
      if (end - s < 2) continue;  // batch statistics need two samples
      std::vector<const Tensor<float>*> items;
      std::vector<int> labels;
      for (std::size_t k = s; k < end; ++k) {
        items.push_back(&patches[order[k]].data);
        labels.push_back(patches[order[k]].label);
      }
      model.forward(stack<float>(items, item));
      const auto grads = model.backward([&](const ad::Var<float>& out) { return nn::cross_entropy<float>(out, labels); });
      optim::adam_step(model.params(), grads, state, opts);
    }
    model.set_training(false);
    const double acc = accuracy(model.params());
    log::info("patch encoder epoch " + std::to_string(epoch) + " val accuracy " + std::to_string(acc));
    if (acc > result.val_accuracy) {
      result.val_accuracy = acc;
      result.params = model.params();
    }
  }
  result.params.training = false;
  return result;
}

}  // namespace bscreen::env
