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

// Deep Q-learning over the bounding-volume environment: replay memory, target
// network, guided epsilon-greedy exploration and multi-start greedy detection.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bscreen/env.hpp"
#include "bscreen/metrics.hpp"
#include "bscreen/nn.hpp"
#include "bscreen/optim.hpp"
#include "bscreen/rng.hpp"

namespace bscreen::dqn {

struct Experience {
  std::vector<float> obs;
  env::Action action = env::Action::Trigger;
  float reward = 0;
  std::vector<float> next_obs;
  bool terminal = false;  // trigger, or the step limit was reached
};

/// Fixed-capacity ring buffer; the oldest experience is overwritten first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 10000);
  void push(Experience e);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  const Experience& operator[](std::size_t i) const { return items_.at(i); }
  /// min(n, size()) distinct experiences, uniformly at random.
  std::vector<const Experience*> sample(std::size_t n, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Experience> items_;
};

struct EpsilonSchedule {
  double start = 1.0;
  double end = 0.1;
  int horizon = 300;   // epochs
  double kappa = 0.5;  // share of exploratory draws that are fully uniform

  /// Linear from start (epoch 0) to end (epoch >= horizon).
  double epsilon(int epoch) const;
};

/// Q-values of one observation. Throws std::invalid_argument on a size mismatch.
std::vector<float> q_values(const nn::NetworkSpec& spec, const nn::ParameterSet& params, std::span<const float> obs);

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const float> q);

/// Mean over the batch of (target - Q(o, a; online))^2, with target = r for
/// terminal tuples and r + gamma * max Q(o', .; target) otherwise. Only the
/// online parameters receive gradient.
template <class T>
ad::Var<T> td_loss(const nn::NetworkSpec& spec, const nn::ParamVars<T>& online, const nn::ParameterMap<T>& target,
                   std::span<const Experience* const> batch, double gamma);

struct TdResult {
  double loss = 0;
  nn::ParameterSet grads;
};
TdResult td_loss_and_grad(const nn::NetworkSpec& spec, const nn::ParameterSet& online, const nn::ParameterSet& target,
                          std::span<const Experience* const> batch, double gamma);

/// With probability 1 - epsilon the greedy action. Otherwise, with probability
/// kappa a uniform action, else a uniform action among those whose look-ahead
/// reward is positive (uniform over all when there are none).
env::Action select_action(std::span<const float> q, double epsilon, double kappa, std::span<const double> lookahead,
                          Rng& rng);

struct StepOutcome {
  double reward = 0;
  bool triggered = false;
};

/// Anything with the nine-action box semantics.
class Environment {
 public:
  virtual ~Environment() = default;
  virtual std::vector<float> observe() = 0;
  virtual StepOutcome step(env::Action a) = 0;
  /// Reward each action would earn from the current state, without moving.
  virtual std::vector<double> lookahead() = 0;
};

/// Box search against a fixed set of target regions. Subclasses define the observation.
class BoxEnvironment : public Environment {
 public:
  BoxEnvironment(env::Extents lattice, env::LesionTargets targets, env::EnvConfig config, env::BoundingVolume start);
  StepOutcome step(env::Action a) override;
  std::vector<double> lookahead() override;
  const env::BoundingVolume& box() const { return box_; }
  double current_dice() const { return targets_.dice(box_); }
  const env::Extents& lattice() const { return lattice_; }

 protected:
  env::Extents lattice_;
  env::LesionTargets targets_;
  env::EnvConfig config_;
  env::BoundingVolume box_;
};

/// Observation = encoder embedding of the box contents.
class VolumeEnvironment : public BoxEnvironment {
 public:
  VolumeEnvironment(const phantom::BreastSample& sample, std::size_t key, env::Embedder& embedder,
                    env::EnvConfig config, env::BoundingVolume start);
  std::vector<float> observe() override;

 private:
  const phantom::BreastSample* sample_;
  std::size_t key_;
  env::Embedder* embedder_;
};

/// 1-D interval search on an {length, 1, 1} lattice with a one-hot state.
/// The y/z moves exist but leave the interval unchanged.
class IntervalEnvironment : public BoxEnvironment {
 public:
  IntervalEnvironment(int length, int target_lo, int target_hi, env::EnvConfig config, int start_lo, int start_hi);
  std::vector<float> observe() override;
  int state_count() const { return static_cast<int>(states_.size()); }

 private:
  std::vector<std::pair<int, int>> states_;
};

struct TrainerConfig {
  double gamma = 0.9;
  std::size_t batch = 100;
  std::size_t replay_capacity = 10000;
  int max_steps = 20;
  int update_every = 1;  // environment steps per parameter update
  optim::AdamOptions adam{1e-4};
  EpsilonSchedule schedule;
};

struct EpisodeStats {
  int steps = 0;
  double total_reward = 0;
  bool triggered = false;
  double final_reward = 0;
  double mean_loss = 0;
  int updates = 0;
};

class Diverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Online/target networks, replay memory and the optimizer state.
class QLearner {
 public:
  QLearner(nn::NetworkSpec spec, nn::ParameterSet init, TrainerConfig config, std::uint64_t seed);

  /// One epsilon-greedy episode with updates interleaved. Throws Diverged on a
  /// non-finite loss, leaving the online parameters at their last finite value.
  EpisodeStats run_episode(Environment& environment, double epsilon);
  /// Target <- online.
  void end_epoch();

  const nn::NetworkSpec& spec() const { return spec_; }
  const nn::ParameterSet& online() const { return online_; }
  const nn::ParameterSet& target() const { return target_; }
  const ReplayBuffer& replay() const { return replay_; }
  const TrainerConfig& config() const { return config_; }

 private:
  double update();

  nn::NetworkSpec spec_;
  nn::ParameterSet online_, target_;
  TrainerConfig config_;
  ReplayBuffer replay_;
  optim::AdamState<float> adam_;
  Rng rng_;
  long env_steps_ = 0;
};

/// The 13 search starts: centred box covering `fraction` of each axis, the 8
/// half-extent corner boxes, and 4 half-extent boxes centred between them.
std::vector<env::BoundingVolume> initial_boxes(const env::Extents& lattice, double fraction = 0.75);

struct DetectConfig {
  int max_steps = 20;
  double merge_dice = 0.5;
  double init_fraction = 0.75;
  int min_extent = 4;
};

using metrics::Detection;

/// Greedy episode from every start; episodes that trigger yield their final
/// box scored by Q(trigger).
std::vector<Detection> detect_raw(const phantom::BreastSample& sample, std::size_t key, env::Embedder& embedder,
                                  const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                                  const DetectConfig& config = {});
/// Keeps the highest-scoring box of every group with pairwise Dice >= merge_dice.
std::vector<Detection> merge_detections(std::vector<Detection> raw, double merge_dice);
std::vector<Detection> detect(const phantom::BreastSample& sample, std::size_t key, env::Embedder& embedder,
                              const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                              const DetectConfig& config = {});

struct DetectorConfig {
  TrainerConfig trainer;
  int epochs = 40;
  int val_every = 5;
  double val_max_fpp = 3.0;
  double init_fraction = 0.75;
  env::EnvConfig env;
  DetectConfig detect;
  presets::PresetOptions preset;
  /// Written with the last finite parameters if training diverges.
  std::optional<std::filesystem::path> divergence_checkpoint;
};

struct EpochLog {
  int epoch = 0;
  double epsilon = 0;
  double mean_reward = 0;
  double trigger_rate = 0;
  double mean_loss = 0;
  std::optional<double> val_score;
};

struct DetectorResult {
  nn::NetworkSpec spec;
  nn::ParameterSet params;
  double val_score = -1;  // validation TPR at <= val_max_fpp
  int best_epoch = -1;
  bool diverged = false;
  std::vector<EpochLog> history;
};

/// Validation TPR (all lesions) at <= max_fpp false positives per patient.
double detection_score(std::span<const phantom::BreastSample* const> samples, std::size_t key_base,
                       env::Embedder& embedder, const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                       const DetectConfig& config, double max_fpp);

/// Embedding cache keys are key_base + index into the span.
DetectorResult train_detector(std::span<const phantom::BreastSample* const> trainset,
                              std::span<const phantom::BreastSample* const> valset, env::Embedder& embedder,
                              const DetectorConfig& config, std::uint64_t seed);

// Detection sets -------------------------------------------------------------

struct BreastDetections {
  std::string breast_id;
  std::vector<Detection> detections;
};
/// breast_id,x0,y0,z0,x1,y1,z1,score
void write_detections_csv(const std::filesystem::path& path, std::span<const BreastDetections> sets);
std::vector<BreastDetections> read_detections_csv(const std::filesystem::path& path);

}  // namespace bscreen::dqn
