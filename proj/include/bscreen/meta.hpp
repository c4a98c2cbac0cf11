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

// Curriculum meta-training over the five breast classification tasks,
// screening fine-tuning and whole-volume diagnosis.

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bscreen/nn.hpp"
#include "bscreen/phantom.hpp"
#include "bscreen/presets.hpp"
#include "bscreen/rng.hpp"

namespace bscreen::meta {

// ---------------------------------------------------------------------------
// Tasks

enum class TaskId : int {
  FindingVsNone = 0,      // y in {1, 2} vs y = 0
  MalignantVsNone = 1,    // y = 2 vs y = 0
  BenignVsNone = 2,       // y = 1 vs y = 0
  MalignantVsBenign = 3,  // y = 2 (positive) vs y = 1
  Screening = 4,          // y = 2 vs y in {0, 1}
};
inline constexpr int kTaskCount = 5;
std::string_view to_string(TaskId id);
/// 1 positive, 0 negative, -1 not part of the task.
int task_label(TaskId id, int y);

struct TaskDef {
  TaskId id = TaskId::Screening;
  std::vector<const phantom::BreastSample*> positives, negatives;
};

/// Throws std::invalid_argument naming the task and its class counts when a
/// class holds fewer than `per_class_min` samples.
std::array<TaskDef, kTaskCount> build_tasks(std::span<const phantom::BreastSample* const> trainset,
                                            int per_class_min = 8);

struct Episode {
  TaskId task = TaskId::Screening;
  std::vector<const phantom::BreastSample*> train, val;
  std::vector<int> train_labels, val_labels;
};

/// Class-balanced, disjoint training and validation draws.
Episode sample_episode(const TaskDef& task, int n_train, int n_val, Rng& rng);

// ---------------------------------------------------------------------------
// Adaptation and meta-update on any differentiable model

template <class T>
using Objective = std::function<ad::Var<T>(const std::vector<ad::Var<T>>&)>;

/// `steps` gradient-descent updates of `loss` starting at `theta`. The inputs
/// are never modified. With create_graph the result stays differentiable with
/// respect to `theta`.
template <class T>
std::vector<ad::Var<T>> adapt(const std::vector<ad::Var<T>>& theta, const Objective<T>& loss, double alpha, int steps,
                              bool create_graph);

template <class T>
struct TaskObjectives {
  Objective<T> train, val;
};

/// d val(adapt(theta, train)) / d theta. The first-order variant returns the
/// validation gradient at the adapted point.
template <class T>
std::vector<Tensor<T>> meta_gradient(const std::vector<Tensor<T>>& theta, const TaskObjectives<T>& task, double alpha,
                                     int steps, bool first_order);

/// theta -= beta * mean (or sum) of the task gradients. Returns false, leaving
/// theta untouched, when the combined gradient is not finite.
template <class T>
bool meta_update(std::vector<Tensor<T>>& theta, std::span<const std::vector<Tensor<T>>> task_gradients, double beta,
                 bool sum = false);

// ---------------------------------------------------------------------------
// Curriculum

/// Per-task reward buffers with Thompson-style task selection.
class Curriculum {
 public:
  explicit Curriculum(int tasks = kTaskCount, std::size_t buffer_size = 40);

  /// `count` independent draws: one uniform reward per buffer (an empty buffer
  /// counts as holding +1), then the task with the largest |reward|, ties
  /// broken uniformly.
  std::vector<int> sample(int count, Rng& rng) const;
  /// Observation = after - before; reward = observation minus the task's
  /// previous observation (the observation itself the first time).
  double observe(int task, double auc_before, double auc_after);

  void push_reward(int task, double reward);
  const std::deque<double>& buffer(int task) const { return buffers_.at(static_cast<std::size_t>(task)); }
  int tasks() const { return static_cast<int>(buffers_.size()); }

 private:
  std::size_t capacity_;
  std::vector<std::deque<double>> buffers_;
  std::vector<std::optional<double>> last_obs_;
};

// ---------------------------------------------------------------------------
// Network-level procedures

struct MetaConfig {
  int iterations = 300;   // M
  int tasks_per_batch = 5;
  int n_train = 4;
  int n_val = 4;
  int adapt_steps = 5;
  double alpha = 0.01;
  double beta = 0.001;
  bool first_order = false;
  bool sum_gradients = false;
  std::size_t buffer_size = 40;
  presets::PresetOptions preset;
};

struct EpisodeLog {
  int iteration = 0;
  TaskId task = TaskId::Screening;
  double auc_before = 0, auc_after = 0, reward = 0;
  bool aborted = false;
};

struct MetaResult {
  nn::NetworkSpec spec;
  nn::ParameterSet params;
  std::vector<EpisodeLog> log;
  int skipped_updates = 0;
};

/// Cross-entropy objective of `spec` over fixed volumes, batch statistics in
/// normalization layers, parameters supplied as trainable leaves.
template <class T>
Objective<T> volume_objective(const nn::NetworkSpec& spec, const nn::ParamVars<T>& base,
                              std::span<const phantom::BreastSample* const> samples, std::span<const int> labels);

/// Malignancy-style probability of class 1 for each sample with the given
/// trainable values and batch statistics (episode evaluation).
std::vector<double> batch_probabilities(const nn::NetworkSpec& spec, const nn::ParamVars<float>& base,
                                        const std::vector<Tensor<float>>& trainable,
                                        std::span<const phantom::BreastSample* const> samples);

MetaResult meta_train(std::span<const phantom::BreastSample* const> trainset, const nn::ParameterSet& init,
                      const MetaConfig& config, std::uint64_t seed);

/// Re-estimates normalization running statistics from `samples` (eval-mode
/// forward passes afterwards use them).
void recalibrate_batch_norm(const nn::NetworkSpec& spec, nn::ParameterSet& params,
                            std::span<const phantom::BreastSample* const> samples, int batch = 16);

struct FineTuneConfig {
  int epochs = 30;
  int batch = 8;
  double lr = 0.01;  // plain SGD
  bool recalibrate = true;
};

struct FineTuneResult {
  nn::ParameterSet params;
  double val_auc = -1;
  int best_epoch = -1;
  std::vector<double> val_history;  // index 0 = starting point
};

/// Screening training over all of `train`, starting at `init` (epoch-0
/// candidate), keeping the best validation AUC.
FineTuneResult fine_tune(const nn::NetworkSpec& spec, const nn::ParameterSet& init,
                         std::span<const phantom::BreastSample* const> train,
                         std::span<const phantom::BreastSample* const> val, const FineTuneConfig& config,
                         std::uint64_t seed);

/// Probability of malignancy (eval mode).
double diagnose(const nn::NetworkSpec& spec, const nn::ParameterSet& params, const phantom::BreastSample& sample);
std::vector<double> diagnose_all(const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                                 std::span<const phantom::BreastSample* const> samples);

/// iteration,task,auc_before,auc_after,reward,aborted
void write_meta_log_csv(const std::filesystem::path& path, std::span<const EpisodeLog> log);

}  // namespace bscreen::meta
