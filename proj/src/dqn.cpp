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

#include "bscreen/dqn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bscreen/checkpoint.hpp"
#include "bscreen/log.hpp"
#include "bscreen/presets.hpp"

namespace bscreen::dqn {

using env::Action;
using env::BoundingVolume;

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
}

void ReplayBuffer::push(Experience e) {
  if (items_.size() < capacity_) {
    items_.push_back(std::move(e));
  } else {
    items_[next_] = std::move(e);
  }
  next_ = (next_ + 1) % capacity_;
}

std::vector<const Experience*> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  n = std::min(n, items_.size());
  // Partial Fisher-Yates over indices.
  std::vector<std::size_t> idx(items_.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<const Experience*> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(idx.size() - i - 1)));
    std::swap(idx[i], idx[j]);
    out.push_back(&items_[idx[i]]);
  }
  return out;
}

double EpsilonSchedule::epsilon(int epoch) const {
  if (horizon <= 0 || epoch >= horizon) return end;
  const double t = std::max(0, epoch) / static_cast<double>(horizon);
  return start + (end - start) * t;
}

namespace {

std::size_t obs_size(const nn::NetworkSpec& spec) { return numel(spec.input); }

template <class T>
Tensor<T> stack_obs(const nn::NetworkSpec& spec, std::span<const Experience* const> batch, bool next) {
  const std::size_t e = obs_size(spec);
  Shape shape{static_cast<int>(batch.size())};
  shape.insert(shape.end(), spec.input.begin(), spec.input.end());
  Tensor<T> t(shape);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& o = next ? batch[i]->next_obs : batch[i]->obs;
    if (o.size() != e)
      throw std::invalid_argument("td_loss: observation has " + std::to_string(o.size()) + " values, network expects " +
                                  std::to_string(e));
    std::copy(o.begin(), o.end(), t.data() + i * e);
  }
  return t;
}

}  // namespace

std::vector<float> q_values(const nn::NetworkSpec& spec, const nn::ParameterSet& params, std::span<const float> obs) {
  if (obs.size() != obs_size(spec))
    throw std::invalid_argument("q_values: observation has " + std::to_string(obs.size()) +
                                " values, network expects " + std::to_string(obs_size(spec)));
  Shape shape{1};
  shape.insert(shape.end(), spec.input.begin(), spec.input.end());
  const auto out = nn::infer(spec, params, Tensor<float>(shape, std::vector<float>(obs.begin(), obs.end())));
  return out.storage();
}

int argmax(std::span<const float> q) {
  if (q.empty()) throw std::invalid_argument("argmax: empty vector");
  return static_cast<int>(std::max_element(q.begin(), q.end()) - q.begin());
}

template <class T>
ad::Var<T> td_loss(const nn::NetworkSpec& spec, const nn::ParamVars<T>& online, const nn::ParameterMap<T>& target,
                   std::span<const Experience* const> batch, double gamma) {
  if (batch.empty()) throw std::invalid_argument("td_loss: empty batch");
  if (!(gamma > 0 && gamma < 1)) throw std::invalid_argument("td_loss: gamma must lie in (0, 1)");
  const int n = static_cast<int>(batch.size());
  const nn::ForwardContext<T> ctx{};

  std::vector<T> y(batch.size());
  {
    ad::GradMode::Guard off(false);
    const auto tv = nn::make_vars(target, false);
    const auto next_q = nn::forward(spec, tv, ad::constant(stack_obs<T>(spec, batch, true)), ctx).output.value();
    const int k = next_q.dim(1);
    for (int i = 0; i < n; ++i) {
      const T* row = next_q.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(k);
      const double best = *std::max_element(row, row + k);
      y[static_cast<std::size_t>(i)] =
          static_cast<T>(batch[static_cast<std::size_t>(i)]->reward + (batch[static_cast<std::size_t>(i)]->terminal ? 0.0 : gamma * best));
    }
  }

  const auto q = nn::forward(spec, online, ad::constant(stack_obs<T>(spec, batch, false)), ctx).output;
  const int k = q.shape()[1];
  Tensor<T> pick(Shape{n, k});
  for (int i = 0; i < n; ++i) {
    const int a = static_cast<int>(batch[static_cast<std::size_t>(i)]->action);
    if (a >= k) throw std::invalid_argument("td_loss: action index outside the Q-vector");
    pick[static_cast<std::size_t>(i * k + a)] = T{1};
  }
  const auto qa = ad::sum_cols(ad::mul(q, ad::constant(std::move(pick))));
  const auto diff = ad::sub(qa, ad::constant(Tensor<T>(Shape{n}, std::move(y))));
  return ad::scale(ad::sum_all(ad::mul(diff, diff)), 1.0 / n);
}

template ad::Var<float> td_loss(const nn::NetworkSpec&, const nn::ParamVars<float>&, const nn::ParameterMap<float>&,
                                std::span<const Experience* const>, double);
template ad::Var<double> td_loss(const nn::NetworkSpec&, const nn::ParamVars<double>&, const nn::ParameterMap<double>&,
                                 std::span<const Experience* const>, double);

TdResult td_loss_and_grad(const nn::NetworkSpec& spec, const nn::ParameterSet& online, const nn::ParameterSet& target,
                          std::span<const Experience* const> batch, double gamma) {
  ad::GradMode::Guard on(true);
  const auto vars = nn::make_vars(online, true);
  const auto loss = td_loss<float>(spec, vars, target, batch, gamma);
  const auto leaves = vars.trainable_vars();
  const auto g = ad::grad<float>(loss, leaves);
  return {static_cast<double>(loss.item()), nn::to_parameter_map(vars, g)};
}

Action select_action(std::span<const float> q, double epsilon, double kappa, std::span<const double> lookahead,
                     Rng& rng) {
  if (q.size() != static_cast<std::size_t>(env::kActionCount))
    throw std::invalid_argument("select_action: expected one Q-value per action");
  if (rng.uniform() >= epsilon) return static_cast<Action>(argmax(q));
  if (rng.uniform() < kappa) return static_cast<Action>(rng.uniform_int(0, env::kActionCount - 1));
  std::vector<int> good;
  for (std::size_t a = 0; a < lookahead.size(); ++a)
    if (lookahead[a] > 0) good.push_back(static_cast<int>(a));
  if (good.empty()) return static_cast<Action>(rng.uniform_int(0, env::kActionCount - 1));
  return static_cast<Action>(good[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(good.size()) - 1))]);
}

// ---------------------------------------------------------------------------
// Environments

BoxEnvironment::BoxEnvironment(env::Extents lattice, env::LesionTargets targets, env::EnvConfig config,
                               BoundingVolume start)
    : lattice_(lattice), targets_(std::move(targets)), config_(config), box_(start) {
  if (!start.valid() || !start.inside(lattice)) throw std::invalid_argument("BoxEnvironment: start box outside the lattice");
}

StepOutcome BoxEnvironment::step(Action a) {
  const double before = targets_.dice(box_);
  if (a == Action::Trigger) return {env::reward_from_dice(a, before, before, config_), true};
  const auto next = env::apply_action(box_, a, lattice_, config_.min_extent);
  const double after = targets_.dice(next);
  box_ = next;
  return {env::reward_from_dice(a, before, after, config_), false};
}

std::vector<double> BoxEnvironment::lookahead() {
  const double before = targets_.dice(box_);
  std::vector<double> r;
  r.reserve(env::kActionCount);
  for (Action a : env::kAllActions) {
    const double after = a == Action::Trigger ? before : targets_.dice(env::apply_action(box_, a, lattice_, config_.min_extent));
    r.push_back(env::reward_from_dice(a, before, after, config_));
  }
  return r;
}

VolumeEnvironment::VolumeEnvironment(const phantom::BreastSample& sample, std::size_t key, env::Embedder& embedder,
                                     env::EnvConfig config, BoundingVolume start)
    : BoxEnvironment(sample.extents, env::LesionTargets(sample.masks, sample.extents), config, start),
      sample_(&sample),
      key_(key),
      embedder_(&embedder) {}

std::vector<float> VolumeEnvironment::observe() {
  return embedder_->embed(key_, sample_->volume, sample_->extents, box_);
}

namespace {

env::LesionTargets interval_target(int length, int lo, int hi) {
  if (!(0 <= lo && lo < hi && hi <= length)) throw std::invalid_argument("IntervalEnvironment: bad target interval");
  phantom::Mask m(static_cast<std::size_t>(length), 0);
  std::fill(m.begin() + lo, m.begin() + hi, 1);
  return env::LesionTargets({m}, env::Extents{length, 1, 1});
}

}  // namespace

IntervalEnvironment::IntervalEnvironment(int length, int target_lo, int target_hi, env::EnvConfig config, int start_lo,
                                         int start_hi)
    : BoxEnvironment(env::Extents{length, 1, 1}, interval_target(length, target_lo, target_hi), config,
                     BoundingVolume{start_lo, 0, 0, start_hi, 1, 1}) {
  for (int a = 0; a < length; ++a)
    for (int b = a + 1; b <= length; ++b) states_.emplace_back(a, b);
}

std::vector<float> IntervalEnvironment::observe() {
  std::vector<float> o(states_.size(), 0.0f);
  const auto it = std::find(states_.begin(), states_.end(), std::pair{box_.x0, box_.x1});
  o[static_cast<std::size_t>(it - states_.begin())] = 1.0f;
  return o;
}

// ---------------------------------------------------------------------------
// Learner

QLearner::QLearner(nn::NetworkSpec spec, nn::ParameterSet init, TrainerConfig config, std::uint64_t seed)
    : spec_(std::move(spec)),
      online_(std::move(init)),
      target_(online_),
      config_(config),
      replay_(config.replay_capacity),
      rng_(seed) {
  online_.training = target_.training = false;
  if (nn::output_shape(spec_) != Shape{env::kActionCount})
    throw ShapeError("QLearner: network must output one value per action");
  if (config_.max_steps <= 0 || config_.batch == 0 || config_.update_every <= 0)
    throw std::invalid_argument("QLearner: max_steps, batch and update_every must be positive");
}

double QLearner::update() {
  const auto batch = replay_.sample(config_.batch, rng_);
  auto r = td_loss_and_grad(spec_, online_, target_, batch, config_.gamma);
  if (!std::isfinite(r.loss)) throw Diverged("TD loss became non-finite after " + std::to_string(adam_.step) + " updates");
  try {
    optim::adam_step(online_, r.grads, adam_, config_.adam);
  } catch (const optim::NonFiniteGradient& e) {
    throw Diverged(e.what());
  }
  return r.loss;
}

EpisodeStats QLearner::run_episode(Environment& environment, double epsilon) {
  EpisodeStats st;
  double loss_sum = 0;
  auto obs = environment.observe();
  for (int t = 0; t < config_.max_steps; ++t) {
    const auto q = q_values(spec_, online_, obs);
    const auto look = environment.lookahead();
    const Action a = select_action(q, epsilon, config_.schedule.kappa, look, rng_);
    const auto out = environment.step(a);
    const bool terminal = out.triggered || t + 1 == config_.max_steps;
    auto next = out.triggered ? obs : environment.observe();
    replay_.push({obs, a, static_cast<float>(out.reward), next, terminal});
    ++st.steps;
    st.total_reward += out.reward;
    st.final_reward = out.reward;
    st.triggered = out.triggered;
    ++env_steps_;
    if (replay_.size() >= config_.batch && env_steps_ % config_.update_every == 0) {
      loss_sum += update();
      ++st.updates;
    }
    obs = std::move(next);
    if (terminal) break;
  }
  st.mean_loss = st.updates > 0 ? loss_sum / st.updates : 0.0;
  return st;
}

void QLearner::end_epoch() { target_ = online_; }

// ---------------------------------------------------------------------------
// Inference

std::vector<BoundingVolume> initial_boxes(const env::Extents& lattice, double fraction) {
  std::vector<BoundingVolume> out{env::centered_box(lattice, fraction)};
  const int n[3] = {lattice.x, lattice.y, lattice.z};
  int h[3];
  for (int a = 0; a < 3; ++a) h[a] = std::max(1, n[a] / 2);
  auto span_at = [&](int axis, double centre) {
    int lo = static_cast<int>(std::floor(centre - h[axis] / 2.0));
    lo = std::clamp(lo, 0, n[axis] - h[axis]);
    return std::pair{lo, lo + h[axis]};
  };
  for (int cz = 0; cz < 2; ++cz)
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx) {
        BoundingVolume b;
        b.x0 = cx ? n[0] - h[0] : 0;
        b.y0 = cy ? n[1] - h[1] : 0;
        b.z0 = cz ? n[2] - h[2] : 0;
        b.x1 = b.x0 + h[0];
        b.y1 = b.y0 + h[1];
        b.z1 = b.z0 + h[2];
        out.push_back(b);
      }
  for (int cy = 0; cy < 2; ++cy)
    for (int cx = 0; cx < 2; ++cx) {
      const auto [x0, x1] = span_at(0, n[0] * (cx ? 0.75 : 0.25));
      const auto [y0, y1] = span_at(1, n[1] * (cy ? 0.75 : 0.25));
      const auto [z0, z1] = span_at(2, n[2] * 0.5);
      out.push_back({x0, y0, z0, x1, y1, z1});
    }
  return out;
}

std::vector<Detection> detect_raw(const phantom::BreastSample& sample, std::size_t key, env::Embedder& embedder,
                                  const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                                  const DetectConfig& config) {
  std::vector<Detection> out;
  for (auto box : initial_boxes(sample.extents, config.init_fraction)) {
    for (int t = 0; t < config.max_steps; ++t) {
      const auto q = q_values(spec, params, embedder.embed(key, sample.volume, sample.extents, box));
      const auto a = static_cast<Action>(argmax(q));
      if (a == Action::Trigger) {
        out.push_back({box, static_cast<double>(q[static_cast<std::size_t>(Action::Trigger)])});
        break;
      }
      box = env::apply_action(box, a, sample.extents, config.min_extent);
    }
  }
  return out;
}

std::vector<Detection> merge_detections(std::vector<Detection> raw, double merge_dice) {
  std::stable_sort(raw.begin(), raw.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const auto& d : raw) {
    const bool dup = std::any_of(kept.begin(), kept.end(),
                                 [&](const Detection& k) { return env::dice(k.box, d.box) >= merge_dice; });
    if (!dup) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> detect(const phantom::BreastSample& sample, std::size_t key, env::Embedder& embedder,
                              const nn::NetworkSpec& spec, const nn::ParameterSet& params, const DetectConfig& config) {
  return merge_detections(detect_raw(sample, key, embedder, spec, params, config), config.merge_dice);
}

double detection_score(std::span<const phantom::BreastSample* const> samples, std::size_t key_base,
                       env::Embedder& embedder, const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                       const DetectConfig& config, double max_fpp) {
  std::map<std::string, metrics::PatientEval> by_patient;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    auto& p = by_patient[s.patient_id];
    p.patient_id = s.patient_id;
    p.breasts.push_back({detect(s, key_base + i, embedder, spec, params, config), &s.masks, s.extents, true});
  }
  std::vector<metrics::PatientEval> patients;
  for (auto& [id, p] : by_patient) patients.push_back(std::move(p));
  const auto curve = metrics::froc(patients, metrics::froc_thresholds(patients));
  return metrics::tpr_at_fpp(curve, max_fpp);
}

DetectorResult train_detector(std::span<const phantom::BreastSample* const> trainset,
                              std::span<const phantom::BreastSample* const> valset, env::Embedder& embedder,
                              const DetectorConfig& config, std::uint64_t seed) {
  if (trainset.empty()) throw std::invalid_argument("train_detector: empty training set");
  DetectorResult result;
  result.spec = presets::q_head(embedder.dimension(), env::kActionCount, config.preset);
  auto trainer = config.trainer;
  trainer.max_steps = config.detect.max_steps;
  QLearner learner(result.spec, nn::init_parameters(result.spec, derive_seed(seed, 1)), trainer, derive_seed(seed, 2));
  Rng order_rng(derive_seed(seed, 3));
  std::vector<std::size_t> order(trainset.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t val_key_base = trainset.size();
  result.params = learner.online();

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    EpochLog log_row;
    log_row.epoch = epoch;
    log_row.epsilon = trainer.schedule.epsilon(epoch);
    order_rng.shuffle(std::span<std::size_t>(order));
    int triggers = 0, updates = 0;
    double reward = 0, loss = 0;
    for (std::size_t i : order) {
      const auto& s = *trainset[i];
      VolumeEnvironment environment(s, i, embedder, config.env, env::centered_box(s.extents, config.init_fraction));
      EpisodeStats st;
      try {
        st = learner.run_episode(environment, log_row.epsilon);
      } catch (const Diverged& e) {
        log::error(std::string("detector training diverged in epoch ") + std::to_string(epoch) + ": " + e.what());
        result.diverged = true;
        if (config.divergence_checkpoint) {
          save_checkpoint(*config.divergence_checkpoint, result.spec, learner.online());
        }
        if (result.best_epoch < 0) result.params = learner.online();
        return result;
      }
      triggers += st.triggered;
      reward += st.total_reward;
      loss += st.mean_loss * st.updates;
      updates += st.updates;
    }
    learner.end_epoch();
    log_row.mean_reward = reward / static_cast<double>(trainset.size());
    log_row.trigger_rate = triggers / static_cast<double>(trainset.size());
    log_row.mean_loss = updates > 0 ? loss / updates : 0.0;

    const bool last = epoch + 1 == config.epochs;
    if (!valset.empty() && (last || (config.val_every > 0 && (epoch + 1) % config.val_every == 0))) {
      const double score = detection_score(valset, val_key_base, embedder, result.spec, learner.online(),
                                           config.detect, config.val_max_fpp);
      log_row.val_score = score;
      if (score > result.val_score) {
        result.val_score = score;
        result.best_epoch = epoch;
        result.params = learner.online();
      }
    }
    log::info("detector epoch " + std::to_string(epoch) + " eps " + std::to_string(log_row.epsilon) + " reward " +
              std::to_string(log_row.mean_reward) + " triggers " + std::to_string(log_row.trigger_rate) +
              (log_row.val_score ? " val " + std::to_string(*log_row.val_score) : std::string()));
    result.history.push_back(log_row);
  }
  if (valset.empty()) {
    result.params = learner.online();
    result.best_epoch = config.epochs - 1;
  }
  return result;
}

// ---------------------------------------------------------------------------
// CSV

void write_detections_csv(const std::filesystem::path& path, std::span<const BreastDetections> sets) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "breast_id,x0,y0,z0,x1,y1,z1,score\n";
  char buf[64];
  for (const auto& s : sets)
    for (const auto& d : s.detections) {
      std::snprintf(buf, sizeof buf, "%.17g", d.score);
      f << s.breast_id << ',' << d.box.x0 << ',' << d.box.y0 << ',' << d.box.z0 << ',' << d.box.x1 << ','
        << d.box.y1 << ',' << d.box.z1 << ',' << buf << '\n';
    }
}

std::vector<BreastDetections> read_detections_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line.rfind("breast_id,x0,y0,z0,x1,y1,z1,score", 0) != 0)
    throw std::runtime_error(path.string() + ": unexpected detections header");
  std::vector<BreastDetections> out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string id, cell;
    std::getline(ss, id, ',');
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 8 columns");
    Detection d;
    try {
      d.box = {std::stoi(cells[0]), std::stoi(cells[1]), std::stoi(cells[2]),
               std::stoi(cells[3]), std::stoi(cells[4]), std::stoi(cells[5])};
      d.score = std::stod(cells[6]);
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
    if (!d.box.valid()) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": empty box");
    if (out.empty() || out.back().breast_id != id) out.push_back({id, {}});
    out.back().detections.push_back(d);
  }
  return out;
}

}  // namespace bscreen::dqn
