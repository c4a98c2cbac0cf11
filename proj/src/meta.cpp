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

#include "bscreen/meta.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "bscreen/log.hpp"
#include "bscreen/metrics.hpp"
#include "bscreen/optim.hpp"

namespace bscreen::meta {

std::string_view to_string(TaskId id) {
  switch (id) {
    case TaskId::FindingVsNone: return "K1";
    case TaskId::MalignantVsNone: return "K2";
    case TaskId::BenignVsNone: return "K3";
    case TaskId::MalignantVsBenign: return "K4";
    case TaskId::Screening: return "K5";
  }
  return "?";
}

int task_label(TaskId id, int y) {
  switch (id) {
    case TaskId::FindingVsNone: return y == 0 ? 0 : 1;
    case TaskId::MalignantVsNone: return y == 2 ? 1 : y == 0 ? 0 : -1;
    case TaskId::BenignVsNone: return y == 1 ? 1 : y == 0 ? 0 : -1;
    case TaskId::MalignantVsBenign: return y == 2 ? 1 : y == 1 ? 0 : -1;
    case TaskId::Screening: return y == 2 ? 1 : 0;
  }
  return -1;
}

std::array<TaskDef, kTaskCount> build_tasks(std::span<const phantom::BreastSample* const> trainset, int per_class_min) {
  std::array<TaskDef, kTaskCount> tasks;
  for (int k = 0; k < kTaskCount; ++k) {
    auto& t = tasks[static_cast<std::size_t>(k)];
    t.id = static_cast<TaskId>(k);
    for (const auto* s : trainset) {
      const int l = task_label(t.id, s->y);
      if (l == 1) t.positives.push_back(s);
      if (l == 0) t.negatives.push_back(s);
    }
    if (static_cast<int>(t.positives.size()) < per_class_min || static_cast<int>(t.negatives.size()) < per_class_min) {
      throw std::invalid_argument("build_tasks: task " + std::string(to_string(t.id)) + " has " +
                                  std::to_string(t.positives.size()) + " positive and " +
                                  std::to_string(t.negatives.size()) + " negative samples; each class needs " +
                                  std::to_string(per_class_min));
    }
  }
  return tasks;
}

Episode sample_episode(const TaskDef& task, int n_train, int n_val, Rng& rng) {
  if (n_train < 2 || n_val < 2 || n_train % 2 || n_val % 2)
    throw std::invalid_argument("sample_episode: split sizes must be even and at least 2");
  const int per_class = (n_train + n_val) / 2;
  auto draw = [&](const std::vector<const phantom::BreastSample*>& pool) {
    if (static_cast<int>(pool.size()) < per_class)
      throw std::invalid_argument("sample_episode: task " + std::string(to_string(task.id)) + " pool too small");
    std::vector<const phantom::BreastSample*> p(pool);
    // Partial shuffle: the first per_class entries are a uniform draw.
    for (int i = 0; i < per_class; ++i)
      std::swap(p[static_cast<std::size_t>(i)],
                p[static_cast<std::size_t>(rng.uniform_int(i, static_cast<int>(p.size()) - 1))]);
    p.resize(static_cast<std::size_t>(per_class));
    return p;
  };
  const auto pos = draw(task.positives), neg = draw(task.negatives);
  Episode e;
  e.task = task.id;
  for (int i = 0; i < per_class; ++i) {
    const bool tr = i < n_train / 2;
    auto& set = tr ? e.train : e.val;
    auto& lab = tr ? e.train_labels : e.val_labels;
    set.push_back(pos[static_cast<std::size_t>(i)]);
    lab.push_back(1);
    set.push_back(neg[static_cast<std::size_t>(i)]);
    lab.push_back(0);
  }
  return e;
}

// ---------------------------------------------------------------------------

namespace {

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct Adapted {
  std::vector<Tensor<T>> theta_prime;
  std::vector<Tensor<T>> gradient;
  double val_loss = 0;
};

template <class T>
Adapted<T> adapt_and_differentiate(const std::vector<Tensor<T>>& theta, const TaskObjectives<T>& task, double alpha,
                                   int steps, bool first_order) {
  ad::GradMode::Guard on(true);
  std::vector<ad::Var<T>> leaves;
  for (const auto& t : theta) leaves.emplace_back(t, true);
  const auto adapted = adapt<T>(leaves, task.train, alpha, steps, !first_order);
  Adapted<T> r;
  for (const auto& v : adapted) r.theta_prime.push_back(v.value());
  if (first_order) {
    std::vector<ad::Var<T>> at;
    for (const auto& t : r.theta_prime) at.emplace_back(t, true);
    const auto loss = task.val(at);
    r.val_loss = static_cast<double>(loss.item());
    for (const auto& g : ad::grad<T>(loss, at)) r.gradient.push_back(g.value());
  } else {
    const auto loss = task.val(adapted);
    r.val_loss = static_cast<double>(loss.item());
    for (const auto& g : ad::grad<T>(loss, leaves)) r.gradient.push_back(g.value());
  }
  if (!std::isfinite(r.val_loss)) throw NonFiniteLoss("validation loss is not finite");
  return r;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace

template <class T>
std::vector<ad::Var<T>> adapt(const std::vector<ad::Var<T>>& theta, const Objective<T>& loss, double alpha, int steps,
                              bool create_graph) {
  if (steps < 0) throw std::invalid_argument("adapt: negative step count");
  if (steps > 0 && !(alpha > 0)) throw std::invalid_argument("adapt: alpha must be positive");
  ad::GradMode::Guard on(true);
  std::vector<ad::Var<T>> cur = theta;
  if (!create_graph) {
    // Fresh leaves so the caller's graph is never extended.
    for (auto& v : cur) v = ad::Var<T>(v.value(), true);
  }
  for (int s = 0; s < steps; ++s) {
    const auto l = loss(cur);
    if (!std::isfinite(static_cast<double>(l.item())))
      throw NonFiniteLoss("adaptation loss is not finite at step " + std::to_string(s));
    const auto g = ad::grad<T>(l, cur, create_graph);
    std::vector<ad::Var<T>> next;
    next.reserve(cur.size());
    for (std::size_t i = 0; i < cur.size(); ++i) {
      if (create_graph) {
        next.push_back(ad::sub(cur[i], ad::scale(g[i], alpha)));
      } else {
        Tensor<T> v = cur[i].value();
        const auto& gv = g[i].value();
        for (std::size_t k = 0; k < v.size(); ++k) v[k] = static_cast<T>(v[k] - alpha * gv[k]);
        next.emplace_back(std::move(v), true);
      }
    }
    cur = std::move(next);
  }
  return cur;
}

template <class T>
std::vector<Tensor<T>> meta_gradient(const std::vector<Tensor<T>>& theta, const TaskObjectives<T>& task, double alpha,
                                     int steps, bool first_order) {
  return adapt_and_differentiate(theta, task, alpha, steps, first_order).gradient;
}

template <class T>
bool meta_update(std::vector<Tensor<T>>& theta, std::span<const std::vector<Tensor<T>>> task_gradients, double beta,
                 bool sum) {
  if (task_gradients.empty()) return true;
  std::vector<Tensor<T>> step;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    Tensor<double> acc(theta[i].shape());
    for (const auto& g : task_gradients) {
      if (g.size() != theta.size() || g[i].shape() != theta[i].shape())
        throw ShapeError("meta_update: gradient does not match the parameters");
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += static_cast<double>(g[i][k]);
    }
    const double scale = sum ? beta : beta / static_cast<double>(task_gradients.size());
    Tensor<T> s(theta[i].shape());
    for (std::size_t k = 0; k < acc.size(); ++k) s[k] = static_cast<T>(scale * acc[k]);
    if (!all_finite(s)) return false;
    step.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < theta.size(); ++i)
    for (std::size_t k = 0; k < theta[i].size(); ++k) theta[i][k] -= step[i][k];
  return true;
}

#define BSCREEN_META_INSTANTIATE(T)                                                                              \
  template std::vector<ad::Var<T>> adapt<T>(const std::vector<ad::Var<T>>&, const Objective<T>&, double, int, bool); \
  template std::vector<Tensor<T>> meta_gradient<T>(const std::vector<Tensor<T>>&, const TaskObjectives<T>&, double, \
                                                   int, bool);                                                   \
  template bool meta_update<T>(std::vector<Tensor<T>>&, std::span<const std::vector<Tensor<T>>>, double, bool);
BSCREEN_META_INSTANTIATE(float)
BSCREEN_META_INSTANTIATE(double)
#undef BSCREEN_META_INSTANTIATE

// ---------------------------------------------------------------------------
// Curriculum

Curriculum::Curriculum(int tasks, std::size_t buffer_size)
    : capacity_(buffer_size), buffers_(static_cast<std::size_t>(tasks)), last_obs_(static_cast<std::size_t>(tasks)) {
  if (tasks <= 0 || buffer_size == 0) throw std::invalid_argument("Curriculum: tasks and buffer size must be positive");
}

std::vector<int> Curriculum::sample(int count, Rng& rng) const {
  std::vector<int> out;
  std::vector<int> ties;
  for (int c = 0; c < count; ++c) {
    double best = -1;
    ties.clear();
    for (int t = 0; t < tasks(); ++t) {
      const auto& b = buffers_[static_cast<std::size_t>(t)];
      const double r = b.empty() ? 1.0 : std::abs(b[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(b.size()) - 1))]);
      if (r > best) {
        best = r;
        ties.assign(1, t);
      } else if (r == best) {
        ties.push_back(t);
      }
    }
    out.push_back(ties.size() == 1 ? ties[0] : ties[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(ties.size()) - 1))]);
  }
  return out;
}

void Curriculum::push_reward(int task, double reward) {
  auto& b = buffers_.at(static_cast<std::size_t>(task));
  b.push_back(std::isfinite(reward) ? reward : 0.0);
  if (b.size() > capacity_) b.pop_front();
}

double Curriculum::observe(int task, double auc_before, double auc_after) {
  const double obs = auc_after - auc_before;
  auto& last = last_obs_.at(static_cast<std::size_t>(task));
  const double reward = last ? obs - *last : obs;
  last = obs;
  push_reward(task, reward);
  return reward;
}

// ---------------------------------------------------------------------------
// Network procedures

namespace {

template <class T>
Tensor<T> stack_volumes(std::span<const phantom::BreastSample* const> samples) {
  std::vector<Tensor<float>> inputs;
  inputs.reserve(samples.size());
  for (const auto* s : samples) inputs.push_back(s->as_input());
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& t : inputs) ptrs.push_back(&t);
  Shape item(inputs.at(0).shape().begin() + 1, inputs.at(0).shape().end());
  auto stacked = stack<float>(ptrs, item);
  if constexpr (std::is_same_v<T, float>) {
    return stacked;
  } else {
    return stacked.template cast<T>();
  }
}

void check_input(const nn::NetworkSpec& spec, const phantom::BreastSample& s) {
  const Shape got{1, s.extents.z, s.extents.y, s.extents.x};
  if (got != spec.input)
    throw ShapeError("volume " + s.id() + " is " + std::to_string(s.extents.x) + "x" + std::to_string(s.extents.y) +
                     "x" + std::to_string(s.extents.z) + " but the diagnosis network expects " + bscreen::to_string(spec.input));
}

std::vector<Tensor<float>> trainable_values(const nn::ParameterSet& p) {
  std::vector<Tensor<float>> out;
  for (const auto& e : p.entries())
    if (e.trainable) out.push_back(e.value);
  return out;
}

nn::ParameterSet with_trainable_values(nn::ParameterSet p, const std::vector<Tensor<float>>& values) {
  std::size_t k = 0;
  for (auto& e : p.entries())
    if (e.trainable) e.value = values.at(k++);
  return p;
}

double auc_or_half(const std::vector<double>& scores, const std::vector<int>& labels) {
  try {
    return metrics::roc_auc(scores, labels);
  } catch (const std::invalid_argument&) {
    return 0.5;
  }
}

}  // namespace

template <class T>
Objective<T> volume_objective(const nn::NetworkSpec& spec, const nn::ParamVars<T>& base,
                              std::span<const phantom::BreastSample* const> samples, std::span<const int> labels) {
  for (const auto* s : samples) check_input(spec, *s);
  Tensor<T> x = stack_volumes<T>(samples);
  std::vector<int> y(labels.begin(), labels.end());
  return [spec, base, x = std::move(x), y = std::move(y)](const std::vector<ad::Var<T>>& theta) {
    nn::ForwardContext<T> ctx;
    ctx.train = true;  // batch statistics, running buffers untouched
    const auto out = nn::forward(spec, base.with_trainable(theta), ad::constant(x), ctx).output;
    return nn::cross_entropy<T>(out, y);
  };
}

template Objective<float> volume_objective(const nn::NetworkSpec&, const nn::ParamVars<float>&,
                                           std::span<const phantom::BreastSample* const>, std::span<const int>);
template Objective<double> volume_objective(const nn::NetworkSpec&, const nn::ParamVars<double>&,
                                            std::span<const phantom::BreastSample* const>, std::span<const int>);

std::vector<double> batch_probabilities(const nn::NetworkSpec& spec, const nn::ParamVars<float>& base,
                                        const std::vector<Tensor<float>>& trainable,
                                        std::span<const phantom::BreastSample* const> samples) {
  ad::GradMode::Guard off(false);
  std::vector<ad::Var<float>> vars;
  for (const auto& t : trainable) vars.emplace_back(t, false);
  nn::ForwardContext<float> ctx;
  ctx.train = true;
  const auto out = nn::forward(spec, base.with_trainable(vars), ad::constant(stack_volumes<float>(samples)), ctx).output;
  const auto p = nn::class_probability(out.value(), 1);
  return {p.begin(), p.end()};
}

MetaResult meta_train(std::span<const phantom::BreastSample* const> trainset, const nn::ParameterSet& init,
                      const MetaConfig& c, std::uint64_t seed) {
  MetaResult result;
  result.spec = presets::diagnosis_net(c.preset);
  result.params = init;
  result.params.training = false;
  if (c.iterations <= 0) return result;

  const auto tasks = build_tasks(trainset, c.n_train + c.n_val);
  const auto base = nn::make_vars(init, false);
  auto theta = trainable_values(init);
  Rng rng(derive_seed(seed, 1));
  Curriculum curriculum(kTaskCount, c.buffer_size);

  for (int it = 0; it < c.iterations; ++it) {
    const auto slots = curriculum.sample(c.tasks_per_batch, rng);
    std::vector<std::vector<Tensor<float>>> grads;
    for (int j : slots) {
      const auto ep = sample_episode(tasks[static_cast<std::size_t>(j)], c.n_train, c.n_val, rng);
      EpisodeLog row;
      row.iteration = it;
      row.task = ep.task;
      row.auc_before = auc_or_half(batch_probabilities(result.spec, base, theta, ep.val), ep.val_labels);
      const TaskObjectives<float> obj{volume_objective<float>(result.spec, base, ep.train, ep.train_labels),
                                      volume_objective<float>(result.spec, base, ep.val, ep.val_labels)};
      try {
        auto a = adapt_and_differentiate<float>(theta, obj, c.alpha, c.adapt_steps, c.first_order);
        row.auc_after = auc_or_half(batch_probabilities(result.spec, base, a.theta_prime, ep.val), ep.val_labels);
        row.reward = curriculum.observe(j, row.auc_before, row.auc_after);
        grads.push_back(std::move(a.gradient));
      } catch (const NonFiniteLoss& e) {
        row.aborted = true;
        row.auc_after = row.auc_before;
        row.reward = 0;
        curriculum.push_reward(j, 0.0);
        log::warn(std::string("meta-training episode aborted (") + std::string(to_string(ep.task)) + "): " + e.what());
      }
      result.log.push_back(row);
    }
    if (!meta_update<float>(theta, grads, c.beta, c.sum_gradients)) {
      ++result.skipped_updates;
      log::warn("meta-iteration " + std::to_string(it) + ": non-finite meta-gradient, update skipped");
    }
    if ((it + 1) % 25 == 0) log::info("meta-iteration " + std::to_string(it + 1) + " of " + std::to_string(c.iterations));
  }
  result.params = with_trainable_values(init, theta);
  result.params.training = false;
  return result;
}

void recalibrate_batch_norm(const nn::NetworkSpec& spec, nn::ParameterSet& params,
                            std::span<const phantom::BreastSample* const> samples, int batch) {
  if (samples.empty()) return;
  ad::GradMode::Guard off(false);
  const auto vars = nn::make_vars(params, false);
  int k = 0;
  for (std::size_t s = 0; s < samples.size(); s += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(samples.size(), s + static_cast<std::size_t>(batch));
    if (end - s < 2 && k > 0) break;  // a single sample has no spread
    ++k;
    nn::ForwardContext<float> ctx;
    ctx.train = true;
    ctx.running_stats = &params;
    ctx.bn_momentum = (k - 1.0) / k;  // running average over batches
    nn::forward(spec, vars, ad::constant(stack_volumes<float>(samples.subspan(s, end - s))), ctx);
  }
}

double diagnose(const nn::NetworkSpec& spec, const nn::ParameterSet& params, const phantom::BreastSample& sample) {
  check_input(spec, sample);
  const auto logits = nn::infer(spec, params, sample.as_input().reshaped({1, 1, sample.extents.z, sample.extents.y, sample.extents.x}));
  return nn::class_probability(logits, 1)[0];
}

std::vector<double> diagnose_all(const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                                 std::span<const phantom::BreastSample* const> samples) {
  std::vector<double> out;
  constexpr std::size_t kChunk = 32;
  for (std::size_t s = 0; s < samples.size(); s += kChunk) {
    const auto part = samples.subspan(s, std::min(kChunk, samples.size() - s));
    for (const auto* p : part) check_input(spec, *p);
    const auto logits = nn::infer(spec, params, stack_volumes<float>(part));
    for (float p : nn::class_probability(logits, 1)) out.push_back(p);
  }
  return out;
}

namespace {

std::optional<double> screening_auc(const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                                    std::span<const phantom::BreastSample* const> val) {
  if (val.empty()) return std::nullopt;
  std::vector<int> labels;
  for (const auto* s : val) labels.push_back(s->y == 2 ? 1 : 0);
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
  if (!both) return std::nullopt;
  return metrics::roc_auc(diagnose_all(spec, params, val), labels);
}

}  // namespace

FineTuneResult fine_tune(const nn::NetworkSpec& spec, const nn::ParameterSet& init,
                         std::span<const phantom::BreastSample* const> train,
                         std::span<const phantom::BreastSample* const> val, const FineTuneConfig& c,
                         std::uint64_t seed) {
  if (train.size() < 2) throw std::invalid_argument("fine_tune: need at least two training volumes");
  FineTuneResult r;
  nn::ParameterSet start = init;
  start.training = false;
  if (c.recalibrate) recalibrate_batch_norm(spec, start, train);

  auto consider = [&](int epoch, const nn::ParameterSet& p) {
    const auto auc = screening_auc(spec, p, val);
    r.val_history.push_back(auc.value_or(-1));
    if (auc && *auc > r.val_auc) {
      r.val_auc = *auc;
      r.best_epoch = epoch;
      r.params = p;
    }
  };
  consider(0, start);

  nn::Model model(spec, start);
  Rng rng(derive_seed(seed, 1));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<int> labels;
  for (const auto* s : train) labels.push_back(s->y == 2 ? 1 : 0);
  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    model.set_training(true);
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(c.batch)) {
      const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(c.batch));
      if (end - s < 2) continue;
      std::vector<const phantom::BreastSample*> part;
      std::vector<int> y;
      for (std::size_t k = s; k < end; ++k) {
        part.push_back(train[order[k]]);
        y.push_back(labels[order[k]]);
      }
      model.forward(stack_volumes<float>(part));
      const auto grads = model.backward([&](const ad::Var<float>& out) { return nn::cross_entropy<float>(out, y); });
      optim::sgd_step(model.params(), grads, c.lr);
    }
    model.set_training(false);
    consider(epoch, model.params());
    log::info("fine-tune epoch " + std::to_string(epoch) + " val AUC " + std::to_string(r.val_history.back()));
  }
  if (r.best_epoch < 0) {
    r.params = model.params();
    r.best_epoch = c.epochs;
  }
  r.params.training = false;
  return r;
}

void write_meta_log_csv(const std::filesystem::path& path, std::span<const EpisodeLog> log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "iteration,task,auc_before,auc_after,reward,aborted\n";
  char buf[96];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.6g,%.6g,%.6g,%d\n", r.iteration, std::string(to_string(r.task)).c_str(),
                  r.auc_before, r.auc_after, r.reward, r.aborted ? 1 : 0);
    f << buf;
  }
}

}  // namespace bscreen::meta
