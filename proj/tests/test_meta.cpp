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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "bscreen/meta.hpp"
#include "bscreen/metrics.hpp"
#include "support/gradcheck.hpp"

using namespace bscreen;
using meta::TaskId;

namespace {

// Desk-sized volumes whose mean intensity carries the label.
std::vector<phantom::BreastSample> labelled_volumes(const std::vector<int>& ys, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<phantom::BreastSample> out;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    phantom::BreastSample s;
    s.patient_id = "P" + std::to_string(i);
    s.y = ys[i];
    s.volume.resize(s.extents.voxels());
    const double level = 0.3 + 0.15 * ys[i];
    for (auto& v : s.volume) v = static_cast<float>(std::clamp(level + 0.1 * rng.normal(), 0.0, 1.0));
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<const phantom::BreastSample*> pointers(const std::vector<phantom::BreastSample>& v) {
  std::vector<const phantom::BreastSample*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

std::vector<int> balanced_labels(int per_class) {
  std::vector<int> ys;
  for (int y = 0; y < 3; ++y)
    for (int i = 0; i < per_class; ++i) ys.push_back(y);
  return ys;
}

ad::Var<double> scalar_var(double v) { return ad::Var<double>(Tensor<double>({1}, {v}), true); }

// Mean logistic loss of sigmoid(w * x) for one weight.
meta::Objective<double> logistic(std::vector<double> xs, std::vector<double> ys) {
  return [xs, ys](const std::vector<ad::Var<double>>& th) {
    const auto n = static_cast<int>(xs.size());
    auto x = ad::constant(Tensor<double>({n}, xs));
    auto w = ad::expand(th[0], {n});
    auto z = ad::mul(w, x);
    // -[y log s(z) + (1-y) log(1 - s(z))] = softplus(z) - y z
    auto yz = ad::mul(ad::constant(Tensor<double>({n}, ys)), z);
    return ad::scale(ad::sum_all(ad::sub(ad::softplus(z), yz)), 1.0 / n);
  };
}

// Squared error of a + b x^2 style two-parameter model with a coupling term,
// so the Hessian is full.
meta::Objective<double> quadratic(std::vector<double> xs, std::vector<double> ys) {
  return [xs, ys](const std::vector<ad::Var<double>>& th) {
    ad::Var<double> total = ad::constant(Tensor<double>({1}, {0.0}));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto pred = ad::add(ad::scale(th[0], xs[i]), ad::scale(ad::mul(th[0], th[1]), xs[i] * xs[i]));
      auto r = ad::add_scalar(pred, -ys[i]);
      total = ad::add(total, ad::mul(r, r));
    }
    return ad::scale(total, 1.0 / static_cast<double>(xs.size()));
  };
}

double composed(const std::vector<double>& th, const meta::TaskObjectives<double>& task, double alpha, int steps) {
  std::vector<ad::Var<double>> v;
  for (double t : th) v.push_back(scalar_var(t));
  const auto adapted = meta::adapt<double>(v, task.train, alpha, steps, false);
  ad::GradMode::Guard off(false);
  return task.val(adapted).item();
}

}  // namespace

TEST_CASE("task membership follows the five definitions") {
  using enum TaskId;
  // y = 1
  CHECK(meta::task_label(FindingVsNone, 1) == 1);
  CHECK(meta::task_label(BenignVsNone, 1) == 1);
  CHECK(meta::task_label(MalignantVsBenign, 1) == 0);
  CHECK(meta::task_label(Screening, 1) == 0);
  CHECK(meta::task_label(MalignantVsNone, 1) == -1);
  // y = 0
  CHECK(meta::task_label(FindingVsNone, 0) == 0);
  CHECK(meta::task_label(MalignantVsNone, 0) == 0);
  CHECK(meta::task_label(BenignVsNone, 0) == 0);
  CHECK(meta::task_label(MalignantVsBenign, 0) == -1);
  CHECK(meta::task_label(Screening, 0) == 0);
  // y = 2
  CHECK(meta::task_label(FindingVsNone, 2) == 1);
  CHECK(meta::task_label(MalignantVsNone, 2) == 1);
  CHECK(meta::task_label(BenignVsNone, 2) == -1);
  CHECK(meta::task_label(MalignantVsBenign, 2) == 1);
  CHECK(meta::task_label(Screening, 2) == 1);
}

TEST_CASE("build_tasks places every breast in the right pools") {
  Rng rng(4);
  std::vector<int> ys = balanced_labels(8);
  for (int i = 0; i < 20; ++i) ys.push_back(rng.uniform_int(0, 2));
  const auto data = labelled_volumes(ys, 1);
  const auto tasks = meta::build_tasks(pointers(data));
  auto contains = [](const std::vector<const phantom::BreastSample*>& v, const phantom::BreastSample* s) {
    return std::find(v.begin(), v.end(), s) != v.end();
  };
  for (const auto& t : tasks) {
    std::size_t members = 0;
    for (const auto& s : data) {
      const bool pos = contains(t.positives, &s), neg = contains(t.negatives, &s);
      CHECK_FALSE((pos && neg));
      const int label = meta::task_label(t.id, s.y);
      CHECK(pos == (label == 1));
      CHECK(neg == (label == 0));
      members += pos || neg;
    }
    CHECK(members == t.positives.size() + t.negatives.size());
  }
  CHECK(tasks[4].positives.size() + tasks[4].negatives.size() == data.size());
}

TEST_CASE("build_tasks rejects thin tasks with counts") {
  const auto data = labelled_volumes({0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2}, 1);
  try {
    meta::build_tasks(pointers(data), 4);
    FAIL("expected rejection");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("3 positive") != std::string::npos);
  }
  CHECK_NOTHROW(meta::build_tasks(pointers(data), 3));
}

TEST_CASE("episodes are balanced and disjoint") {
  const auto data = labelled_volumes(balanced_labels(8), 2);
  const auto tasks = meta::build_tasks(pointers(data));
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    const auto& t = tasks[static_cast<std::size_t>(rep % 5)];
    const auto ep = meta::sample_episode(t, 4, 4, rng);
    REQUIRE(ep.train.size() == 4);
    REQUIRE(ep.val.size() == 4);
    CHECK(std::count(ep.train_labels.begin(), ep.train_labels.end(), 1) == 2);
    CHECK(std::count(ep.val_labels.begin(), ep.val_labels.end(), 1) == 2);
    for (const auto* a : ep.train)
      CHECK(std::find(ep.val.begin(), ep.val.end(), a) == ep.val.end());
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(meta::task_label(t.id, ep.train[i]->y) == ep.train_labels[i]);
      CHECK(meta::task_label(t.id, ep.val[i]->y) == ep.val_labels[i]);
    }
  }
}

TEST_CASE("adapt: zero steps is the identity") {
  const auto loss = logistic({1, -2}, {1, 0});
  const std::vector<ad::Var<double>> th{scalar_var(0.7)};
  const auto out = meta::adapt<double>(th, loss, 0.1, 0, false);
  CHECK(out[0].value()[0] == 0.7);
}

TEST_CASE("adapt: one logistic step matches the closed form") {
  const std::vector<double> xs{0.5, -1.5, 2.0}, ys{1, 0, 1};
  const double w = 0.3, alpha = 0.05;
  // dL/dw = mean (sigmoid(w x) - y) x
  double g = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) g += (1 / (1 + std::exp(-w * xs[i])) - ys[i]) * xs[i];
  g /= 3;
  for (bool create_graph : {false, true}) {
    const auto out = meta::adapt<double>({scalar_var(w)}, logistic(xs, ys), alpha, 1, create_graph);
    CHECK(std::abs(out[0].value()[0] - (w - alpha * g)) < 1e-6);
  }
}

TEST_CASE("adapt leaves its inputs untouched") {
  Rng rng(8);
  const std::vector<ad::Var<double>> th{scalar_var(0.4), scalar_var(-0.2)};
  const auto before0 = th[0].value(), before1 = th[1].value();
  const auto a = meta::adapt<double>(th, quadratic({1, 2}, {1, -1}), 0.1, 3, true);
  const auto b = meta::adapt<double>(th, quadratic({-1, 0.5}, {2, 0}), 0.1, 3, false);
  CHECK(th[0].value() == before0);
  CHECK(th[1].value() == before1);
  CHECK(a[0].value()[0] != b[0].value()[0]);
}

TEST_CASE("adapt rejects a non-finite loss") {
  meta::Objective<double> bad = [](const std::vector<ad::Var<double>>& th) {
    return ad::scale(ad::sum_all(th[0]), std::nan(""));
  };
  CHECK_THROWS_AS(meta::adapt<double>({scalar_var(1)}, bad, 0.1, 1, false), std::runtime_error);
}

TEST_CASE("second-order meta-gradient matches finite differences of adapt-then-validate") {
  Rng rng(21);
  double worst = 0;
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> xtr, ytr, xva, yva;
    for (int i = 0; i < 4; ++i) {
      xtr.push_back(rng.uniform(-1, 1));
      ytr.push_back(rng.uniform(-1, 1));
      xva.push_back(rng.uniform(-1, 1));
      yva.push_back(rng.uniform(-1, 1));
    }
    const meta::TaskObjectives<double> task{quadratic(xtr, ytr), quadratic(xva, yva)};
    const std::vector<double> th{rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const double alpha = 0.2;
    const int steps = 3;
    const auto g = meta::meta_gradient<double>({Tensor<double>({1}, {th[0]}), Tensor<double>({1}, {th[1]})}, task,
                                               alpha, steps, false);
    for (int k = 0; k < 2; ++k) {
      const double h = 1e-5;
      auto up = th, dn = th;
      up[static_cast<std::size_t>(k)] += h;
      dn[static_cast<std::size_t>(k)] -= h;
      const double fd = (composed(up, task, alpha, steps) - composed(dn, task, alpha, steps)) / (2 * h);
      worst = std::max(worst, testing::relative_error(g[static_cast<std::size_t>(k)][0], fd));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("first- and second-order meta-gradients agree as alpha vanishes") {
  Rng rng(5);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> x, y;
    for (int i = 0; i < 5; ++i) {
      x.push_back(rng.uniform(-1, 1));
      y.push_back(rng.uniform(-1, 1));
    }
    const meta::TaskObjectives<double> task{quadratic(x, y), quadratic(y, x)};
    const std::vector<Tensor<double>> th{Tensor<double>({1}, {rng.uniform(-1, 1)}),
                                         Tensor<double>({1}, {rng.uniform(-1, 1)})};
    const auto so = meta::meta_gradient<double>(th, task, 1e-6, 5, false);
    const auto fo = meta::meta_gradient<double>(th, task, 1e-6, 5, true);
    for (int k = 0; k < 2; ++k)
      CHECK(testing::relative_error(so[static_cast<std::size_t>(k)][0], fo[static_cast<std::size_t>(k)][0]) < 1e-2);
  }
}

TEST_CASE("meta_update averages task gradients") {
  using G = std::vector<Tensor<double>>;
  const G theta0{Tensor<double>({2}, {1.0, -2.0})};
  SUBCASE("zero gradient") {
    G th = theta0;
    const std::vector<G> grads{G{Tensor<double>({2})}};
    CHECK(meta::meta_update<double>(th, grads, 0.5));
    CHECK(th[0] == theta0[0]);
  }
  SUBCASE("equal and opposite") {
    G th = theta0;
    const std::vector<G> grads{G{Tensor<double>({2}, {0.3, -7.0})}, G{Tensor<double>({2}, {-0.3, 7.0})}};
    CHECK(meta::meta_update<double>(th, grads, 0.5));
    CHECK(th[0] == theta0[0]);
  }
  SUBCASE("mean and sum") {
    const std::vector<G> grads{G{Tensor<double>({2}, {1.0, 2.0})}, G{Tensor<double>({2}, {3.0, 2.0})}};
    G mean = theta0, sum = theta0;
    meta::meta_update<double>(mean, grads, 0.5);
    meta::meta_update<double>(sum, grads, 0.5, true);
    CHECK(mean[0][0] == doctest::Approx(0.0));
    CHECK(mean[0][1] == doctest::Approx(-3.0));
    CHECK(sum[0][0] == doctest::Approx(-1.0));
    CHECK(sum[0][1] == doctest::Approx(-4.0));
  }
  SUBCASE("non-finite gradient skips the update") {
    G th = theta0;
    const std::vector<G> grads{G{Tensor<double>({2}, {std::nan(""), 1.0})}};
    CHECK_FALSE(meta::meta_update<double>(th, grads, 0.5));
    CHECK(th[0] == theta0[0]);
  }
}

TEST_CASE("curriculum: singleton buffers make the draw deterministic") {
  meta::Curriculum c;
  const double r[] = {0.05, -0.2, 0.0, 0.0, 0.0};
  for (int t = 0; t < 5; ++t) c.push_reward(t, r[t]);
  Rng rng(1);
  for (int rep = 0; rep < 20; ++rep)
    for (int task : c.sample(5, rng)) CHECK(task == 1);
}

TEST_CASE("curriculum: all-zero buffers select uniformly") {
  meta::Curriculum c;
  for (int t = 0; t < 5; ++t) c.push_reward(t, 0.0);
  Rng rng(2);
  std::array<int, 5> counts{};
  const int n = 10000;
  for (int task : c.sample(n, rng)) ++counts[static_cast<std::size_t>(task)];
  double chi2 = 0;
  for (int k : counts) chi2 += (k - n / 5.0) * (k - n / 5.0) / (n / 5.0);
  CHECK(chi2 < 18.47);  // df 4, p = 0.001
}

TEST_CASE("curriculum: two-element buffers match enumerated probabilities") {
  // Win probability of each task by enumerating every draw combination
  // and splitting ties evenly.
  auto enumerate = [](const std::vector<std::vector<double>>& bufs) {
    std::vector<double> p(bufs.size(), 0.0);
    std::vector<std::size_t> idx(bufs.size(), 0);
    double weight_total = 0;
    while (true) {
      double w = 1, best = -1;
      std::vector<std::size_t> ties;
      for (std::size_t t = 0; t < bufs.size(); ++t) {
        w /= static_cast<double>(bufs[t].size());
        const double a = std::abs(bufs[t][idx[t]]);
        if (a > best) {
          best = a;
          ties.assign(1, t);
        } else if (a == best) {
          ties.push_back(t);
        }
      }
      for (auto t : ties) p[t] += w / static_cast<double>(ties.size());
      weight_total += w;
      std::size_t k = 0;
      while (k < bufs.size() && ++idx[k] == bufs[k].size()) idx[k++] = 0;
      if (k == bufs.size()) break;
    }
    CHECK(weight_total == doctest::Approx(1.0));
    return p;
  };
  const std::vector<std::vector<std::vector<double>>> cases{
      {{1.0, 0.0}, {0.0}, {0.0}, {0.0}, {0.0}},
      {{0.3, -0.5}, {0.4}, {0.1, 0.0}, {0.0}, {-0.4, 0.2}},
  };
  for (const auto& bufs : cases) {
    meta::Curriculum c;
    for (int t = 0; t < 5; ++t)
      for (double r : bufs[static_cast<std::size_t>(t)]) c.push_reward(t, r);
    const auto p = enumerate(bufs);
    Rng rng(77);
    const int n = 10000;
    std::array<int, 5> counts{};
    for (int task : c.sample(n, rng)) ++counts[static_cast<std::size_t>(task)];
    for (std::size_t t = 0; t < 5; ++t) {
      const double sigma = std::sqrt(n * p[t] * (1 - p[t]));
      CHECK(std::abs(counts[t] - n * p[t]) <= 3 * sigma + 1e-9);
    }
  }
  CHECK(enumerate({{1.0, 0.0}, {0.0}, {0.0}, {0.0}, {0.0}})[0] == doctest::Approx(0.6));
}

TEST_CASE("curriculum: cold start covers every task") {
  meta::Curriculum c;
  Rng rng(9);
  std::array<int, 5> counts{};
  for (int task : c.sample(5000, rng)) ++counts[static_cast<std::size_t>(task)];
  for (int k : counts) CHECK(k > 800);
  c.push_reward(0, 0.5);
  for (int task : c.sample(200, rng)) CHECK(task != 0);
}

TEST_CASE("observe turns AUC changes into rewards") {
  meta::Curriculum c(5, 3);
  CHECK(c.observe(0, 0.5, 0.6) == doctest::Approx(0.1));
  CHECK(c.observe(0, 0.5, 0.6) == doctest::Approx(0.0));
  CHECK(c.observe(0, 0.5, 0.52) == doctest::Approx(-0.08));
  CHECK(c.observe(1, 0.7, 0.6) == doctest::Approx(-0.1));
  c.observe(0, 0.5, 0.5);
  CHECK(c.buffer(0).size() == 3);
  CHECK(c.buffer(0).front() == doctest::Approx(0.0));
  c.push_reward(2, std::nan(""));
  CHECK(c.buffer(2).back() == 0.0);
}

TEST_CASE("meta_train: zero iterations return the initial parameters") {
  const auto data = labelled_volumes(balanced_labels(8), 3);
  const auto spec = presets::diagnosis_net();
  const auto init = nn::init_parameters(spec, 5);
  meta::MetaConfig cfg;
  cfg.iterations = 0;
  const auto r = meta::meta_train(pointers(data), init, cfg, 1);
  CHECK(r.params == init);
  CHECK(r.log.empty());
}

TEST_CASE("meta_train: log accounting and determinism") {
  const auto data = labelled_volumes(balanced_labels(8), 3);
  const auto spec = presets::diagnosis_net();
  const auto init = nn::init_parameters(spec, 5);
  meta::MetaConfig cfg;
  cfg.iterations = 2;
  cfg.tasks_per_batch = 3;
  cfg.adapt_steps = 2;
  cfg.beta = 0.01;
  const auto a = meta::meta_train(pointers(data), init, cfg, 11);
  const auto b = meta::meta_train(pointers(data), init, cfg, 11);
  CHECK(a.log.size() == 6);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == init);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].iteration == static_cast<int>(i / 3));
    CHECK(a.log[i].auc_before >= 0);
    CHECK(a.log[i].auc_after <= 1);
    CHECK(std::isfinite(a.log[i].reward));
  }
  // Buffers never touched: running statistics are those of the initializer.
  for (const auto& e : a.params.entries())
    if (!e.trainable) CHECK(e.value == init.at(e.name));

  const auto path = std::filesystem::temp_directory_path() / "bscreen_meta_log.csv";
  meta::write_meta_log_csv(path, a.log);
  std::ifstream f(path);
  std::string header, line;
  std::getline(f, header);
  CHECK(header == "iteration,task,auc_before,auc_after,reward,aborted");
  int rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == 6);
  std::filesystem::remove(path);
}

TEST_CASE("single-batch recalibration reproduces batch statistics") {
  const auto data = labelled_volumes(balanced_labels(3), 6);
  const auto spec = presets::diagnosis_net();
  auto params = nn::init_parameters(spec, 2);
  const auto set = pointers(data);
  meta::recalibrate_batch_norm(spec, params, set, 16);

  std::vector<Tensor<float>> inputs;
  for (const auto* s : set) inputs.push_back(s->as_input());
  Tensor<float> x({static_cast<int>(set.size()), 1, 16, 32, 32});
  for (std::size_t i = 0; i < inputs.size(); ++i)
    std::copy(inputs[i].values().begin(), inputs[i].values().end(),
              x.values().begin() + static_cast<std::ptrdiff_t>(i * inputs[i].size()));
  const auto eval = nn::infer(spec, params, x);
  nn::ForwardContext<float> ctx;
  ctx.train = true;
  const auto train = nn::forward(spec, nn::make_vars(params, false), ad::constant(x), ctx).output.value();
  for (std::size_t i = 0; i < eval.size(); ++i) CHECK(eval[i] == doctest::Approx(train[i]).epsilon(1e-3));
}

TEST_CASE("fine_tune keeps the starting point as a candidate") {
  const auto train = labelled_volumes(balanced_labels(4), 7);
  const auto val = labelled_volumes(balanced_labels(3), 8);
  const auto spec = presets::diagnosis_net();
  const auto init = nn::init_parameters(spec, 3);
  meta::FineTuneConfig cfg;
  cfg.epochs = 2;
  const auto r = meta::fine_tune(spec, init, pointers(train), pointers(val), cfg, 1);
  REQUIRE(r.val_history.size() == 3);
  CHECK(r.val_auc >= r.val_history[0]);
  CHECK(r.val_auc == *std::max_element(r.val_history.begin(), r.val_history.end()));
  const auto again = meta::fine_tune(spec, init, pointers(train), pointers(val), cfg, 1);
  CHECK(again.params == r.params);

  // Reported validation AUC agrees with the pairwise oracle on fresh scores.
  const auto scores = meta::diagnose_all(spec, r.params, pointers(val));
  std::vector<int> labels;
  for (const auto& s : val) labels.push_back(s.y == 2);
  CHECK(metrics::roc_auc(scores, labels) == doctest::Approx(r.val_auc).epsilon(1e-12));
}

TEST_CASE("diagnose: range, determinism, side invariance and extent checks") {
  const auto data = labelled_volumes({0, 1, 2, 2}, 9);
  const auto spec = presets::diagnosis_net();
  const auto params = nn::init_parameters(spec, 4);
  for (const auto& s : data) {
    const double p = meta::diagnose(spec, params, s);
    CHECK(p >= 0);
    CHECK(p <= 1);
    CHECK(meta::diagnose(spec, params, s) == p);
    auto flipped = s;
    flipped.side = s.side == phantom::Side::Left ? phantom::Side::Right : phantom::Side::Left;
    flipped.patient_id = "other";
    CHECK(meta::diagnose(spec, params, flipped) == p);
  }
  const auto batch = meta::diagnose_all(spec, params, pointers(data));
  for (std::size_t i = 0; i < data.size(); ++i)
    CHECK(batch[i] == doctest::Approx(meta::diagnose(spec, params, data[i])).epsilon(1e-5));
  auto wrong = data[0];
  wrong.extents = {16, 16, 8};
  wrong.volume.resize(wrong.extents.voxels());
  CHECK_THROWS_AS(meta::diagnose(spec, params, wrong), ShapeError);
}
