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

#include "bscreen/prehoc.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "bscreen/log.hpp"
#include "bscreen/optim.hpp"
#include "bscreen/rng.hpp"

namespace bscreen::prehoc {

std::vector<int> label_detections(std::span<const Detection> detections, const phantom::BreastSample& sample,
                                  double dice_min) {
  const auto dice = metrics::dice_matrix(detections, sample.masks, sample.extents);
  std::vector<int> labels(detections.size(), 0);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    const auto& row = dice[d];
    if (row.empty()) continue;
    const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
    if (row[best] >= dice_min && sample.lesions[best].cls == phantom::LesionClass::Malignant) labels[d] = 1;
  }
  return labels;
}

Tensor<float> extract_patch(const phantom::BreastSample& sample, const env::BoundingVolume& box,
                            const nn::NetworkSpec& spec) {
  if (spec.input.size() != 4 || spec.input[0] != 1) throw ShapeError("extract_patch: classifier input must be [1, D, H, W]");
  const Shape patch{spec.input[1], spec.input[2], spec.input[3]};
  return env::resample_box(sample.volume, sample.extents, box, patch).reshaped(spec.input);
}

std::vector<double> classify(const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                             std::span<const Tensor<float>> patches) {
  std::vector<double> out;
  out.reserve(patches.size());
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < patches.size(); s += kChunk) {
    const std::size_t end = std::min(patches.size(), s + kChunk);
    std::vector<const Tensor<float>*> items;
    for (std::size_t k = s; k < end; ++k) {
      if (patches[k].shape() != spec.input) throw ShapeError("classify: patch " + std::to_string(k) + " has the wrong extents");
      items.push_back(&patches[k]);
    }
    const auto logits = nn::infer(spec, params, stack<float>(items, spec.input));
    for (float p : nn::class_probability(logits, 1)) out.push_back(p);
  }
  return out;
}

double breast_score(std::span<const double> probabilities) {
  double s = 0;
  for (double p : probabilities) s = std::max(s, p);
  return s;
}

std::vector<BreastScore> score_breasts(const nn::NetworkSpec& spec, const nn::ParameterSet& params,
                                       std::span<const BreastDetections> breasts) {
  std::vector<BreastScore> out;
  for (const auto& b : breasts) {
    std::vector<Tensor<float>> patches;
    for (const auto& d : b.detections) patches.push_back(extract_patch(*b.sample, d.box, spec));
    const auto probs = classify(spec, params, patches);
    out.push_back({b.sample->id(), b.sample->patient_id, breast_score(probs), b.sample->y == 2 ? 1 : 0});
  }
  return out;
}

double breast_auc(std::span<const BreastScore> scores) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& b : scores) {
    s.push_back(b.score);
    l.push_back(b.label);
  }
  return metrics::roc_auc(s, l);
}

double patient_auc(std::span<const BreastScore> scores) {
  std::map<std::string, std::pair<std::vector<double>, int>> by_patient;
  for (const auto& b : scores) {
    auto& p = by_patient[b.patient_id];
    p.first.push_back(b.score);
    p.second = std::max(p.second, b.label);
  }
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& [id, p] : by_patient) {
    s.push_back(metrics::patient_score(p.first));
    l.push_back(p.second);
  }
  return metrics::roc_auc(s, l);
}

namespace {

bool both_classes(std::span<const BreastScore> scores) {
  bool pos = false, neg = false;
  for (const auto& s : scores) (s.label ? pos : neg) = true;
  return pos && neg;
}

}  // namespace

ClassifierResult train_classifier(std::span<const BreastDetections> train, std::span<const BreastDetections> val,
                                  const ClassifierConfig& c, std::uint64_t seed) {
  ClassifierResult result;
  result.spec = presets::lesion_classifier(c.preset);

  std::vector<Tensor<float>> patches;
  std::vector<int> labels;
  for (const auto& b : train) {
    const auto l = label_detections(b.detections, *b.sample, c.dice_min);
    for (std::size_t d = 0; d < b.detections.size(); ++d) {
      patches.push_back(extract_patch(*b.sample, b.detections[d].box, result.spec));
      labels.push_back(l[d]);
    }
  }
  result.positives = static_cast<int>(std::count(labels.begin(), labels.end(), 1));
  result.negatives = static_cast<int>(labels.size()) - result.positives;
  if (patches.size() < 2)
    throw std::runtime_error("train_classifier: need at least two training detections, got " +
                             std::to_string(patches.size()));
  if (result.positives == 0 || result.negatives == 0)
    log::warn("lesion classifier: training detections hold a single class (" + std::to_string(result.positives) +
              " positive, " + std::to_string(result.negatives) + " negative)");

  nn::Model model(result.spec, nn::init_parameters(result.spec, derive_seed(seed, 1)));
  Rng rng(derive_seed(seed, 2));
  const bool can_select = !val.empty();

  auto evaluate = [&](const nn::ParameterSet& params) -> std::optional<double> {
    if (!can_select) return std::nullopt;
    const auto scores = score_breasts(result.spec, params, val);
    if (!both_classes(scores)) return std::nullopt;
    return breast_auc(scores);
  };
  auto consider = [&](int epoch, std::optional<double> auc) {
    if (auc && *auc > result.val_auc) {
      result.val_auc = *auc;
      result.best_epoch = epoch;
      result.params = model.params();
    }
  };
  model.set_training(false);
  consider(0, evaluate(model.params()));
  result.history.push_back({0, 0.0, result.val_auc >= 0 ? std::optional<double>(result.val_auc) : std::nullopt});

  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    model.set_training(true);
    double loss_sum = 0;
    int steps = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(c.batch)) {
      const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(c.batch));
      if (end - s < 2) continue;  // batch statistics need two samples
      std::vector<const Tensor<float>*> items;
      std::vector<int> y;
      for (std::size_t k = s; k < end; ++k) {
        items.push_back(&patches[order[k]]);
        y.push_back(labels[order[k]]);
      }
      model.forward(stack<float>(items, result.spec.input));
      double loss = 0;
      const auto grads = model.backward([&](const ad::Var<float>& out) {
        auto l = nn::cross_entropy<float>(out, y);
        loss = l.item();
        return l;
      });
      optim::sgd_step(model.params(), grads, c.lr);
      loss_sum += loss;
      ++steps;
    }
    model.set_training(false);
    const auto auc = evaluate(model.params());
    consider(epoch, auc);
    result.history.push_back({epoch, steps > 0 ? loss_sum / steps : 0.0, auc});
    log::info("lesion classifier epoch " + std::to_string(epoch) + " loss " +
              std::to_string(result.history.back().train_loss) + (auc ? " val AUC " + std::to_string(*auc) : ""));
  }
  if (result.best_epoch < 0) {
    // Validation could not rank (missing or single-class); keep the final model.
    result.params = model.params();
    result.best_epoch = c.epochs;
  }
  result.params.training = false;
  return result;
}

void write_scores_csv(const std::filesystem::path& path, std::span<const BreastScore> scores) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "breast_id,patient_id,score,label\n";
  char buf[32];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.17g", s.score);
    f << s.breast_id << ',' << s.patient_id << ',' << buf << ',' << s.label << '\n';
  }
}

std::vector<BreastScore> read_scores_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(f, line);
  if (line != "breast_id,patient_id,score,label") throw std::runtime_error(path.string() + ": unexpected scores header");
  std::vector<BreastScore> out;
  int lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cells[4];
    int n = 0;
    while (n < 4 && std::getline(ss, cells[n], ',')) ++n;
    if (n != 4) throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 4 columns");
    try {
      out.push_back({cells[0], cells[1], std::stod(cells[2]), std::stoi(cells[3])});
    } catch (const std::exception&) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return out;
}

}  // namespace bscreen::prehoc
