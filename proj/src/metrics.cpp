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

#include "bscreen/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace bscreen::metrics {

namespace {

void check_cases(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("roc: scores/labels size mismatch");
  for (double s : scores)
    if (!std::isfinite(s)) throw std::invalid_argument("roc: non-finite score");
  for (int l : labels)
    if (l != 0 && l != 1) throw std::invalid_argument("roc: labels must be 0 or 1");
}

}  // namespace

double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  check_cases(scores, labels);
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney with mid-ranks for ties.
  double pos_rank_sum = 0;
  std::size_t npos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) {
        pos_rank_sum += mid;
        ++npos;
      }
    i = j;
  }
  const std::size_t nneg = n - npos;
  if (npos == 0 || nneg == 0) throw std::invalid_argument("roc_auc: both classes must be present");
  const double np = static_cast<double>(npos), nn_ = static_cast<double>(nneg);
  return (pos_rank_sum - np * (np + 1) / 2) / (np * nn_);
}

double roc_auc(std::span<const ScoredCase> cases) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& c : cases) {
    s.push_back(c.score);
    l.push_back(c.label);
  }
  return roc_auc(s, l);
}

std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  check_cases(scores, labels);
  std::vector<double> thr(scores.begin(), scores.end());
  std::sort(thr.begin(), thr.end(), std::greater<>());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  thr.insert(thr.begin(), std::numeric_limits<double>::infinity());
  const auto npos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const auto nneg = static_cast<double>(labels.size()) - npos;
  std::vector<RocPoint> out;
  for (double t : thr) {
    double tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i)
      if (scores[i] >= t) (labels[i] == 1 ? tp : fp) += 1;
    out.push_back({t, npos > 0 ? tp / npos : 0.0, nneg > 0 ? fp / nneg : 0.0});
  }
  return out;
}

MatchResult match_detections(const std::vector<std::vector<double>>& dice, std::size_t lesions, double dice_min) {
  const int nd = static_cast<int>(dice.size());
  const int nl = static_cast<int>(lesions);
  for (const auto& row : dice)
    if (row.size() != lesions) throw std::invalid_argument("match_detections: Dice row width differs from the lesion count");

  struct Edge {
    int d, l;
    double v;
  };
  std::vector<Edge> edges;
  for (int d = 0; d < nd; ++d)
    for (int l = 0; l < nl; ++l)
      if (dice[d][l] >= dice_min) edges.push_back({d, l, dice[d][l]});
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) { return a.v > b.v; });

  std::vector<int> det_of(nl, -1), les_of(nd, -1);
  for (const auto& e : edges)
    if (les_of[e.d] < 0 && det_of[e.l] < 0) {
      les_of[e.d] = e.l;
      det_of[e.l] = e.d;
    }

  // Augment from each still-unmatched detection. Candidate lesions are tried
  // in descending Dice so the greedy pairs are disturbed as little as possible.
  std::vector<std::vector<int>> adj(nd);
  for (const auto& e : edges) adj[e.d].push_back(e.l);
  std::vector<char> seen;
  auto augment = [&](auto&& self, int d) -> bool {
    for (int l : adj[d]) {
      if (seen[l]) continue;
      seen[l] = 1;
      if (det_of[l] < 0 || self(self, det_of[l])) {
        les_of[d] = l;
        det_of[l] = d;
        return true;
      }
    }
    return false;
  };
  for (int d = 0; d < nd; ++d) {
    if (les_of[d] >= 0) continue;
    seen.assign(nl, 0);
    augment(augment, d);
  }

  MatchResult r;
  for (int d = 0; d < nd; ++d) {
    if (les_of[d] >= 0)
      r.matches.push_back({d, les_of[d], dice[d][les_of[d]]});
    else
      r.false_positives.push_back(d);
  }
  for (int l = 0; l < nl; ++l)
    if (det_of[l] < 0) r.missed.push_back(l);
  return r;
}

bool PatientEval::diagnosed_positive() const {
  return std::any_of(breasts.begin(), breasts.end(), [](const BreastEval& b) { return b.diagnosed_positive; });
}

std::vector<std::vector<double>> dice_matrix(std::span<const Detection> detections,
                                             const std::vector<phantom::Mask>& masks, const phantom::Extents& e) {
  std::vector<env::VoxelCounter> counters;
  counters.reserve(masks.size());
  for (const auto& m : masks) counters.emplace_back(m, e);
  std::vector<std::vector<double>> out(detections.size(), std::vector<double>(masks.size()));
  for (std::size_t d = 0; d < detections.size(); ++d)
    for (std::size_t l = 0; l < masks.size(); ++l) out[d][l] = env::dice(detections[d].box, counters[l]);
  return out;
}

std::vector<double> froc_thresholds(std::span<const PatientEval> patients) {
  std::vector<double> t;
  for (const auto& p : patients)
    for (const auto& b : p.breasts)
      for (const auto& d : b.detections) t.push_back(d.score);
  std::sort(t.begin(), t.end(), std::greater<>());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  t.insert(t.begin(), std::numeric_limits<double>::infinity());
  return t;
}

std::vector<FrocPoint> froc(std::span<const PatientEval> patients, std::span<const double> thresholds,
                            double dice_min, FrocScope scope) {
  // Dice matrices do not depend on the threshold; compute them once.
  struct Prepared {
    const BreastEval* breast;
    std::vector<std::vector<double>> dice;
    std::size_t lesions;
  };
  std::vector<std::vector<Prepared>> prepared;
  std::size_t lesions = 0, npatients = 0;
  for (const auto& p : patients) {
    if (scope == FrocScope::PositivePatients && !p.diagnosed_positive()) {
      prepared.emplace_back();
      continue;
    }
    ++npatients;
    std::vector<Prepared> pp;
    for (const auto& b : p.breasts) {
      static const std::vector<phantom::Mask> none;
      const auto& masks = b.lesion_masks ? *b.lesion_masks : none;
      lesions += masks.size();
      pp.push_back({&b, dice_matrix(b.detections, masks, b.extents), masks.size()});
    }
    prepared.push_back(std::move(pp));
  }

  std::vector<FrocPoint> out;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (const auto& pp : prepared)
      for (const auto& b : pp) {
        std::vector<std::vector<double>> kept;
        for (std::size_t d = 0; d < b.breast->detections.size(); ++d)
          if (b.breast->detections[d].score >= t) kept.push_back(b.dice[d]);
        const auto m = match_detections(kept, b.lesions, dice_min);
        tp += m.matches.size();
        fp += m.false_positives.size();
      }
    FrocPoint pt{t, 0.0, 0.0};
    if (lesions > 0) pt.tpr = static_cast<double>(tp) / static_cast<double>(lesions);
    if (npatients > 0) pt.fpp = static_cast<double>(fp) / static_cast<double>(npatients);
    out.push_back(pt);
  }
  return out;
}

double tpr_at_fpp(std::span<const FrocPoint> curve, double max_fpp) {
  double best = 0;
  for (const auto& p : curve)
    if (p.fpp <= max_fpp) best = std::max(best, p.tpr);
  return best;
}

double patient_score(std::span<const double> breast_scores) {
  if (breast_scores.empty()) throw std::invalid_argument("patient_score: no breast scores");
  return *std::max_element(breast_scores.begin(), breast_scores.end());
}

namespace {

std::string fmt(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

}  // namespace

void write_froc_csv(const std::filesystem::path& path, std::span<const FrocPoint> curve) {
  std::string s = "threshold,tpr,fpp\n";
  for (const auto& p : curve) s += fmt(p.threshold) + "," + fmt(p.tpr) + "," + fmt(p.fpp) + "\n";
  write_text(path, s);
}

void write_roc_csv(const std::filesystem::path& path, std::span<const RocPoint> curve) {
  std::string s = "threshold,tpr,fpr\n";
  for (const auto& p : curve) s += fmt(p.threshold) + "," + fmt(p.tpr) + "," + fmt(p.fpr) + "\n";
  write_text(path, s);
}

std::string svg_plot(const std::string& title, const std::string& x_label, const std::string& y_label,
                     std::span<const Series> series) {
  constexpr double W = 480, H = 360, L = 60, R = 20, T = 40, B = 50;
  double xmax = 1, ymax = 1;
  for (const auto& s : series)
    for (auto [x, y] : s.points) {
      if (std::isfinite(x)) xmax = std::max(xmax, x);
      if (std::isfinite(y)) ymax = std::max(ymax, y);
    }
  auto px = [&](double x) { return L + (W - L - R) * x / xmax; };
  auto py = [&](double y) { return H - B - (H - T - B) * y / ymax; };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  o << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\">" << x_label
    << " (0 to " << fmt(xmax) << ")</text>\n";
  o << "<text x=\"14\" y=\"" << H / 2 << "\" transform=\"rotate(-90 14 " << H / 2
    << ")\" text-anchor=\"middle\" font-size=\"12\">" << y_label << " (0 to " << fmt(ymax) << ")</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* c = colors[i % 5];
    o << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"2\" points=\"";
    for (auto [x, y] : series[i].points)
      if (std::isfinite(x) && std::isfinite(y)) o << px(x) << "," << py(y) << " ";
    o << "\"/>\n";
    o << "<text x=\"" << W - R - 120 << "\" y=\"" << H - B - 20 - 16 * static_cast<double>(i)
      << "\" font-size=\"12\" fill=\"" << c << "\">" << series[i].label << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

}  // namespace bscreen::metrics
