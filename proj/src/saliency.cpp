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

#include "bscreen/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "bscreen/binary_io.hpp"
#include "bscreen/log.hpp"
#include "bscreen/optim.hpp"
#include "bscreen/rng.hpp"

namespace bscreen::saliency {

EerResult eer_threshold(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("eer_threshold: scores and labels differ in length");
  std::vector<std::pair<double, int>> v;
  long long pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw std::invalid_argument("eer_threshold: non-finite score");
    if (labels[i] != 0 && labels[i] != 1) throw std::invalid_argument("eer_threshold: labels must be 0 or 1");
    v.emplace_back(scores[i], labels[i]);
    (labels[i] ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("eer_threshold: both classes are required");
  std::sort(v.begin(), v.end());

  // Region r (0..k) holds thresholds in [s_r, s_{r+1}) with s_0 = -inf and
  // s_{k+1} = +inf; scores up to s_r are called negative.
  std::vector<double> distinct;
  std::vector<long long> fn{0}, tn{0};
  for (std::size_t i = 0; i < v.size();) {
    std::size_t j = i;
    long long p = 0, n = 0;
    for (; j < v.size() && v[j].first == v[i].first; ++j) (v[j].second ? p : n)++;
    distinct.push_back(v[i].first);
    fn.push_back(fn.back() + p);
    tn.push_back(tn.back() + n);
    i = j;
  }
  const std::size_t k = distinct.size();
  // |FPR - FNR| * pos * neg, exact in integers.
  auto gap = [&](std::size_t r) { return std::llabs((neg - tn[r]) * pos - fn[r] * neg); };
  long long best = gap(0);
  for (std::size_t r = 1; r <= k; ++r) best = std::min(best, gap(r));
  std::size_t lo = 0;
  while (gap(lo) != best) ++lo;
  std::size_t hi = lo;
  while (hi + 1 <= k && gap(hi + 1) == best) ++hi;

  const double lower = lo == 0 ? distinct.front() : distinct[lo - 1];
  const double upper = hi == k ? distinct.back() : distinct[hi];
  EerResult r;
  r.threshold = 0.5 * (lower + upper);
  long long fp = 0, fnn = 0;
  for (const auto& [s, l] : v) {
    const bool called = s > r.threshold;
    fp += called && !l;
    fnn += !called && l;
  }
  r.fpr = static_cast<double>(fp) / static_cast<double>(neg);
  r.fnr = static_cast<double>(fnn) / static_cast<double>(pos);
  return r;
}

// ---------------------------------------------------------------------------
// Loss

template <class T>
ad::Var<T> total_variation(const ad::Var<T>& mask) {
  if (mask.shape().size() != 5) throw ShapeError("total_variation: mask must be [N, 1, D, H, W]");
  ad::Var<T> sum = ad::sum_all(ad::abs(ad::diff_axis(mask, 2)));
  sum = ad::add(sum, ad::sum_all(ad::abs(ad::diff_axis(mask, 3))));
  sum = ad::add(sum, ad::sum_all(ad::abs(ad::diff_axis(mask, 4))));
  return ad::scale(sum, 1.0 / static_cast<double>(mask.size()));
}

template <class T>
ad::Var<T> mask_area(const ad::Var<T>& mask) {
  return ad::scale(ad::sum_all(mask), 1.0 / static_cast<double>(mask.size()));
}

namespace {

// Mean over the batch of y_i * log p(malignant | input_i), or of y_i * p.
template <class T>
ad::Var<T> weighted_malignancy(const nn::NetworkSpec& encoder, const nn::ParamVars<T>& vars,
                               const ad::Var<T>& input, std::span<const int> y, bool log_scale) {
  nn::ForwardContext<T> ctx;
  const auto logits = nn::forward(encoder, vars, input, ctx).output;
  const int n = logits.shape()[0], k = logits.shape()[1];
  Tensor<T> pick({n, k});
  for (int i = 0; i < n; ++i) pick[static_cast<std::size_t>(i * k + 1)] = static_cast<T>(y[static_cast<std::size_t>(i)]);
  auto logp = ad::log_softmax_rows(logits);
  if (!log_scale) logp = ad::exp(logp);
  return ad::scale(ad::sum_all(ad::mul(logp, ad::constant(pick))), 1.0 / n);
}

}  // namespace

template <class T>
LossParts<T> saliency_loss(const ad::Var<T>& mask, const Tensor<T>& x, std::span<const int> y,
                           const nn::NetworkSpec& encoder, const nn::ParamVars<T>& encoder_vars,
                           const LossWeights& w) {
  if (mask.shape() != x.shape()) throw ShapeError("saliency_loss: mask and volume extents differ");
  if (x.shape().size() != 5 || static_cast<std::size_t>(x.shape()[0]) != y.size())
    throw ShapeError("saliency_loss: expected [N, 1, D, H, W] volumes with N labels");
  LossParts<T> p;
  p.tv = total_variation(mask);
  p.area = mask_area(mask);
  const auto xc = ad::constant(x);
  p.preserve = weighted_malignancy(encoder, encoder_vars, ad::mul(mask, xc), y, true);
  p.destroy = weighted_malignancy(encoder, encoder_vars, ad::mul(ad::add_scalar(ad::scale(mask, -1.0), 1.0), xc), y,
                                  w.destroy_form == DestroyForm::LogProbability);
  p.total = ad::add(ad::add(ad::scale(p.tv, w.tv), ad::scale(p.area, w.area)),
                    ad::add(ad::scale(p.preserve, -w.preserve), ad::scale(p.destroy, w.destroy)));
  return p;
}

template ad::Var<float> total_variation(const ad::Var<float>&);
template ad::Var<double> total_variation(const ad::Var<double>&);
template ad::Var<float> mask_area(const ad::Var<float>&);
template ad::Var<double> mask_area(const ad::Var<double>&);
template LossParts<float> saliency_loss(const ad::Var<float>&, const Tensor<float>&, std::span<const int>,
                                        const nn::NetworkSpec&, const nn::ParamVars<float>&, const LossWeights&);
template LossParts<double> saliency_loss(const ad::Var<double>&, const Tensor<double>&, std::span<const int>,
                                         const nn::NetworkSpec&, const nn::ParamVars<double>&, const LossWeights&);

// ---------------------------------------------------------------------------
// Decoder

template <class T>
EncoderFeatures<T> encoder_features(const nn::NetworkSpec& encoder, const nn::ParamVars<T>& encoder_vars,
                                    const Tensor<T>& x) {
  ad::GradMode::Guard off(false);
  nn::ForwardContext<T> ctx;
  const auto r = nn::forward(encoder, encoder_vars, ad::constant(x), ctx);
  if (r.taps.size() != 4) throw ShapeError("encoder must expose exactly four taps");
  EncoderFeatures<T> f;
  f.deepest = r.taps[3].value();
  f.skips = {ad::constant(r.taps[2].value()), ad::constant(r.taps[1].value()), ad::constant(r.taps[0].value()),
             ad::constant(x)};
  return f;
}

template EncoderFeatures<float> encoder_features(const nn::NetworkSpec&, const nn::ParamVars<float>&,
                                                 const Tensor<float>&);
template EncoderFeatures<double> encoder_features(const nn::NetworkSpec&, const nn::ParamVars<double>&,
                                                  const Tensor<double>&);

namespace {

Tensor<float> stack_inputs(std::span<const phantom::BreastSample* const> samples) {
  std::vector<Tensor<float>> inputs;
  for (const auto* s : samples) inputs.push_back(s->as_input());
  std::vector<const Tensor<float>*> ptrs;
  for (const auto& t : inputs) ptrs.push_back(&t);
  return stack<float>(ptrs, Shape(inputs.at(0).shape().begin() + 1, inputs.at(0).shape().end()));
}

void check_extents(const nn::NetworkSpec& encoder, const phantom::BreastSample& s) {
  if (Shape{1, s.extents.z, s.extents.y, s.extents.x} != encoder.input)
    throw ShapeError("volume " + s.id() + " does not match the encoder input " + bscreen::to_string(encoder.input));
}

}  // namespace

Tensor<float> masks(const SaliencyModel& model, const Tensor<float>& x) {
  ad::GradMode::Guard off(false);
  const auto feats = encoder_features(model.encoder, nn::make_vars(model.encoder_params, false), x);
  nn::ForwardContext<float> ctx;
  ctx.skips = feats.skips;
  return nn::forward(model.decoder, nn::make_vars(model.decoder_params, false), ad::constant(feats.deepest), ctx)
      .output.value();
}

std::vector<float> mask(const SaliencyModel& model, const phantom::BreastSample& sample) {
  check_extents(model.encoder, sample);
  const auto m = masks(model, sample.as_input());
  return {m.values().begin(), m.values().end()};
}

SaliencyResult train_saliency(std::span<const phantom::BreastSample* const> train, const nn::NetworkSpec& encoder,
                              const nn::ParameterSet& encoder_params, const SaliencyConfig& c, std::uint64_t seed) {
  if (train.size() < 2) throw std::invalid_argument("train_saliency: need at least two volumes");
  for (const auto* s : train) check_extents(encoder, *s);
  SaliencyResult result;
  auto& model = result.model;
  model.encoder = encoder;
  model.encoder_params = encoder_params;
  model.encoder_params.training = false;
  model.decoder = presets::saliency_decoder(encoder, c.preset);
  model.decoder_params = nn::init_parameters(model.decoder, derive_seed(seed, 1));

  const auto enc_vars = nn::make_vars(model.encoder_params, false);
  optim::AdamState<float> adam;
  const optim::AdamOptions opts{c.lr};
  Rng rng(derive_seed(seed, 2));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    SaliencyEpoch log{epoch};
    int batches = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(c.batch)) {
      const std::size_t end = std::min(order.size(), s + static_cast<std::size_t>(c.batch));
      if (end - s < 2) continue;  // batch statistics need two volumes
      std::vector<const phantom::BreastSample*> part;
      std::vector<int> y;
      for (std::size_t k = s; k < end; ++k) {
        part.push_back(train[order[k]]);
        y.push_back(train[order[k]]->y == 2 ? 1 : 0);
      }
      const auto x = stack_inputs(part);
      const auto feats = encoder_features(model.encoder, enc_vars, x);

      ad::GradMode::Guard on(true);
      const auto dec_vars = nn::make_vars(model.decoder_params, true);
      nn::ForwardContext<float> ctx;
      ctx.train = true;
      ctx.running_stats = &model.decoder_params;
      ctx.skips = feats.skips;
      const auto m = nn::forward(model.decoder, dec_vars, ad::constant(feats.deepest), ctx).output;
      const auto loss = saliency_loss<float>(m, x, y, model.encoder, enc_vars, c.weights);
      if (!std::isfinite(loss.total.item())) throw optim::NonFiniteGradient("saliency loss is not finite");
      const auto trainable = dec_vars.trainable_vars();
      const auto grads = nn::to_parameter_map(dec_vars, ad::grad<float>(loss.total, trainable));
      optim::adam_step(model.decoder_params, grads, adam, opts);

      log.loss += loss.total.item();
      log.tv += loss.tv.item();
      log.area += loss.area.item();
      log.preserve += loss.preserve.item();
      log.destroy += loss.destroy.item();
      ++batches;
    }
    if (batches > 0) {
      for (double* v : {&log.loss, &log.tv, &log.area, &log.preserve, &log.destroy}) *v /= batches;
    }
    result.history.push_back(log);
    log::info("saliency epoch " + std::to_string(epoch) + " loss " + std::to_string(log.loss) + " area " +
              std::to_string(log.area));
  }
  model.decoder_params.training = false;
  return result;
}

// ---------------------------------------------------------------------------
// Localization

namespace {

struct DisjointSets {
  std::vector<std::uint32_t> parent;
  explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0u); }
  std::uint32_t find(std::uint32_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(std::uint32_t a, std::uint32_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (b < a) std::swap(a, b);
    parent[b] = a;  // the smaller index stays root
  }
};

}  // namespace

std::vector<Component> connected_components(std::span<const std::uint8_t> binary, const phantom::Extents& e,
                                            std::span<const float> values) {
  if (binary.size() != e.voxels()) throw ShapeError("connected_components: mask size does not match extents");
  if (!values.empty() && values.size() != binary.size())
    throw ShapeError("connected_components: value volume does not match extents");
  DisjointSets sets(binary.size());
  for (int k = 0; k < e.z; ++k)
    for (int j = 0; j < e.y; ++j)
      for (int i = 0; i < e.x; ++i) {
        const auto v = static_cast<std::uint32_t>(e.index(i, j, k));
        if (!binary[v]) continue;
        if (i + 1 < e.x && binary[v + 1]) sets.unite(v, v + 1);
        if (j + 1 < e.y && binary[e.index(i, j + 1, k)]) sets.unite(v, static_cast<std::uint32_t>(e.index(i, j + 1, k)));
        if (k + 1 < e.z && binary[e.index(i, j, k + 1)]) sets.unite(v, static_cast<std::uint32_t>(e.index(i, j, k + 1)));
      }
  std::vector<Component> out;
  std::vector<double> sums;
  std::vector<std::int32_t> slot(binary.size(), -1);
  for (int k = 0; k < e.z; ++k)
    for (int j = 0; j < e.y; ++j)
      for (int i = 0; i < e.x; ++i) {
        const auto v = static_cast<std::uint32_t>(e.index(i, j, k));
        if (!binary[v]) continue;
        const auto root = sets.find(v);
        if (slot[root] < 0) {
          slot[root] = static_cast<std::int32_t>(out.size());
          out.push_back({{i, j, k, i + 1, j + 1, k + 1}, 0, 0});
          sums.push_back(0);
        }
        auto& c = out[static_cast<std::size_t>(slot[root])];
        c.box.x0 = std::min(c.box.x0, i);
        c.box.y0 = std::min(c.box.y0, j);
        c.box.z0 = std::min(c.box.z0, k);
        c.box.x1 = std::max(c.box.x1, i + 1);
        c.box.y1 = std::max(c.box.y1, j + 1);
        c.box.z1 = std::max(c.box.z1, k + 1);
        ++c.voxels;
        sums[static_cast<std::size_t>(slot[root])] += values.empty() ? 1.0 : values[v];
      }
  for (std::size_t c = 0; c < out.size(); ++c) out[c].mean_value = sums[c] / static_cast<double>(out[c].voxels);
  return out;
}

std::vector<metrics::Detection> mask_detections(std::span<const float> m, const phantom::Extents& extents,
                                                const LocalizeConfig& c) {
  if (!(c.zeta > 0 && c.zeta < 1)) throw std::invalid_argument("localize: zeta must lie in (0, 1)");
  std::vector<std::uint8_t> binary(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) binary[i] = m[i] > c.zeta;
  std::vector<metrics::Detection> out;
  for (const auto& comp : connected_components(binary, extents, m))
    if (comp.voxels >= c.min_voxels) out.push_back({comp.box, comp.mean_value});
  return out;
}

Localization localize(const SaliencyModel& model, const phantom::BreastSample& sample, double eer_threshold,
                      const LocalizeConfig& c) {
  check_extents(model.encoder, sample);
  Localization r;
  const auto logits = nn::infer(model.encoder, model.encoder_params, sample.as_input());
  r.diagnosis = nn::class_probability(logits, 1)[0];
  r.positive = r.diagnosis > eer_threshold;
  if (r.positive) r.detections = mask_detections(mask(model, sample), sample.extents, c);
  return r;
}

void write_mask(const std::filesystem::path& path, std::span<const float> m, const phantom::Extents& e) {
  if (m.size() != e.voxels()) throw ShapeError("write_mask: mask size does not match extents");
  io::ByteWriter w;
  w.bytes("BSMK");
  w.u32(static_cast<std::uint32_t>(e.x));
  w.u32(static_cast<std::uint32_t>(e.y));
  w.u32(static_cast<std::uint32_t>(e.z));
  for (float v : m) w.f32(v);
  io::write_file(path, w.buffer());
}

std::vector<float> read_mask(const std::filesystem::path& path, phantom::Extents& e) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes);
  if (r.bytes(4) != "BSMK") throw io::FormatError(path.string() + ": not a mask file");
  e.x = static_cast<int>(r.u32());
  e.y = static_cast<int>(r.u32());
  e.z = static_cast<int>(r.u32());
  if (r.remaining() != e.voxels() * 4) throw io::FormatError(path.string() + ": mask payload has the wrong size");
  std::vector<float> m(e.voxels());
  for (auto& v : m) v = r.f32();
  return m;
}

}  // namespace bscreen::saliency
