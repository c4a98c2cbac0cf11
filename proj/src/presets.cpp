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

#include "bscreen/presets.hpp"

#include <cmath>

namespace bscreen::presets {

namespace {

int scaled(int channels, const PresetOptions& o) {
  return std::max(1, static_cast<int>(std::lround(channels * o.width)));
}

}  // namespace

nn::NetworkSpec patch_encoder(const PresetOptions& o) {
  nn::NetworkSpec s;
  std::vector<int> blocks;
  int embed_channels;
  if (o.paper_scale) {
    // 50x100x100 -> 2x4x4 after five stride-2 blocks; 72 x 32 = 2304.
    s.input = {1, 50, 100, 100};
    blocks = {8, 16, 32, 48, 72};
    embed_channels = 72;
  } else {
    s.input = {1, 8, 16, 16};
    blocks = {4, 8};
    embed_channels = 4;
  }
  for (int c : blocks) {
    const int w = scaled(c, o);
    s.layers.insert(s.layers.end(), {nn::conv(w, 3, 2), nn::batch_norm(), nn::relu(), nn::residual(w)});
  }
  const int last = scaled(blocks.back(), o);
  s.layers.insert(s.layers.end(), {nn::conv(last, 3), nn::batch_norm(), nn::relu(),
                                   nn::conv(o.paper_scale ? embed_channels : scaled(embed_channels, o), 1), nn::relu(),
                                   nn::flatten(), nn::linear(2)});
  return s;
}

nn::NetworkSpec q_head(int embedding, int actions, const PresetOptions& o) {
  nn::NetworkSpec s;
  s.input = {embedding};
  s.layers = {nn::linear(o.paper_scale ? 512 : scaled(64, o)), nn::relu(), nn::linear(actions)};
  return s;
}

nn::NetworkSpec lesion_classifier(const PresetOptions& o) {
  nn::NetworkSpec s;
  const int growth = o.paper_scale ? 6 : scaled(4, o);
  if (o.paper_scale) {
    // 12x24x24 -> global pooling over 3x6x6.
    s.input = {1, 12, 24, 24};
    s.layers.push_back(nn::conv(12, 3, 1));
  } else {
    // 8x16x16 -> global pooling over 1x2x2.
    s.input = {1, 8, 16, 16};
    s.layers.push_back(nn::conv(scaled(4, o), 3, 2));
  }
  for (int b = 0; b < 2; ++b) {
    s.layers.insert(s.layers.end(), {nn::dense_block(2, growth), nn::transition(0.5), nn::avg_pool(2)});
  }
  s.layers.insert(s.layers.end(),
                  {nn::dense_block(2, growth), nn::batch_norm(), nn::relu(), nn::global_avg_pool(), nn::linear(2)});
  return s;
}

nn::NetworkSpec diagnosis_net(const PresetOptions& o) {
  nn::NetworkSpec s;
  if (o.paper_scale) {
    // 48x96x96 keeps every stage divisible by two.
    const int growth = 6;
    s.input = {1, 48, 96, 96};
    s.layers = {nn::conv(16, 3, 2), nn::batch_norm(), nn::relu(), nn::tap()};
    for (int b = 0; b < 3; ++b) {
      s.layers.insert(s.layers.end(), {nn::dense_block(2, growth), nn::transition(0.5), nn::avg_pool(2), nn::tap()});
    }
    s.layers.pop_back();
    s.layers.insert(s.layers.end(),
                    {nn::dense_block(2, growth), nn::transition(0.5), nn::dense_block(2, growth), nn::tap()});
  } else {
    const int growth = scaled(4, o);
    s.input = {1, 16, 32, 32};
    s.layers = {nn::avg_pool(2), nn::tap(), nn::conv(scaled(4, o), 3, 2), nn::batch_norm(), nn::relu(), nn::tap()};
    for (int b = 0; b < 2; ++b) {
      s.layers.insert(s.layers.end(), {nn::dense_block(2, growth), nn::transition(0.5), nn::avg_pool(2)});
      if (b == 0) s.layers.push_back(nn::tap());
    }
    s.layers.insert(s.layers.end(), {nn::dense_block(2, growth), nn::tap()});
  }
  s.layers.insert(s.layers.end(), {nn::batch_norm(), nn::relu(), nn::global_avg_pool(), nn::linear(2)});
  return s;
}

std::vector<Shape> tap_shapes(const nn::NetworkSpec& spec) {
  const auto shapes = nn::infer_shapes(spec);
  std::vector<Shape> taps;
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == nn::LayerKind::Tap) taps.push_back(shapes[i]);
  return taps;
}

nn::NetworkSpec saliency_decoder(const nn::NetworkSpec& encoder, const PresetOptions& o) {
  const auto taps = tap_shapes(encoder);
  if (taps.size() != 4) throw ShapeError("saliency decoder needs an encoder with exactly four taps");
  nn::NetworkSpec s;
  s.input = taps[3];
  s.skip_inputs = {taps[2], taps[1], taps[0], encoder.input};
  const std::vector<int> widths = o.paper_scale ? std::vector<int>{32, 16, 8, 4} : std::vector<int>{8, 6, 4, 2};
  for (int k = 0; k < 4; ++k) {
    s.layers.insert(s.layers.end(), {nn::upsample(2), nn::concat(k), nn::conv(o.paper_scale ? widths[static_cast<std::size_t>(k)] : scaled(widths[static_cast<std::size_t>(k)], o), 3),
                                     nn::batch_norm(), nn::relu()});
  }
  s.layers.insert(s.layers.end(), {nn::conv(1, 1), nn::sigmoid()});
  nn::infer_shapes(s);
  return s;
}

}  // namespace bscreen::presets
