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

// Network presets for every model in the two pipelines. Each has a desk-scale
// and a paper-scale variant; `width` multiplies channel counts and growth rates.

#include "bscreen/nn.hpp"

namespace bscreen::presets {

struct PresetOptions {
  bool paper_scale = false;
  double width = 1.0;
};

/// Residual patch encoder with a 2-way lesion/background head. Its flattened
/// penultimate activation is the detector's observation embedding
/// (128-d at desk scale, 2304-d at paper scale).
nn::NetworkSpec patch_encoder(const PresetOptions& o = {});

/// Q-network over an embedding: hidden layer, then one value per action.
nn::NetworkSpec q_head(int embedding, int actions, const PresetOptions& o = {});

/// Dense-block classifier for detected regions.
nn::NetworkSpec lesion_classifier(const PresetOptions& o = {});

/// Dense-block whole-volume classifier. Its four Tap layers, at 1/2, 1/4, 1/8
/// and 1/16 resolution, feed the saliency decoder.
nn::NetworkSpec diagnosis_net(const PresetOptions& o = {});

/// Four upsample-concat-conv-bn-relu blocks mirroring `encoder`'s taps, then a
/// 1x1x1 conv and a sigmoid. Input: the deepest tap. Skip inputs: the
/// remaining taps deepest first, then the encoder input.
nn::NetworkSpec saliency_decoder(const nn::NetworkSpec& encoder, const PresetOptions& o = {});

/// Shapes of the activations recorded by Tap layers, in network order.
std::vector<Shape> tap_shapes(const nn::NetworkSpec& spec);

}  // namespace bscreen::presets
