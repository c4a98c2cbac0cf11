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

#include <filesystem>
#include <string>
#include <string_view>

#include "bscreen/nn.hpp"

namespace bscreen {

struct Checkpoint {
  nn::NetworkSpec spec;
  nn::ParameterSet params;
};

/// Layout: "BSCRCKPT", u32 version, spec text, mode flag, named float32 blobs,
/// then a 64-bit FNV-1a checksum of everything before it. All little-endian.
std::string encode_checkpoint(const nn::NetworkSpec& spec, const nn::ParameterSet& params);
/// Throws io::FormatError on a bad magic, version, checksum or truncation.
Checkpoint decode_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const nn::NetworkSpec& spec, const nn::ParameterSet& params);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace bscreen
