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

#include "bscreen/checkpoint.hpp"

#include "bscreen/binary_io.hpp"

namespace bscreen {

namespace {
constexpr std::string_view kMagic = "BSCRCKPT";
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::string encode_checkpoint(const nn::NetworkSpec& spec, const nn::ParameterSet& params) {
  io::ByteWriter w;
  w.bytes(kMagic);
  w.u32(kVersion);
  w.str(spec.serialize());
  w.u8(params.training ? 1 : 0);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    w.str(e.name);
    w.u8(e.trainable ? 1 : 0);
    w.u32(static_cast<std::uint32_t>(e.value.rank()));
    for (int d : e.value.shape()) w.i32(d);
    for (float v : e.value.values()) w.f32(v);
  }
  w.u64(io::fnv1a(w.buffer()));
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.size() < kMagic.size() + 12 || bytes.substr(0, kMagic.size()) != kMagic) {
    throw io::FormatError("not a checkpoint (bad magic)");
  }
  const auto body = bytes.substr(0, bytes.size() - 8);
  io::ByteReader tail(bytes.substr(bytes.size() - 8));
  if (tail.u64() != io::fnv1a(body)) throw io::FormatError("checkpoint checksum mismatch");

  io::ByteReader r(body);
  r.bytes(kMagic.size());
  if (const auto v = r.u32(); v != kVersion) {
    throw io::FormatError("unsupported checkpoint version " + std::to_string(v));
  }
  Checkpoint ck;
  ck.spec = nn::NetworkSpec::parse(r.str());
  ck.params.training = r.u8() != 0;
  const auto count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const bool trainable = r.u8() != 0;
    Shape shape(r.u32());
    for (auto& d : shape) {
      d = r.i32();
      if (d < 0) throw io::FormatError("negative extent in '" + name + "'");
    }
    if (numel(shape) * 4 > r.remaining()) throw io::FormatError("truncated blob '" + name + "'");
    Tensor<float> t(shape);
    for (auto& v : t.values()) v = r.f32();
    ck.params.add(std::move(name), std::move(t), trainable);
  }
  if (r.remaining() != 0) throw io::FormatError("trailing bytes in checkpoint");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const nn::NetworkSpec& spec, const nn::ParameterSet& params) {
  io::write_file(path, encode_checkpoint(spec, params));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace bscreen
