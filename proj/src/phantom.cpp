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

#include "bscreen/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "bscreen/binary_io.hpp"
#include "bscreen/log.hpp"
#include "bscreen/rng.hpp"

namespace bscreen::phantom {

namespace {

constexpr std::uint64_t kSplitStream = 0x5b1175u;

std::array<double, 3> random_direction(Rng& rng) {
  while (true) {
    std::array<double, 3> d{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (n > 1e-9) return {d[0] / n, d[1] / n, d[2] / n};
  }
}

// Three passes of a clamped-edge box filter along `axis`.
void box_blur(std::vector<double>& v, const Extents& e, int axis, int radius) {
  const int n[3] = {e.x, e.y, e.z};
  const int len = n[axis];
  std::vector<double> line(static_cast<std::size_t>(len)), out(static_cast<std::size_t>(len));
  for (int pass = 0; pass < 3; ++pass) {
    for (int a = 0; a < n[(axis + 1) % 3]; ++a)
      for (int b = 0; b < n[(axis + 2) % 3]; ++b) {
        auto at = [&](int t) -> double& {
          int c[3];
          c[axis] = t;
          c[(axis + 1) % 3] = a;
          c[(axis + 2) % 3] = b;
          return v[e.index(c[0], c[1], c[2])];
        };
        for (int t = 0; t < len; ++t) line[static_cast<std::size_t>(t)] = at(t);
        for (int t = 0; t < len; ++t) {
          double s = 0;
          for (int r = -radius; r <= radius; ++r) s += line[static_cast<std::size_t>(std::clamp(t + r, 0, len - 1))];
          out[static_cast<std::size_t>(t)] = s / (2 * radius + 1);
        }
        for (int t = 0; t < len; ++t) at(t) = out[static_cast<std::size_t>(t)];
      }
  }
}

std::vector<double> background(Rng& rng, const PhantomConfig& c) {
  const Extents& e = c.extents;
  std::vector<double> tex(e.voxels());
  for (auto& v : tex) v = rng.normal();
  for (int axis = 0; axis < 3; ++axis) box_blur(tex, e, axis, 2);
  double mean = 0, var = 0;
  for (double v : tex) mean += v;
  mean /= static_cast<double>(tex.size());
  for (double v : tex) var += (v - mean) * (v - mean);
  const double norm = c.texture_noise / std::sqrt(var / static_cast<double>(tex.size()) + 1e-300);

  const auto g = random_direction(rng);
  const double span = std::abs(g[0]) * e.x + std::abs(g[1]) * e.y + std::abs(g[2]) * e.z;
  std::vector<double> out(e.voxels());
  for (int k = 0; k < e.z; ++k)
    for (int j = 0; j < e.y; ++j)
      for (int i = 0; i < e.x; ++i) {
        const double proj = (g[0] * (i - e.x / 2.0) + g[1] * (j - e.y / 2.0) + g[2] * (k - e.z / 2.0)) / span;
        const std::size_t idx = e.index(i, j, k);
        out[idx] = c.background_level + c.gradient_amplitude * proj + norm * (tex[idx] - mean);
      }
  return out;
}

struct Boundary {
  std::array<std::array<double, 3>, 4> dir{};
  std::array<double, 4> amp{}, freq{}, phase{};
};

Boundary make_boundary(std::uint64_t seed) {
  Rng rng(seed);
  Boundary b;
  double total = 0;
  for (int k = 0; k < 4; ++k) {
    b.dir[static_cast<std::size_t>(k)] = random_direction(rng);
    b.amp[static_cast<std::size_t>(k)] = rng.uniform(0.5, 1.0);
    b.freq[static_cast<std::size_t>(k)] = rng.uniform_int(2, 4);
    b.phase[static_cast<std::size_t>(k)] = rng.uniform(0, 2 * std::numbers::pi);
    total += b.amp[static_cast<std::size_t>(k)];
  }
  for (auto& a : b.amp) a /= total;
  return b;
}

// Largest extent of the lesion from its center along each axis.
double reach(const LesionSpec& l, int axis) { return l.radii[static_cast<std::size_t>(axis)] * (1 + l.roughness); }

bool fits(const LesionSpec& l, const Extents& e) {
  const int n[3] = {e.x, e.y, e.z};
  for (int a = 0; a < 3; ++a)
    if (2 * reach(l, a) + 1 > n[a] - 1) return false;
  return true;
}

LesionSpec sample_lesion(Rng& rng, const PhantomConfig& c, LesionClass cls) {
  LesionSpec l;
  l.cls = cls;
  const double r = rng.uniform(c.radius_min, c.radius_max);
  // Mildly anisotropic; the z axis is sampled at half resolution.
  l.radii = {r * rng.uniform(0.85, 1.15), r * rng.uniform(0.85, 1.15), 0.5 * r * rng.uniform(0.85, 1.15)};
  const bool malignant = cls == LesionClass::Malignant;
  l.contrast = malignant ? rng.uniform(c.malignant_contrast_min, c.malignant_contrast_max)
                         : rng.uniform(c.benign_contrast_min, c.benign_contrast_max);
  l.roughness = malignant ? c.malignant_roughness : c.benign_roughness;
  l.shape_seed = rng.next();
  int shrinks = 0;
  while (!fits(l, c.extents)) {
    for (auto& v : l.radii) v *= 0.8;
    ++shrinks;
  }
  if (shrinks > 0) {
    log::info("lesion does not fit the lattice; radii shrunk " + std::to_string(shrinks) + " time(s)");
  }
  return l;
}

void place(Rng& rng, LesionSpec& l, const Extents& e) {
  const int n[3] = {e.x, e.y, e.z};
  for (int a = 0; a < 3; ++a) {
    const double lo = reach(l, a), hi = n[a] - 1 - reach(l, a);
    l.center[static_cast<std::size_t>(a)] = rng.uniform(lo, hi);
  }
}

bool separated(const LesionSpec& a, const LesionSpec& b) {
  for (int ax = 0; ax < 3; ++ax) {
    const auto i = static_cast<std::size_t>(ax);
    if (std::abs(a.center[i] - b.center[i]) > reach(a, ax) + reach(b, ax) + 1) return true;
  }
  return false;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::vector<LesionClass> BreastSample::lesion_classes() const {
  std::vector<LesionClass> out;
  for (const auto& l : lesions) out.push_back(l.cls);
  return out;
}

Tensor<float> BreastSample::as_input() const { return Tensor<float>({1, 1, extents.z, extents.y, extents.x}, volume); }

PhantomConfig PhantomConfig::easy() {
  PhantomConfig c;
  c.lesion_count_probs = {0.3, 0.7, 0.0};
  c.radius_min = 4.0;
  c.radius_max = 5.5;
  c.benign_contrast_min += 0.15;
  c.benign_contrast_max += 0.15;
  c.malignant_contrast_min += 0.15;
  c.malignant_contrast_max += 0.15;
  return c;
}

int label_breast(std::span<const LesionClass> labels) {
  if (labels.empty()) return 0;
  return std::any_of(labels.begin(), labels.end(), [](LesionClass c) { return c == LesionClass::Malignant; }) ? 2 : 1;
}

Mask rasterize_lesion(const LesionSpec& l, const Extents& e) {
  const Boundary b = make_boundary(l.shape_seed);
  Mask m(e.voxels(), 0);
  const int lo[3] = {static_cast<int>(std::floor(l.center[0] - reach(l, 0))),
                     static_cast<int>(std::floor(l.center[1] - reach(l, 1))),
                     static_cast<int>(std::floor(l.center[2] - reach(l, 2)))};
  const int hi[3] = {static_cast<int>(std::ceil(l.center[0] + reach(l, 0))),
                     static_cast<int>(std::ceil(l.center[1] + reach(l, 1))),
                     static_cast<int>(std::ceil(l.center[2] + reach(l, 2)))};
  for (int k = std::max(0, lo[2]); k <= std::min(e.z - 1, hi[2]); ++k)
    for (int j = std::max(0, lo[1]); j <= std::min(e.y - 1, hi[1]); ++j)
      for (int i = std::max(0, lo[0]); i <= std::min(e.x - 1, hi[0]); ++i) {
        const double q[3] = {(i - l.center[0]) / l.radii[0], (j - l.center[1]) / l.radii[1],
                             (k - l.center[2]) / l.radii[2]};
        const double rho = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2]);
        double bound = 1;
        if (rho > 1e-12 && l.roughness > 0) {
          double g = 0;
          for (std::size_t t = 0; t < 4; ++t) {
            const double u = (q[0] * b.dir[t][0] + q[1] * b.dir[t][1] + q[2] * b.dir[t][2]) / rho;
            g += b.amp[t] * std::sin(b.freq[t] * std::numbers::pi * u + b.phase[t]);
          }
          bound += l.roughness * g;
        }
        if (rho <= bound) m[e.index(i, j, k)] = 1;
      }
  // The voxel nearest the center is always part of the lesion.
  const int ci = std::clamp(static_cast<int>(std::lround(l.center[0])), 0, e.x - 1);
  const int cj = std::clamp(static_cast<int>(std::lround(l.center[1])), 0, e.y - 1);
  const int ck = std::clamp(static_cast<int>(std::lround(l.center[2])), 0, e.z - 1);
  m[e.index(ci, cj, ck)] = 1;
  return m;
}

BreastSample generate_phantom(std::uint64_t seed, const PhantomConfig& c) {
  Rng rng(derive_seed(seed, 0));
  const double u = rng.uniform();
  const auto& p = c.lesion_count_probs;
  const int count = u < p[0] ? 0 : (u < p[0] + p[1] ? 1 : 2);
  LesionOverride o;
  for (int i = 0; i < count; ++i)
    o.classes.push_back(rng.bernoulli(c.malignant_prob) ? LesionClass::Malignant : LesionClass::Benign);
  return generate_phantom(seed, c, o);
}

BreastSample generate_phantom(std::uint64_t seed, const PhantomConfig& c, const LesionOverride& o) {
  const Extents& e = c.extents;
  if (e.x < 8 || e.y < 8 || e.z < 4) throw std::invalid_argument("phantom extents too small");
  Rng rng(derive_seed(seed, 1));
  BreastSample s;
  s.extents = e;
  auto values = background(rng, c);

  for (LesionClass cls : o.classes) {
    LesionSpec l = sample_lesion(rng, c, cls);
    place(rng, l, e);
    for (int attempt = 0; attempt < 50; ++attempt) {
      if (std::all_of(s.lesions.begin(), s.lesions.end(), [&](const LesionSpec& other) { return separated(l, other); }))
        break;
      place(rng, l, e);
    }
    s.lesions.push_back(l);
    s.masks.push_back(rasterize_lesion(l, e));
  }

  std::vector<double> lift(e.voxels(), 0.0);
  for (std::size_t j = 0; j < s.lesions.size(); ++j)
    for (std::size_t v = 0; v < lift.size(); ++v)
      if (s.masks[j][v]) lift[v] = std::max(lift[v], s.lesions[j].contrast);
  for (std::size_t a = 0; a < s.masks.size(); ++a)
    for (std::size_t b = a + 1; b < s.masks.size(); ++b)
      for (std::size_t v = 0; v < lift.size(); ++v)
        if (s.masks[a][v] && s.masks[b][v]) s.masks_overlap = true;

  s.volume.resize(e.voxels());
  for (std::size_t v = 0; v < values.size(); ++v) {
    const double x = values[v] + lift[v] + c.white_noise * rng.normal();
    s.volume[v] = static_cast<float>(std::clamp(x, 0.0, 1.0));
  }
  const auto classes = s.lesion_classes();
  s.y = label_breast(classes);
  return s;
}

std::array<double, 3> default_split_ratios() { return {45.0 / 117, 13.0 / 117, 59.0 / 117}; }

DatasetSplit make_split(std::vector<std::string> patients, std::array<double, 3> ratios, std::uint64_t seed) {
  if (patients.size() < 3) throw std::invalid_argument("make_split: need at least one patient per split");
  double total = 0;
  for (double r : ratios) {
    if (r < 0) throw std::invalid_argument("make_split: negative ratio");
    total += r;
  }
  if (std::abs(total - 1) > 1e-9) throw std::invalid_argument("make_split: ratios must sum to 1");

  const double n = static_cast<double>(patients.size());
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double exact = ratios[i] * n;
    sizes[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[i] = exact - static_cast<double>(sizes[i]);
    assigned += sizes[i];
  }
  while (assigned < patients.size()) {
    const auto i = static_cast<std::size_t>(std::max_element(frac.begin(), frac.end()) - frac.begin());
    ++sizes[i];
    frac[i] = -1;
    ++assigned;
  }

  Rng rng(seed);
  rng.shuffle(std::span<std::string>(patients));
  DatasetSplit s;
  auto it = patients.begin();
  s.train.assign(it, it + static_cast<std::ptrdiff_t>(sizes[0]));
  it += static_cast<std::ptrdiff_t>(sizes[0]);
  s.val.assign(it, it + static_cast<std::ptrdiff_t>(sizes[1]));
  it += static_cast<std::ptrdiff_t>(sizes[1]);
  s.test.assign(it, patients.end());
  return s;
}

std::vector<const BreastSample*> Dataset::subset(const std::vector<std::string>& patients) const {
  std::map<std::string, int> order;
  for (std::size_t i = 0; i < patients.size(); ++i) order[patients[i]] = static_cast<int>(i);
  std::vector<const BreastSample*> out;
  for (const auto& s : samples)
    if (order.count(s.patient_id)) out.push_back(&s);
  std::stable_sort(out.begin(), out.end(), [&](const BreastSample* a, const BreastSample* b) {
    return order[a->patient_id] < order[b->patient_id];
  });
  return out;
}

Dataset generate_dataset(std::uint64_t seed, const PhantomConfig& config, int patients, std::array<double, 3> ratios) {
  Dataset d;
  std::vector<std::string> ids;
  for (int p = 0; p < patients; ++p) {
    char id[16];
    std::snprintf(id, sizeof id, "P%03d", p);
    ids.emplace_back(id);
    for (int side = 0; side < 2; ++side) {
      BreastSample s = generate_phantom(derive_seed(seed, static_cast<std::uint64_t>(2 * p + side)), config);
      s.patient_id = id;
      s.side = static_cast<Side>(side);
      d.samples.push_back(std::move(s));
    }
  }
  d.split = make_split(ids, ratios, derive_seed(seed, kSplitStream));
  return d;
}

std::vector<std::uint32_t> rle_encode(const Mask& mask) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t length = 0;
  for (std::uint8_t v : mask) {
    const std::uint8_t b = v ? 1 : 0;
    if (b != current) {
      runs.push_back(length);
      current = b;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

Mask rle_decode(std::span<const std::uint32_t> runs, std::size_t voxels) {
  Mask m;
  m.reserve(voxels);
  std::uint8_t value = 0;
  for (auto r : runs) {
    if (m.size() + r > voxels) throw io::FormatError("mask runs exceed the volume");
    m.insert(m.end(), r, value);
    value ^= 1;
  }
  if (m.size() != voxels) throw io::FormatError("mask runs do not cover the volume");
  return m;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir);
  std::map<std::string, std::string> split_of;
  for (const auto& p : d.split.train) split_of[p] = "train";
  for (const auto& p : d.split.val) split_of[p] = "val";
  for (const auto& p : d.split.test) split_of[p] = "test";

  io::ByteWriter vol, masks;
  vol.bytes("BSVOLS01");
  masks.bytes("BSMASK01");
  std::ostringstream manifest, lesions, split;
  manifest << "breast_id,patient_id,side,label,split,lesion_count,masks_overlap,volume_offset,mask_offset\n";
  lesions << "breast_id,index,class,cx,cy,cz,rx,ry,rz,contrast,roughness,shape_seed\n";
  for (const auto& s : d.samples) {
    const auto voff = vol.buffer().size(), moff = masks.buffer().size();
    vol.u32(static_cast<std::uint32_t>(s.extents.x));
    vol.u32(static_cast<std::uint32_t>(s.extents.y));
    vol.u32(static_cast<std::uint32_t>(s.extents.z));
    for (float v : s.volume) vol.f32(v);
    masks.u32(static_cast<std::uint32_t>(s.masks.size()));
    for (const auto& m : s.masks) {
      const auto runs = rle_encode(m);
      masks.u32(static_cast<std::uint32_t>(runs.size()));
      for (auto r : runs) masks.u32(r);
    }
    manifest << s.id() << ',' << s.patient_id << ',' << (s.side == Side::Left ? "left" : "right") << ',' << s.y << ','
             << split_of[s.patient_id] << ',' << s.lesions.size() << ',' << (s.masks_overlap ? 1 : 0) << ',' << voff
             << ',' << moff << '\n';
    for (std::size_t j = 0; j < s.lesions.size(); ++j) {
      const auto& l = s.lesions[j];
      lesions << s.id() << ',' << j << ',' << (l.cls == LesionClass::Malignant ? "malignant" : "benign");
      for (double v : l.center) lesions << ',' << fmt_double(v);
      for (double v : l.radii) lesions << ',' << fmt_double(v);
      lesions << ',' << fmt_double(l.contrast) << ',' << fmt_double(l.roughness) << ',' << l.shape_seed << '\n';
    }
  }
  split << "split,patient_id\n";
  for (const auto& p : d.split.train) split << "train," << p << '\n';
  for (const auto& p : d.split.val) split << "val," << p << '\n';
  for (const auto& p : d.split.test) split << "test," << p << '\n';

  io::write_file(dir / "volumes.bin", vol.buffer());
  io::write_file(dir / "masks.bin", masks.buffer());
  io::write_file(dir / "manifest.csv", manifest.str());
  io::write_file(dir / "lesions.csv", lesions.str());
  io::write_file(dir / "split.csv", split.str());
}

Dataset load_dataset(const std::filesystem::path& dir) {
  for (const char* f : {"manifest.csv", "lesions.csv", "split.csv", "volumes.bin", "masks.bin"}) {
    if (!std::filesystem::exists(dir / f)) throw std::runtime_error("dataset file missing: " + (dir / f).string());
  }
  const std::string vol = io::read_file(dir / "volumes.bin"), masks = io::read_file(dir / "masks.bin");
  if (vol.substr(0, 8) != "BSVOLS01" || masks.substr(0, 8) != "BSMASK01") throw io::FormatError("bad dataset magic");

  std::map<std::string, std::vector<LesionSpec>> lesion_specs;
  {
    std::istringstream in(io::read_file(dir / "lesions.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto f = split_csv(line);
      if (f.size() != 12) throw io::FormatError("malformed lesions.csv row: " + line);
      LesionSpec l;
      l.cls = f[2] == "malignant" ? LesionClass::Malignant : LesionClass::Benign;
      for (int a = 0; a < 3; ++a) {
        l.center[static_cast<std::size_t>(a)] = std::strtod(f[static_cast<std::size_t>(3 + a)].c_str(), nullptr);
        l.radii[static_cast<std::size_t>(a)] = std::strtod(f[static_cast<std::size_t>(6 + a)].c_str(), nullptr);
      }
      l.contrast = std::strtod(f[9].c_str(), nullptr);
      l.roughness = std::strtod(f[10].c_str(), nullptr);
      l.shape_seed = std::stoull(f[11]);
      lesion_specs[f[0]].push_back(l);
    }
  }

  Dataset d;
  std::istringstream in(io::read_file(dir / "manifest.csv"));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 9) throw io::FormatError("malformed manifest row: " + line);
    BreastSample s;
    s.patient_id = f[1];
    s.side = f[2] == "left" ? Side::Left : Side::Right;
    s.y = std::stoi(f[3]);
    s.masks_overlap = f[6] == "1";
    io::ByteReader vr(std::string_view(vol).substr(std::stoull(f[7])));
    s.extents.x = static_cast<int>(vr.u32());
    s.extents.y = static_cast<int>(vr.u32());
    s.extents.z = static_cast<int>(vr.u32());
    s.volume.resize(s.extents.voxels());
    for (auto& v : s.volume) v = vr.f32();
    io::ByteReader mr(std::string_view(masks).substr(std::stoull(f[8])));
    const auto count = mr.u32();
    for (std::uint32_t j = 0; j < count; ++j) {
      std::vector<std::uint32_t> runs(mr.u32());
      for (auto& r : runs) r = mr.u32();
      s.masks.push_back(rle_decode(runs, s.extents.voxels()));
    }
    s.lesions = lesion_specs[s.id()];
    if (s.lesions.size() != s.masks.size() || static_cast<std::size_t>(std::stoul(f[5])) != s.masks.size()) {
      throw io::FormatError("lesion records disagree with masks for " + s.id());
    }
    d.samples.push_back(std::move(s));
  }

  std::istringstream sp(io::read_file(dir / "split.csv"));
  std::getline(sp, line);
  while (std::getline(sp, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 2) throw io::FormatError("malformed split row: " + line);
    (f[0] == "train" ? d.split.train : f[0] == "val" ? d.split.val : d.split.test).push_back(f[1]);
  }
  return d;
}

}  // namespace bscreen::phantom
