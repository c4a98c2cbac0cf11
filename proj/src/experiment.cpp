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

#include "bscreen/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bscreen/binary_io.hpp"
#include "bscreen/checkpoint.hpp"
#include "bscreen/log.hpp"
#include "bscreen/metrics.hpp"
#include "bscreen/presets.hpp"
#include "bscreen/rng.hpp"

namespace bscreen::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

MissingArtifact::MissingArtifact(const fs::path& path, std::string producer)
    : std::runtime_error("missing " + path.string() + "; run `bscreen " + producer + "` first"),
      producer_(std::move(producer)) {}

// ---------------------------------------------------------------------------
// Config

namespace {

constexpr std::string_view kDefaultText = R"ini(# bscreen experiment configuration.
#
# A key may appear as `key.paper` (published value) and `key.desk` (the
# override used on a workstation); [run] profile selects the column. A plain
# key applies to both. Values marked "unpublished" are this implementation's.

[run]
profile = desk
pipeline = both              # pre-hoc | post-hoc | both
threads = 0                  # 0 keeps the OpenMP default

[data]
tier = default               # default | easy
patients = 117
extents.paper = 96x96x48     # x, y, z; lesion radii scale with x
extents.desk = 32x32x16

[encoder]
positives.paper = 8000
positives.desk = 800
negatives.paper = 8000
negatives.desk = 800
positive_dice = 0.6
epochs.paper = 12            # unpublished
epochs.desk = 4
batch = 32                   # unpublished
lr = 0.001                   # Adam, unpublished

[detector]
gamma = 0.9
trigger_reward = 10
trigger_threshold = 0.2
replay_capacity = 10000
batch = 100
lr.paper = 1e-6
lr.desk = 1e-4
epsilon_start = 1.0
epsilon_end = 0.1
epsilon_horizon.paper = 300
epsilon_horizon.desk = 30
kappa = 0.5
epochs.paper = 300
epochs.desk = 40
max_steps = 20
update_every.paper = 1
update_every.desk = 4
initializations = 13         # fixed by the start layout
init_fraction = 0.75
merge_dice = 0.5
min_extent = 4
val_every = 5
val_max_fpp = 3

[classifier]
patch.paper = 24x24x12       # fixed by the network preset
patch.desk = 16x16x8
epochs = 30
batch = 16
lr = 0.01
dice_min = 0.2

[meta]
iterations.paper = 3000
iterations.desk = 300
tasks_per_batch = 5
n_train = 4
n_val = 4
adapt_steps = 5
alpha = 0.01
beta.paper = 0.001
beta.desk = 0.01
first_order.paper = false
first_order.desk = true      # chosen by desk pilots, see README
sum_gradients = false
buffer_size = 40

[fine_tune]
epochs = 30
batch = 8
lr = 0.01
recalibrate = true
scratch_baseline = true

[saliency]
lambda_tv = 0.1
lambda_area = 3
lambda_preserve = 1
lambda_destroy = 2.5
destroy_form.paper = log_probability
destroy_form.desk = probability
epochs.paper = 20            # unpublished
epochs.desk = 40
batch = 8
lr.paper = 0.001             # Adam, unpublished
lr.desk = 0.03
zeta = 0.8
min_voxels = 8
export_masks = false

[eval]
dice_min = 0.2
max_fpp = 3
)ini";

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool is_profile_suffix(std::string_view s) { return s == "paper" || s == "desk"; }

// "lr.desk" -> ("lr", "desk"); "lr" -> ("lr", "").
std::pair<std::string, std::string> split_key(const std::string& key) {
  const auto dot = key.rfind('.');
  if (dot != std::string::npos && is_profile_suffix(std::string_view(key).substr(dot + 1)))
    return {key.substr(0, dot), key.substr(dot + 1)};
  return {key, ""};
}

}  // namespace

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c;
  std::istringstream in{std::string(text)};
  std::string line, current;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto cut = line.find_first_of("#;");
    const std::string body = trim(std::string_view(line).substr(0, cut));
    if (body.empty()) continue;
    const std::string where = origin + ":" + std::to_string(number);
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where + ": unterminated section header");
      current = trim(std::string_view(body).substr(1, body.size() - 2));
      if (current.empty()) throw ConfigError(where + ": empty section name");
      c.section(current, true);
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected `key = value`");
    if (current.empty()) throw ConfigError(where + ": key outside a section");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    c.set(current, key, trim(std::string_view(body).substr(eq + 1)));
  }
  return c;
}

std::string_view Config::default_text() { return kDefaultText; }

Config Config::defaults() { return parse(kDefaultText, "defaults"); }

Config::Section* Config::section(const std::string& name, bool create) {
  for (auto& s : sections_)
    if (s.name == name) return &s;
  if (!create) return nullptr;
  sections_.push_back({name, {}});
  return &sections_.back();
}

const Config::Section* Config::section(const std::string& name) const {
  for (const auto& s : sections_)
    if (s.name == name) return &s;
  return nullptr;
}

void Config::set(const std::string& section_name, const std::string& key, const std::string& value) {
  auto* s = section(section_name, true);
  // A plain key replaces both profile columns, in place of the first one.
  if (split_key(key).second.empty()) {
    std::vector<Entry> kept;
    bool placed = false;
    for (auto& e : s->entries) {
      if (split_key(e.key).first != key) {
        kept.push_back(std::move(e));
      } else if (!placed) {
        kept.push_back({key, value});
        placed = true;
      }
    }
    s->entries = std::move(kept);
    if (placed) return;
  }
  for (auto& e : s->entries)
    if (e.key == key) {
      e.value = value;
      return;
    }
  s->entries.push_back({key, value});
}

void Config::merge(const Config& other) {
  for (const auto& s : other.sections_)
    for (const auto& e : s.entries) set(s.name, e.key, e.value);
}

std::string Config::profile() const {
  const auto* s = section("run");
  std::string p = "desk";
  if (s)
    for (const auto& e : s->entries)
      if (e.key == "profile") p = e.value;
  if (!is_profile_suffix(p)) throw ConfigError("[run] profile must be paper or desk, got `" + p + "`");
  return p;
}

std::optional<std::string> Config::find(const std::string& section_name, const std::string& key) const {
  const auto* s = section(section_name);
  if (!s) return std::nullopt;
  const std::string variant = key + "." + profile();
  std::optional<std::string> plain;
  for (const auto& e : s->entries) {
    if (e.key == variant) return e.value;
    if (e.key == key) plain = e.value;
  }
  return plain;
}

std::string Config::get(const std::string& section_name, const std::string& key) const {
  auto v = find(section_name, key);
  if (!v) throw ConfigError("missing [" + section_name + "] " + key);
  return *v;
}

double Config::get_double(const std::string& section_name, const std::string& key) const {
  const std::string v = get(section_name, key);
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (v.empty() || *end != '\0' || !std::isfinite(d))
    throw ConfigError("[" + section_name + "] " + key + ": not a number: `" + v + "`");
  return d;
}

int Config::get_int(const std::string& section_name, const std::string& key) const {
  const double d = get_double(section_name, key);
  if (d != std::floor(d) || std::abs(d) > 2e9)
    throw ConfigError("[" + section_name + "] " + key + ": not an integer");
  return static_cast<int>(d);
}

bool Config::get_bool(const std::string& section_name, const std::string& key) const {
  const std::string v = get(section_name, key);
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw ConfigError("[" + section_name + "] " + key + ": not a boolean: `" + v + "`");
}

std::vector<std::pair<std::string, std::string>> Config::keys() const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : sections_)
    for (const auto& e : s.entries) {
      std::pair<std::string, std::string> k{s.name, split_key(e.key).first};
      if (std::find(out.begin(), out.end(), k) == out.end()) out.push_back(std::move(k));
    }
  return out;
}

std::string Config::resolved_text() const {
  std::string out;
  for (const auto& s : sections_) {
    out += "[" + s.name + "]\n";
    std::vector<std::string> seen;
    for (const auto& e : s.entries) {
      const std::string base = split_key(e.key).first;
      if (std::find(seen.begin(), seen.end(), base) != seen.end()) continue;
      seen.push_back(base);
      if (auto v = find(s.name, base)) out += base + " = " + *v + "\n";
    }
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Settings

namespace {

phantom::Extents parse_extents(const std::string& text, const std::string& what) {
  phantom::Extents e;
  char x1 = 0, x2 = 0;
  std::istringstream in(text);
  if (!(in >> e.x >> x1 >> e.y >> x2 >> e.z) || x1 != 'x' || x2 != 'x' || e.x < 1 || e.y < 1 || e.z < 1)
    throw ConfigError(what + ": expected XxYxZ, got `" + text + "`");
  return e;
}

void check_range(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what + " is out of range");
}

}  // namespace

Settings make_settings(const Config& c, double width) {
  if (!(width > 0)) throw ConfigError("--scale must be positive");
  const Config known = Config::defaults();
  for (const auto& [section_name, key] : c.keys())
    if (!known.find(section_name, key)) throw ConfigError("unknown key [" + section_name + "] " + key);

  Settings s;
  s.profile = c.profile();
  presets::PresetOptions preset{s.profile == "paper", width};
  s.preset = preset;

  const std::string pipeline = c.get("run", "pipeline");
  if (pipeline == "pre-hoc") s.pipeline = Pipeline::PreHoc;
  else if (pipeline == "post-hoc") s.pipeline = Pipeline::PostHoc;
  else if (pipeline == "both") s.pipeline = Pipeline::Both;
  else throw ConfigError("[run] pipeline must be pre-hoc, post-hoc or both");
  s.threads = c.get_int("run", "threads");
  check_range(s.threads >= 0, "[run] threads");

  const std::string tier = c.get("data", "tier");
  if (tier == "easy") s.phantom = phantom::PhantomConfig::easy();
  else if (tier != "default") throw ConfigError("[data] tier must be default or easy");
  s.phantom.extents = parse_extents(c.get("data", "extents"), "[data] extents");
  const double radius_scale = s.phantom.extents.x / 32.0;
  s.phantom.radius_min *= radius_scale;
  s.phantom.radius_max *= radius_scale;
  s.patients = c.get_int("data", "patients");
  check_range(s.patients >= 4, "[data] patients");

  auto& en = s.encoder;
  en.positives = c.get_int("encoder", "positives");
  en.negatives = c.get_int("encoder", "negatives");
  en.positive_dice = c.get_double("encoder", "positive_dice");
  en.epochs = c.get_int("encoder", "epochs");
  en.batch = c.get_int("encoder", "batch");
  en.lr = c.get_double("encoder", "lr");
  en.preset = preset;
  check_range(en.positives > 0 && en.negatives > 0 && en.epochs >= 0 && en.batch > 0, "[encoder] sizes");

  auto& d = s.detector;
  d.trainer.gamma = c.get_double("detector", "gamma");
  d.env.trigger_reward = c.get_double("detector", "trigger_reward");
  d.env.trigger_threshold = c.get_double("detector", "trigger_threshold");
  d.trainer.replay_capacity = static_cast<std::size_t>(c.get_int("detector", "replay_capacity"));
  d.trainer.batch = static_cast<std::size_t>(c.get_int("detector", "batch"));
  d.trainer.adam.lr = c.get_double("detector", "lr");
  d.trainer.schedule.start = c.get_double("detector", "epsilon_start");
  d.trainer.schedule.end = c.get_double("detector", "epsilon_end");
  d.trainer.schedule.horizon = c.get_int("detector", "epsilon_horizon");
  d.trainer.schedule.kappa = c.get_double("detector", "kappa");
  d.epochs = c.get_int("detector", "epochs");
  d.trainer.max_steps = c.get_int("detector", "max_steps");
  d.trainer.update_every = c.get_int("detector", "update_every");
  if (c.get_int("detector", "initializations") != 13) throw ConfigError("[detector] initializations is fixed at 13");
  d.init_fraction = c.get_double("detector", "init_fraction");
  d.env.min_extent = c.get_int("detector", "min_extent");
  d.val_every = c.get_int("detector", "val_every");
  d.val_max_fpp = c.get_double("detector", "val_max_fpp");
  d.detect.max_steps = d.trainer.max_steps;
  d.detect.merge_dice = c.get_double("detector", "merge_dice");
  d.detect.init_fraction = d.init_fraction;
  d.detect.min_extent = d.env.min_extent;
  d.preset = preset;
  check_range(d.trainer.gamma >= 0 && d.trainer.gamma < 1, "[detector] gamma");
  check_range(d.trainer.batch > 0 && d.trainer.replay_capacity >= d.trainer.batch, "[detector] batch");
  check_range(d.trainer.update_every >= 1 && d.trainer.max_steps >= 1 && d.epochs >= 0, "[detector] schedule");
  check_range(d.val_every >= 1, "[detector] val_every");

  auto& cl = s.classifier;
  cl.epochs = c.get_int("classifier", "epochs");
  cl.batch = c.get_int("classifier", "batch");
  cl.lr = c.get_double("classifier", "lr");
  cl.dice_min = c.get_double("classifier", "dice_min");
  cl.preset = preset;
  {
    const auto patch = parse_extents(c.get("classifier", "patch"), "[classifier] patch");
    const Shape in = presets::lesion_classifier(preset).input;
    if (in != Shape{1, patch.z, patch.y, patch.x})
      throw ConfigError("[classifier] patch " + c.get("classifier", "patch") + " does not match the preset input " +
                        bscreen::to_string(in));
  }

  auto& m = s.meta;
  m.iterations = c.get_int("meta", "iterations");
  m.tasks_per_batch = c.get_int("meta", "tasks_per_batch");
  m.n_train = c.get_int("meta", "n_train");
  m.n_val = c.get_int("meta", "n_val");
  m.adapt_steps = c.get_int("meta", "adapt_steps");
  m.alpha = c.get_double("meta", "alpha");
  m.beta = c.get_double("meta", "beta");
  m.first_order = c.get_bool("meta", "first_order");
  m.sum_gradients = c.get_bool("meta", "sum_gradients");
  m.buffer_size = static_cast<std::size_t>(c.get_int("meta", "buffer_size"));
  m.preset = preset;
  check_range(m.iterations >= 0 && m.tasks_per_batch >= 1 && m.adapt_steps >= 0, "[meta] schedule");
  check_range(m.n_train >= 2 && m.n_val >= 2 && m.n_train % 2 == 0 && m.n_val % 2 == 0, "[meta] n_train / n_val");
  check_range(m.buffer_size >= 1, "[meta] buffer_size");

  auto& f = s.fine_tune;
  f.epochs = c.get_int("fine_tune", "epochs");
  f.batch = c.get_int("fine_tune", "batch");
  f.lr = c.get_double("fine_tune", "lr");
  f.recalibrate = c.get_bool("fine_tune", "recalibrate");
  s.scratch_baseline = c.get_bool("fine_tune", "scratch_baseline");
  check_range(f.epochs >= 0 && f.batch >= 2, "[fine_tune] schedule");

  auto& sa = s.saliency;
  sa.weights.tv = c.get_double("saliency", "lambda_tv");
  sa.weights.area = c.get_double("saliency", "lambda_area");
  sa.weights.preserve = c.get_double("saliency", "lambda_preserve");
  sa.weights.destroy = c.get_double("saliency", "lambda_destroy");
  const std::string form = c.get("saliency", "destroy_form");
  if (form == "log_probability") sa.weights.destroy_form = saliency::DestroyForm::LogProbability;
  else if (form == "probability") sa.weights.destroy_form = saliency::DestroyForm::Probability;
  else throw ConfigError("[saliency] destroy_form must be log_probability or probability");
  sa.epochs = c.get_int("saliency", "epochs");
  sa.batch = c.get_int("saliency", "batch");
  sa.lr = c.get_double("saliency", "lr");
  sa.preset = preset;
  s.localize.zeta = c.get_double("saliency", "zeta");
  s.localize.min_voxels = static_cast<std::size_t>(c.get_int("saliency", "min_voxels"));
  s.export_masks = c.get_bool("saliency", "export_masks");
  check_range(s.localize.zeta > 0 && s.localize.zeta < 1, "[saliency] zeta");
  check_range(sa.epochs >= 0 && sa.batch >= 1, "[saliency] schedule");

  s.dice_min = c.get_double("eval", "dice_min");
  s.max_fpp = c.get_double("eval", "max_fpp");
  check_range(s.dice_min > 0 && s.dice_min <= 1, "[eval] dice_min");
  return s;
}

std::uint64_t stage_seed(std::uint64_t root, Stage stage) {
  return derive_seed(root, static_cast<std::uint64_t>(stage));
}

Run make_run(const fs::path& dir, const Config& config, std::uint64_t seed, double width) {
  Run r;
  r.dir = dir;
  r.config = Config::defaults();
  r.config.merge(config);
  r.settings = make_settings(r.config, width);
  r.seed = seed;
  return r;
}

// ---------------------------------------------------------------------------
// Stage plumbing

namespace {

fs::path need(const Run& run, const fs::path& rel, const std::string& producer) {
  const fs::path p = run.dir / rel;
  if (!fs::exists(p)) throw MissingArtifact(p, producer);
  return p;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  io::write_file(path, text);
}

fs::path stage_dir(const Run& run, const std::string& name) {
  const fs::path d = run.dir / name;
  fs::create_directories(d);
  return d;
}

// manifest.json: seed, resolved config digest, a checksum per output file and
// stage metrics. No timestamps, so reruns reproduce it byte for byte.
void finish_stage(const Run& run, const fs::path& dir, const std::string& name, Stage stage, const json& metrics) {
  const std::string config_text = run.config.resolved_text();
  write_text(dir / "config.ini", config_text);
  json m;
  m["stage"] = name;
  m["root_seed"] = run.seed;
  m["stage_seed"] = stage_seed(run.seed, stage);
  m["profile"] = run.settings.profile;
  m["config_fnv1a"] = hex64(io::fnv1a(config_text));
  json files = json::object();
  std::vector<fs::path> paths;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") paths.push_back(e.path());
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) files[fs::relative(p, dir).generic_string()] = hex64(io::fnv1a(io::read_file(p)));
  m["files"] = files;
  m["metrics"] = metrics;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
  log::info(name + ": wrote " + dir.string());
}

void clear_dir(const fs::path& dir) {
  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
}

phantom::Dataset load_data(const Run& run) {
  need(run, "data/manifest.csv", "gen-data");
  return phantom::load_dataset(run.dir / "data");
}

Checkpoint load_ckpt(const Run& run, const fs::path& rel, const std::string& producer) {
  return load_checkpoint(need(run, rel, producer));
}

bool wants_prehoc(const Settings& s) { return s.pipeline != Pipeline::PostHoc; }
bool wants_posthoc(const Settings& s) { return s.pipeline != Pipeline::PreHoc; }

std::vector<dqn::BreastDetections> detect_all(std::span<const phantom::BreastSample* const> samples,
                                              env::Embedder& embedder, const Checkpoint& detector,
                                              const dqn::DetectConfig& config, bool merge) {
  std::vector<dqn::BreastDetections> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = *samples[i];
    out.push_back({s.id(), merge ? dqn::detect(s, i, embedder, detector.spec, detector.params, config)
                                 : dqn::detect_raw(s, i, embedder, detector.spec, detector.params, config)});
  }
  return out;
}

std::vector<prehoc::BreastDetections> attach(std::span<const phantom::BreastSample* const> samples,
                                             const std::vector<dqn::BreastDetections>& sets) {
  std::vector<prehoc::BreastDetections> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back({samples[i], sets[i].detections});
  return out;
}

double read_eer(const Run& run) {
  const auto j = json::parse(io::read_file(need(run, "saliency/eer.json", "train-saliency")));
  return j.at("threshold").get<double>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Subcommands

void gen_data(const Run& run) {
  const fs::path dir = run.dir / "data";
  clear_dir(dir);
  const auto ds = phantom::generate_dataset(stage_seed(run.seed, Stage::Data), run.settings.phantom,
                                            run.settings.patients);
  phantom::save_dataset(dir, ds);
  json m;
  auto count = [](const std::vector<const phantom::BreastSample*>& v) {
    std::array<int, 3> c{};
    for (const auto* s : v) ++c[static_cast<std::size_t>(s->y)];
    return json{{"y0", c[0]}, {"y1", c[1]}, {"y2", c[2]}};
  };
  m["patients"] = run.settings.patients;
  m["extents"] = {ds.samples.front().extents.x, ds.samples.front().extents.y, ds.samples.front().extents.z};
  m["train"] = count(ds.train());
  m["val"] = count(ds.val());
  m["test"] = count(ds.test());
  finish_stage(run, dir, "gen-data", Stage::Data, m);
}

void train_encoder(const Run& run) {
  const auto ds = load_data(run);
  const fs::path dir = stage_dir(run, "encoder");
  const auto r = env::train_patch_encoder(ds.train(), run.settings.encoder, stage_seed(run.seed, Stage::Encoder));
  save_checkpoint(dir / "encoder.ckpt", r.spec, r.params);
  finish_stage(run, dir, "train-encoder", Stage::Encoder, {{"val_accuracy", r.val_accuracy}});
}

void train_detector(const Run& run) {
  const auto ds = load_data(run);
  const auto enc = load_ckpt(run, "encoder/encoder.ckpt", "train-encoder");
  const fs::path dir = stage_dir(run, "detector");
  fs::remove(dir / "diverged.ckpt");
  env::Embedder embedder(enc.spec, enc.params, run.settings.detector.env.min_extent);
  auto config = run.settings.detector;
  config.divergence_checkpoint = dir / "diverged.ckpt";
  const auto r = dqn::train_detector(ds.train(), ds.val(), embedder, config, stage_seed(run.seed, Stage::Detector));
  save_checkpoint(dir / "detector.ckpt", r.spec, r.params);

  std::string csv = "epoch,epsilon,mean_reward,trigger_rate,mean_loss,val_score\n";
  for (const auto& e : r.history)
    csv += std::to_string(e.epoch) + "," + num(e.epsilon) + "," + num(e.mean_reward) + "," + num(e.trigger_rate) +
           "," + num(e.mean_loss) + "," + (e.val_score ? num(*e.val_score) : "") + "\n";
  write_text(dir / "history.csv", csv);
  if (r.diverged) log::warn("train-detector: training diverged; kept the last finite parameters");
  finish_stage(run, dir, "train-detector", Stage::Detector,
               {{"val_score", r.val_score}, {"best_epoch", r.best_epoch}, {"diverged", r.diverged}});
}

void train_classifier(const Run& run) {
  const auto ds = load_data(run);
  const auto enc = load_ckpt(run, "encoder/encoder.ckpt", "train-encoder");
  const auto det = load_ckpt(run, "detector/detector.ckpt", "train-detector");
  const fs::path dir = stage_dir(run, "classifier");
  const auto& s = run.settings;

  const auto train = ds.train(), val = ds.val();
  env::Embedder train_embedder(enc.spec, enc.params, s.detector.env.min_extent);
  env::Embedder val_embedder(enc.spec, enc.params, s.detector.env.min_extent);
  // Every raw detection is a training example; validation mimics inference.
  const auto train_sets = detect_all(train, train_embedder, det, s.detector.detect, false);
  const auto val_sets = detect_all(val, val_embedder, det, s.detector.detect, true);
  dqn::write_detections_csv(dir / "detections_train.csv", train_sets);
  dqn::write_detections_csv(dir / "detections_val.csv", val_sets);

  const auto r = prehoc::train_classifier(attach(train, train_sets), attach(val, val_sets), s.classifier,
                                          stage_seed(run.seed, Stage::Classifier));
  save_checkpoint(dir / "classifier.ckpt", r.spec, r.params);
  std::string csv = "epoch,train_loss,val_auc\n";
  for (const auto& e : r.history)
    csv += std::to_string(e.epoch) + "," + num(e.train_loss) + "," + (e.val_auc ? num(*e.val_auc) : "") + "\n";
  write_text(dir / "history.csv", csv);
  finish_stage(run, dir, "train-classifier", Stage::Classifier,
               {{"val_auc", finite_or_null(r.val_auc)},
                {"best_epoch", r.best_epoch},
                {"positives", r.positives},
                {"negatives", r.negatives}});
}

void meta_train(const Run& run) {
  const auto ds = load_data(run);
  const fs::path dir = stage_dir(run, "meta");
  const auto& s = run.settings;
  const std::uint64_t seed = stage_seed(run.seed, Stage::Meta);
  const auto spec = presets::diagnosis_net(s.meta.preset);
  const auto init = nn::init_parameters(spec, derive_seed(seed, 0));
  save_checkpoint(dir / "init.ckpt", spec, init);
  const auto r = meta::meta_train(ds.train(), init, s.meta, seed);
  save_checkpoint(dir / "meta.ckpt", r.spec, r.params);
  meta::write_meta_log_csv(dir / "log.csv", r.log);

  // Mean AUC change per episode over the last quarter of iterations.
  double gain = 0;
  int counted = 0;
  const int from = s.meta.iterations - std::max(1, s.meta.iterations / 4);
  for (const auto& e : r.log)
    if (e.iteration >= from && !e.aborted) {
      gain += e.auc_after - e.auc_before;
      ++counted;
    }
  finish_stage(run, dir, "meta-train", Stage::Meta,
               {{"iterations", s.meta.iterations},
                {"skipped_updates", r.skipped_updates},
                {"late_mean_auc_gain", counted ? json(gain / counted) : json(nullptr)}});
}

void fine_tune(const Run& run) {
  const auto ds = load_data(run);
  const auto start = load_ckpt(run, "meta/meta.ckpt", "meta-train");
  const fs::path dir = stage_dir(run, "fine_tune");
  const auto& s = run.settings;
  const std::uint64_t seed = stage_seed(run.seed, Stage::FineTune);
  const auto train = ds.train(), val = ds.val();

  const auto meta_run = meta::fine_tune(start.spec, start.params, train, val, s.fine_tune, seed);
  save_checkpoint(dir / "screen.ckpt", start.spec, meta_run.params);
  json m{{"val_auc", finite_or_null(meta_run.val_auc)}, {"best_epoch", meta_run.best_epoch}};

  std::optional<meta::FineTuneResult> scratch;
  fs::remove(dir / "scratch.ckpt");
  if (s.scratch_baseline) {
    // Same initial weights as meta-training started from, same batches.
    const auto init = load_ckpt(run, "meta/init.ckpt", "meta-train");
    scratch = meta::fine_tune(init.spec, init.params, train, val, s.fine_tune, seed);
    save_checkpoint(dir / "scratch.ckpt", init.spec, scratch->params);
    m["scratch_val_auc"] = finite_or_null(scratch->val_auc);
    m["scratch_best_epoch"] = scratch->best_epoch;
  }
  std::string csv = scratch ? "epoch,val_auc,scratch_val_auc\n" : "epoch,val_auc\n";
  for (std::size_t e = 0; e < meta_run.val_history.size(); ++e) {
    csv += std::to_string(e) + "," + num(meta_run.val_history[e]);
    if (scratch && e < scratch->val_history.size()) csv += "," + num(scratch->val_history[e]);
    csv += "\n";
  }
  write_text(dir / "history.csv", csv);
  finish_stage(run, dir, "fine-tune", Stage::FineTune, m);
}

void train_saliency(const Run& run) {
  const auto ds = load_data(run);
  const auto screen = load_ckpt(run, "fine_tune/screen.ckpt", "fine-tune");
  const fs::path dir = stage_dir(run, "saliency");
  const auto& s = run.settings;

  // Decision threshold for the localization gate, from validation diagnoses.
  const auto val = ds.val();
  const auto probs = meta::diagnose_all(screen.spec, screen.params, val);
  std::vector<int> labels;
  for (const auto* v : val) labels.push_back(v->y == 2);
  const auto eer = saliency::eer_threshold(probs, labels);
  write_text(dir / "eer.json",
             json{{"threshold", eer.threshold}, {"fpr", eer.fpr}, {"fnr", eer.fnr}}.dump(2) + "\n");

  const auto r = saliency::train_saliency(ds.train(), screen.spec, screen.params, s.saliency,
                                          stage_seed(run.seed, Stage::Saliency));
  save_checkpoint(dir / "decoder.ckpt", r.model.decoder, r.model.decoder_params);
  std::string csv = "epoch,loss,tv,area,preserve,destroy\n";
  for (const auto& e : r.history)
    csv += std::to_string(e.epoch) + "," + num(e.loss) + "," + num(e.tv) + "," + num(e.area) + "," +
           num(e.preserve) + "," + num(e.destroy) + "\n";
  write_text(dir / "history.csv", csv);
  finish_stage(run, dir, "train-saliency", Stage::Saliency,
               {{"eer_threshold", eer.threshold}, {"eer", eer.rate()},
                {"final_loss", r.history.empty() ? json(nullptr) : json(r.history.back().loss)}});
}

void infer(const Run& run) {
  const auto ds = load_data(run);
  const auto& s = run.settings;
  const auto test = ds.test();
  const fs::path dir = run.dir / "infer";
  clear_dir(dir);
  json m;

  if (wants_prehoc(s)) {
    const auto enc = load_ckpt(run, "encoder/encoder.ckpt", "train-encoder");
    const auto det = load_ckpt(run, "detector/detector.ckpt", "train-detector");
    const auto cls = load_ckpt(run, "classifier/classifier.ckpt", "train-classifier");
    env::Embedder embedder(enc.spec, enc.params, s.detector.env.min_extent);
    const auto sets = detect_all(test, embedder, det, s.detector.detect, true);
    dqn::write_detections_csv(dir / "prehoc_detections.csv", sets);

    auto malignant = sets;
    std::vector<prehoc::BreastScore> scores;
    std::size_t detections = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
      std::vector<Tensor<float>> patches;
      for (const auto& d : sets[i].detections) patches.push_back(prehoc::extract_patch(*test[i], d.box, cls.spec));
      const auto p = prehoc::classify(cls.spec, cls.params, patches);
      for (std::size_t k = 0; k < p.size(); ++k) malignant[i].detections[k].score = p[k];
      scores.push_back({test[i]->id(), test[i]->patient_id, prehoc::breast_score(p), test[i]->y == 2});
      detections += p.size();
    }
    dqn::write_detections_csv(dir / "prehoc_malignant.csv", malignant);
    prehoc::write_scores_csv(dir / "prehoc_scores.csv", scores);
    m["prehoc_detections"] = detections;
  }

  if (wants_posthoc(s)) {
    const auto screen = load_ckpt(run, "fine_tune/screen.ckpt", "fine-tune");
    const auto decoder = load_ckpt(run, "saliency/decoder.ckpt", "train-saliency");
    const double tau = read_eer(run);
    const saliency::SaliencyModel model{screen.spec, decoder.spec, screen.params, decoder.params};

    std::vector<dqn::BreastDetections> sets;
    std::vector<prehoc::BreastScore> scores;
    std::string areas = "breast_id,y,area,salient_fraction\n";
    int positives = 0;
    for (const auto* t : test) {
      const double p = meta::diagnose(screen.spec, screen.params, *t);
      const auto mk = saliency::mask(model, *t);
      const bool positive = p > tau;
      positives += positive;
      sets.push_back({t->id(), positive ? saliency::mask_detections(mk, t->extents, s.localize)
                                        : std::vector<metrics::Detection>{}});
      scores.push_back({t->id(), t->patient_id, p, t->y == 2});
      double sum = 0;
      std::size_t salient = 0;
      for (float v : mk) {
        sum += v;
        salient += v > s.localize.zeta;
      }
      areas += t->id() + "," + std::to_string(t->y) + "," + num(sum / static_cast<double>(mk.size())) + "," +
               num(static_cast<double>(salient) / static_cast<double>(mk.size())) + "\n";
      if (s.export_masks) saliency::write_mask(dir / "masks" / (t->id() + ".bsmk"), mk, t->extents);
    }
    dqn::write_detections_csv(dir / "posthoc_detections.csv", sets);
    prehoc::write_scores_csv(dir / "posthoc_scores.csv", scores);
    write_text(dir / "posthoc_mask_area.csv", areas);
    m["posthoc_positive_breasts"] = positives;

    if (fs::exists(run.dir / "fine_tune/scratch.ckpt")) {
      const auto scratch = load_checkpoint(run.dir / "fine_tune/scratch.ckpt");
      std::vector<prehoc::BreastScore> base;
      for (const auto* t : test)
        base.push_back({t->id(), t->patient_id, meta::diagnose(scratch.spec, scratch.params, *t), t->y == 2});
      prehoc::write_scores_csv(dir / "posthoc_scratch_scores.csv", base);
    }
  }
  finish_stage(run, dir, "infer", Stage::Infer, m);
}

namespace {

struct EvalData {
  std::vector<const phantom::BreastSample*> test;
  std::vector<std::vector<phantom::Mask>> all_lesions, malignant_lesions;
};

EvalData eval_data(const phantom::Dataset& ds) {
  EvalData d;
  d.test = ds.test();
  for (const auto* t : d.test) {
    d.all_lesions.push_back(t->masks);
    std::vector<phantom::Mask> mal;
    for (std::size_t l = 0; l < t->lesions.size(); ++l)
      if (t->lesions[l].cls == phantom::LesionClass::Malignant) mal.push_back(t->masks[l]);
    d.malignant_lesions.push_back(std::move(mal));
  }
  return d;
}

// Patient-grouped FROC input. `positive` gates breasts for the (+) scope.
std::vector<metrics::PatientEval> patient_evals(const EvalData& d, const std::vector<dqn::BreastDetections>& sets,
                                                bool malignant_only, const std::map<std::string, bool>* positive) {
  std::map<std::string, const std::vector<metrics::Detection>*> by_id;
  for (const auto& s : sets) by_id[s.breast_id] = &s.detections;
  static const std::vector<metrics::Detection> none;
  std::vector<metrics::PatientEval> out;
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    const auto* t = d.test[i];
    if (out.empty() || out.back().patient_id != t->patient_id) out.push_back({t->patient_id, {}});
    const auto it = by_id.find(t->id());
    metrics::BreastEval b;
    b.detections = it == by_id.end() ? none : *it->second;
    b.lesion_masks = malignant_only ? &d.malignant_lesions[i] : &d.all_lesions[i];
    b.extents = t->extents;
    if (positive) {
      const auto p = positive->find(t->id());
      b.diagnosed_positive = p != positive->end() && p->second;
    }
    out.back().breasts.push_back(std::move(b));
  }
  return out;
}

double safe_auc(const std::function<double()>& f) {
  try {
    return f();
  } catch (const std::invalid_argument&) {
    return std::nan("");  // single-class split
  }
}

std::vector<metrics::RocPoint> safe_roc(const std::vector<prehoc::BreastScore>& scores) {
  std::vector<double> s;
  std::vector<int> l;
  for (const auto& b : scores) {
    s.push_back(b.score);
    l.push_back(b.label);
  }
  try {
    return metrics::roc_curve(s, l);
  } catch (const std::invalid_argument&) {
    return {};
  }
}

metrics::Series froc_series(const std::string& label, std::span<const metrics::FrocPoint> curve) {
  metrics::Series s{label, {}};
  for (const auto& p : curve)
    if (std::isfinite(p.threshold)) s.points.push_back({p.fpp, p.tpr});
  if (!curve.empty()) s.points.insert(s.points.begin(), {curve.front().fpp, curve.front().tpr});
  return s;
}

metrics::Series roc_series(const std::string& label, std::span<const metrics::RocPoint> curve) {
  metrics::Series s{label, {}};
  for (const auto& p : curve) s.points.push_back({p.fpr, p.tpr});
  return s;
}

void write_svg(const fs::path& path, const std::string& title, const std::string& x, const std::string& y,
               std::vector<metrics::Series> series) {
  write_text(path, metrics::svg_plot(title, x, y, series));
}

std::vector<metrics::FrocPoint> read_froc_csv(const fs::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<metrics::FrocPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    metrics::FrocPoint p{};
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &p.threshold, &p.tpr, &p.fpp) != 3)
      throw io::FormatError("malformed FROC row in " + path.string() + ": " + line);
    out.push_back(p);
  }
  return out;
}

std::vector<metrics::RocPoint> read_roc_csv(const fs::path& path) {
  std::istringstream in(io::read_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<metrics::RocPoint> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    metrics::RocPoint p{};
    if (std::sscanf(line.c_str(), "%lf,%lf,%lf", &p.threshold, &p.tpr, &p.fpr) != 3)
      throw io::FormatError("malformed ROC row in " + path.string() + ": " + line);
    out.push_back(p);
  }
  return out;
}

}  // namespace

void evaluate(const Run& run) {
  const auto ds = load_data(run);
  const auto& s = run.settings;
  const auto d = eval_data(ds);
  const fs::path dir = run.dir / "eval";
  clear_dir(dir);
  json m;
  m["dice_min"] = s.dice_min;
  m["max_fpp"] = s.max_fpp;

  if (wants_prehoc(s)) {
    const auto boxes = dqn::read_detections_csv(need(run, "infer/prehoc_detections.csv", "infer"));
    const auto malignant = dqn::read_detections_csv(need(run, "infer/prehoc_malignant.csv", "infer"));
    const auto scores = prehoc::read_scores_csv(need(run, "infer/prehoc_scores.csv", "infer"));

    // Detector alone, every lesion counts.
    const auto det = patient_evals(d, boxes, false, nullptr);
    const auto det_curve = metrics::froc(det, metrics::froc_thresholds(det), s.dice_min);
    metrics::write_froc_csv(dir / "prehoc_froc.csv", det_curve);
    // Detector + classifier against malignant lesions.
    const auto mal = patient_evals(d, malignant, true, nullptr);
    const auto mal_curve = metrics::froc(mal, metrics::froc_thresholds(mal), s.dice_min);
    metrics::write_froc_csv(dir / "prehoc_malignant_froc.csv", mal_curve);
    const auto roc = safe_roc(scores);
    metrics::write_roc_csv(dir / "prehoc_roc.csv", roc);

    write_svg(dir / "prehoc_froc.svg", "Pre-hoc detection FROC", "false positives per patient", "TPR",
              {froc_series("detector, all lesions", det_curve), froc_series("classifier, malignant", mal_curve)});
    write_svg(dir / "prehoc_roc.svg", "Pre-hoc breast ROC", "FPR", "TPR", {roc_series("pre-hoc", roc)});

    m["prehoc"] = {
        {"breast_auc", finite_or_null(safe_auc([&] { return prehoc::breast_auc(scores); }))},
        {"patient_auc", finite_or_null(safe_auc([&] { return prehoc::patient_auc(scores); }))},
        {"detector_tpr_at_max_fpp", metrics::tpr_at_fpp(det_curve, s.max_fpp)},
        {"malignant_tpr_at_max_fpp", metrics::tpr_at_fpp(mal_curve, s.max_fpp)},
    };
  }

  if (wants_posthoc(s)) {
    const auto boxes = dqn::read_detections_csv(need(run, "infer/posthoc_detections.csv", "infer"));
    const auto scores = prehoc::read_scores_csv(need(run, "infer/posthoc_scores.csv", "infer"));
    const double tau = read_eer(run);
    std::map<std::string, bool> positive;
    for (const auto& b : scores) positive[b.breast_id] = b.score > tau;

    const auto all = patient_evals(d, boxes, true, &positive);
    const auto thresholds = metrics::froc_thresholds(all);
    const auto curve_a = metrics::froc(all, thresholds, s.dice_min, metrics::FrocScope::AllPatients);
    const auto curve_p = metrics::froc(all, thresholds, s.dice_min, metrics::FrocScope::PositivePatients);
    metrics::write_froc_csv(dir / "posthoc_froc_all.csv", curve_a);
    metrics::write_froc_csv(dir / "posthoc_froc_positive.csv", curve_p);
    bool dominates = true;
    for (std::size_t i = 0; i < curve_a.size(); ++i) dominates = dominates && curve_p[i].tpr >= curve_a[i].tpr;
    const auto roc = safe_roc(scores);
    metrics::write_roc_csv(dir / "posthoc_roc.csv", roc);
    write_svg(dir / "posthoc_froc.svg", "Post-hoc localization FROC", "false positives per patient", "TPR",
              {froc_series("(A) all patients", curve_a), froc_series("(+) positive patients", curve_p)});

    json post{
        {"breast_auc", finite_or_null(safe_auc([&] { return prehoc::breast_auc(scores); }))},
        {"patient_auc", finite_or_null(safe_auc([&] { return prehoc::patient_auc(scores); }))},
        {"eer_threshold", tau},
        {"tpr_at_max_fpp_all", metrics::tpr_at_fpp(curve_a, s.max_fpp)},
        {"tpr_at_max_fpp_positive", metrics::tpr_at_fpp(curve_p, s.max_fpp)},
        {"positive_dominates_all", dominates},
    };
    std::vector<metrics::Series> rocs{roc_series("fine-tuned from meta", roc)};
    if (fs::exists(run.dir / "infer/posthoc_scratch_scores.csv")) {
      const auto base = prehoc::read_scores_csv(run.dir / "infer/posthoc_scratch_scores.csv");
      const auto base_roc = safe_roc(base);
      metrics::write_roc_csv(dir / "posthoc_scratch_roc.csv", base_roc);
      rocs.push_back(roc_series("from scratch", base_roc));
      post["scratch_breast_auc"] = finite_or_null(safe_auc([&] { return prehoc::breast_auc(base); }));
      post["scratch_patient_auc"] = finite_or_null(safe_auc([&] { return prehoc::patient_auc(base); }));
    }
    write_svg(dir / "posthoc_roc.svg", "Post-hoc breast ROC", "FPR", "TPR", rocs);

    // Mean mask area by breast label.
    if (fs::exists(run.dir / "infer/posthoc_mask_area.csv")) {
      std::istringstream in(io::read_file(run.dir / "infer/posthoc_mask_area.csv"));
      std::string line;
      std::getline(in, line);
      std::array<double, 3> area{}, salient{};
      std::array<int, 3> n{};
      while (std::getline(in, line)) {
        const auto c1 = line.find(',');
        if (c1 == std::string::npos) continue;
        int y = 0;
        double a = 0, f = 0;
        if (std::sscanf(line.c_str() + c1 + 1, "%d,%lf,%lf", &y, &a, &f) != 3 || y < 0 || y > 2)
          throw io::FormatError("malformed mask area row: " + line);
        area[static_cast<std::size_t>(y)] += a;
        salient[static_cast<std::size_t>(y)] += f;
        ++n[static_cast<std::size_t>(y)];
      }
      json areas;
      for (int y = 0; y < 3; ++y) {
        const auto k = static_cast<std::size_t>(y);
        areas["y" + std::to_string(y)] = n[k] ? json{{"area", area[k] / n[k]}, {"salient", salient[k] / n[k]}, {"n", n[k]}}
                                              : json(nullptr);
      }
      if (n[0] && n[2] && area[2] > 0) areas["area_ratio_y0_y2"] = (area[0] / n[0]) / (area[2] / n[2]);
      post["mask_area"] = areas;
    }
    m["posthoc"] = post;
  }
  write_text(dir / "metrics.json", m.dump(2) + "\n");
  log::info("evaluate: wrote " + dir.string());
}

void compare(const Run& run) {
  const auto metrics_path = need(run, "eval/metrics.json", "evaluate");
  const auto m = json::parse(io::read_file(metrics_path));
  const fs::path dir = run.dir / "compare";
  clear_dir(dir);

  auto cell = [&](const char* pipeline, const char* key) -> std::string {
    if (!m.contains(pipeline) || !m[pipeline].contains(key) || m[pipeline][key].is_null()) return "-";
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.3f", m[pipeline][key].get<double>());
    return buf;
  };
  std::string md = "| Pipeline | Breast-wise AUC | Patient-wise AUC |\n|---|---|---|\n";
  std::string csv = "pipeline,breast_auc,patient_auc\n";
  for (const auto& [name, key] : {std::pair{"Pre-hoc", "prehoc"}, std::pair{"Post-hoc", "posthoc"}}) {
    md += std::string("| ") + name + " | " + cell(key, "breast_auc") + " | " + cell(key, "patient_auc") + " |\n";
    csv += std::string(key) + "," + cell(key, "breast_auc") + "," + cell(key, "patient_auc") + "\n";
  }
  if (m.contains("posthoc") && m["posthoc"].contains("scratch_breast_auc")) {
    md += "\n| Diagnosis network | Breast-wise AUC | Patient-wise AUC |\n|---|---|---|\n";
    md += "| Fine-tuned from meta-training | " + cell("posthoc", "breast_auc") + " | " + cell("posthoc", "patient_auc") +
          " |\n";
    md += "| Trained from scratch | " + cell("posthoc", "scratch_breast_auc") + " | " +
          cell("posthoc", "scratch_patient_auc") + " |\n";
  }
  write_text(dir / "auc_table.md", md);
  write_text(dir / "auc_table.csv", csv);

  std::vector<metrics::Series> frocs, rocs;
  const fs::path e = run.dir / "eval";
  if (fs::exists(e / "prehoc_malignant_froc.csv"))
    frocs.push_back(froc_series("pre-hoc", read_froc_csv(e / "prehoc_malignant_froc.csv")));
  if (fs::exists(e / "posthoc_froc_all.csv"))
    frocs.push_back(froc_series("post-hoc (A)", read_froc_csv(e / "posthoc_froc_all.csv")));
  if (fs::exists(e / "posthoc_froc_positive.csv"))
    frocs.push_back(froc_series("post-hoc (+)", read_froc_csv(e / "posthoc_froc_positive.csv")));
  if (fs::exists(e / "prehoc_roc.csv")) rocs.push_back(roc_series("pre-hoc", read_roc_csv(e / "prehoc_roc.csv")));
  if (fs::exists(e / "posthoc_roc.csv")) rocs.push_back(roc_series("post-hoc", read_roc_csv(e / "posthoc_roc.csv")));
  write_svg(dir / "froc.svg", "Malignant lesion FROC", "false positives per patient", "TPR", frocs);
  write_svg(dir / "roc.svg", "Breast-wise ROC", "FPR", "TPR", rocs);
  log::info("compare: wrote " + dir.string());
}

const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"gen-data",   "train-encoder", "train-detector", "train-classifier",
                                              "meta-train", "fine-tune",     "train-saliency", "infer",
                                              "evaluate",   "compare"};
  return names;
}

std::vector<std::string> pipeline_stages(Pipeline p) {
  std::vector<std::string> out{"gen-data"};
  if (p != Pipeline::PostHoc)
    for (const char* s : {"train-encoder", "train-detector", "train-classifier"}) out.emplace_back(s);
  if (p != Pipeline::PreHoc)
    for (const char* s : {"meta-train", "fine-tune", "train-saliency"}) out.emplace_back(s);
  for (const char* s : {"infer", "evaluate", "compare"}) out.emplace_back(s);
  return out;
}

void run_subcommand(const std::string& name, const Run& run) {
  static const std::map<std::string, void (*)(const Run&)> table{
      {"gen-data", gen_data},     {"train-encoder", train_encoder}, {"train-detector", train_detector},
      {"train-classifier", train_classifier}, {"meta-train", meta_train}, {"fine-tune", fine_tune},
      {"train-saliency", train_saliency},     {"infer", infer},           {"evaluate", evaluate},
      {"compare", compare}};
  const auto it = table.find(name);
  if (it == table.end()) throw std::invalid_argument("unknown subcommand: " + name);
  it->second(run);
}

}  // namespace bscreen::experiment
