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

// Run-directory orchestration of both pipelines: configuration, per-stage
// seeding, artifacts and summaries.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bscreen/dqn.hpp"
#include "bscreen/env.hpp"
#include "bscreen/meta.hpp"
#include "bscreen/phantom.hpp"
#include "bscreen/prehoc.hpp"
#include "bscreen/saliency.hpp"

namespace bscreen::experiment {

/// Thrown when a stage input is absent; names the subcommand that makes it.
class MissingArtifact : public std::runtime_error {
 public:
  MissingArtifact(const std::filesystem::path& path, std::string producer);
  const std::string& producer() const { return producer_; }

 private:
  std::string producer_;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sectioned `key = value` text. A key may carry a `.paper` or `.desk`
/// suffix; lookups prefer the variant of the active profile ([run] profile).
/// `#` and `;` start comments.
class Config {
 public:
  static Config parse(std::string_view text, const std::string& origin = "config");
  static Config defaults();
  static std::string_view default_text();

  /// Entries of `other` replace equal (section, key) pairs or are appended.
  void merge(const Config& other);
  void set(const std::string& section, const std::string& key, const std::string& value);

  std::string profile() const;
  std::optional<std::string> find(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key) const;
  int get_int(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key) const;

  /// Every key resolved for the active profile, in declaration order.
  std::string resolved_text() const;
  /// (section, key) pairs with profile suffixes removed, in declaration order.
  std::vector<std::pair<std::string, std::string>> keys() const;

 private:
  struct Entry {
    std::string key, value;
  };
  struct Section {
    std::string name;
    std::vector<Entry> entries;
  };
  Section* section(const std::string& name, bool create);
  const Section* section(const std::string& name) const;
  std::vector<Section> sections_;
};

enum class Pipeline { PreHoc, PostHoc, Both };

struct Settings {
  std::string profile;
  Pipeline pipeline = Pipeline::Both;
  int threads = 0;
  phantom::PhantomConfig phantom;
  int patients = 117;
  presets::PresetOptions preset;
  env::EncoderConfig encoder;
  dqn::DetectorConfig detector;
  prehoc::ClassifierConfig classifier;
  meta::MetaConfig meta;
  meta::FineTuneConfig fine_tune;
  bool scratch_baseline = true;
  saliency::SaliencyConfig saliency;
  saliency::LocalizeConfig localize;
  bool export_masks = false;
  double dice_min = 0.2;
  double max_fpp = 3.0;
};

/// Typed view; `width` scales every network preset.
Settings make_settings(const Config& config, double width = 1.0);

enum class Stage : std::uint64_t {
  Data = 1, Encoder, Detector, Classifier, Meta, FineTune, Saliency, Infer,
};
std::uint64_t stage_seed(std::uint64_t root, Stage stage);

struct Run {
  std::filesystem::path dir;
  Config config;
  Settings settings;
  std::uint64_t seed = 0;
};

Run make_run(const std::filesystem::path& dir, const Config& config, std::uint64_t seed, double width = 1.0);

// Subcommands. Each reads its inputs from and writes its outputs to run.dir.
void gen_data(const Run& run);
void train_encoder(const Run& run);
void train_detector(const Run& run);
void train_classifier(const Run& run);
void meta_train(const Run& run);
void fine_tune(const Run& run);
void train_saliency(const Run& run);
void infer(const Run& run);
void evaluate(const Run& run);
void compare(const Run& run);

/// Subcommand names in pipeline order.
const std::vector<std::string>& subcommands();
/// The subcommands a full run of `pipeline` needs, in order.
std::vector<std::string> pipeline_stages(Pipeline pipeline);
void run_subcommand(const std::string& name, const Run& run);

}  // namespace bscreen::experiment
