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

// bscreen: command-line runner for the pre-hoc and post-hoc pipelines.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "bscreen/binary_io.hpp"
#include "bscreen/experiment.hpp"
#include "bscreen/kernels.hpp"
#include "bscreen/log.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ex = bscreen::experiment;

int main(int argc, char** argv) {
  CLI::App app{"Breast lesion screening experiments on synthetic volumes"};
  app.require_subcommand(1);

  std::string config_path, out = "run", level = "info";
  std::uint64_t seed = 1;
  bool deterministic = false;
  double scale = 1.0;
  app.add_option("--config", config_path, "INI file merged over the defaults")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "root seed");
  app.add_option("--out", out, "run directory");
  app.add_flag("--deterministic", deterministic, "single-threaded everywhere");
  app.add_option("--scale", scale, "network width multiplier")->check(CLI::PositiveNumber);
  app.add_option("--log-level", level, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  const std::map<std::string, std::string> about{
      {"gen-data", "synthesize the phantom dataset and its split"},
      {"train-encoder", "train the patch encoder used as the detector's observation"},
      {"train-detector", "train the Q-learning lesion detector"},
      {"train-classifier", "detect on train/val and train the region classifier"},
      {"meta-train", "curriculum meta-training of the diagnosis network"},
      {"fine-tune", "screening fine-tuning from the meta initialization (and from scratch)"},
      {"train-saliency", "train the mask decoder on the frozen diagnosis network"},
      {"infer", "score and localize the test split with both pipelines"},
      {"evaluate", "ROC, FROC and mask statistics from the inference outputs"},
      {"compare", "pre-hoc vs post-hoc tables and overlay plots"},
  };
  for (const auto& name : ex::subcommands()) {
    const auto it = about.find(name);
    app.add_subcommand(name, it == about.end() ? "" : it->second)->fallthrough();
  }
  app.add_subcommand("all", "every stage of the configured pipeline(s)")->fallthrough();
  app.add_subcommand("print-config", "print the default configuration")->fallthrough();

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  using bscreen::log::Level;
  bscreen::log::set_level(level == "debug" ? Level::Debug
                          : level == "warn" ? Level::Warn
                          : level == "error" ? Level::Error
                                             : Level::Info);

  if (command == "print-config") {
    std::cout << ex::Config::default_text();
    return 0;
  }

  try {
    ex::Config config;
    if (!config_path.empty()) config = ex::Config::parse(bscreen::io::read_file(config_path), config_path);
    const auto run = ex::make_run(out, config, seed, scale);

    int threads = deterministic ? 1 : run.settings.threads;
    if (threads > 0) {
      bscreen::kernels::set_thread_count(threads);
#ifdef _OPENMP
      omp_set_num_threads(threads);
#endif
    }
    std::filesystem::create_directories(run.dir);

    if (command == "all") {
      for (const auto& stage : ex::pipeline_stages(run.settings.pipeline)) ex::run_subcommand(stage, run);
    } else {
      ex::run_subcommand(command, run);
    }
  } catch (const ex::MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ex::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
