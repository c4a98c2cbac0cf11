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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "bscreen/binary_io.hpp"
#include "bscreen/experiment.hpp"
#include "bscreen/log.hpp"

using namespace bscreen;
using namespace bscreen::experiment;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("bscreen_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_file(e.path());
  return out;
}

// The hand-enumerated FROC fixture as a run directory: patients A, B and C on
// a 16x16x8 lattice, every Dice value 0 or 1. Breasts without lesions or
// detections do not move the curve.
void write_fixture_run(const fs::path& dir) {
  const phantom::Extents e{16, 16, 8};
  const env::BoundingVolume l1{0, 0, 0, 4, 4, 4}, l3{8, 8, 4, 12, 12, 8}, l4{4, 4, 0, 8, 8, 4};
  phantom::Dataset ds;
  auto breast = [&](const std::string& patient, phantom::Side side, std::vector<env::BoundingVolume> lesions) {
    phantom::BreastSample s;
    s.patient_id = patient;
    s.side = side;
    s.extents = e;
    s.volume.assign(e.voxels(), 0.25f);
    for (const auto& b : lesions) {
      phantom::LesionSpec l;
      l.cls = phantom::LesionClass::Malignant;
      s.lesions.push_back(l);
      s.masks.push_back(env::rasterize(b, e));
    }
    s.y = lesions.empty() ? 0 : 2;
    ds.samples.push_back(std::move(s));
  };
  using phantom::Side;
  breast("A", Side::Left, {l1});
  breast("A", Side::Right, {});
  breast("B", Side::Left, {l1, l3});
  breast("B", Side::Right, {});
  breast("C", Side::Left, {});
  breast("C", Side::Right, {l4});
  ds.split.test = {"A", "B", "C"};
  phantom::save_dataset(dir / "data", ds);

  const std::vector<dqn::BreastDetections> sets{
      {"AL", {{l1, 0.9}, {{8, 8, 0, 12, 12, 4}, 0.4}}},
      {"AR", {}},
      {"BL", {{l3, 0.7}, {l3, 0.5}}},
      {"BR", {}},
      {"CL", {{{10, 10, 0, 14, 14, 4}, 0.6}}},
      {"CR", {{l4, 0.2}}},
  };
  dqn::write_detections_csv(dir / "infer/prehoc_detections.csv", sets);
  dqn::write_detections_csv(dir / "infer/prehoc_malignant.csv", sets);
  std::vector<prehoc::BreastScore> scores;
  for (const auto& s : ds.samples) {
    double best = 0;
    for (const auto& b : sets)
      if (b.breast_id == s.id())
        for (const auto& d : b.detections) best = std::max(best, d.score);
    scores.push_back({s.id(), s.patient_id, best, s.y == 2});
  }
  prehoc::write_scores_csv(dir / "infer/prehoc_scores.csv", scores);

  // Post-hoc side: C is diagnosed negative, so its detections never exist.
  std::vector<dqn::BreastDetections> post = sets;
  post[4].detections.clear();
  post[5].detections.clear();
  dqn::write_detections_csv(dir / "infer/posthoc_detections.csv", post);
  std::vector<prehoc::BreastScore> diag;
  for (const auto& s : ds.samples) diag.push_back({s.id(), s.patient_id, s.patient_id == "C" ? 0.1 : 0.8, s.y == 2});
  prehoc::write_scores_csv(dir / "infer/posthoc_scores.csv", diag);
  io::write_file(dir / "saliency/eer.json", R"({"threshold": 0.5})");
}

Run fixture_run(const fs::path& dir, const std::string& pipeline) {
  return make_run(dir, Config::parse("[run]\npipeline = " + pipeline + "\n"), 1);
}

}  // namespace

TEST_CASE("config profiles pick the matching column") {
  auto c = Config::defaults();
  CHECK(c.profile() == "desk");
  CHECK(c.get_double("detector", "lr") == 1e-4);
  c.set("run", "profile", "paper");
  CHECK(c.get_double("detector", "lr") == 1e-6);
  CHECK(c.get_double("detector", "gamma") == 0.9);  // plain key, both profiles

  // A plain override replaces both columns.
  c.merge(Config::parse("[detector]\nlr = 0.5\n"));
  CHECK(c.get_double("detector", "lr") == 0.5);
  c.set("run", "profile", "desk");
  CHECK(c.get_double("detector", "lr") == 0.5);

  c.set("run", "profile", "laptop");
  CHECK_THROWS_AS(c.profile(), ConfigError);
}

TEST_CASE("config parse errors name the origin and line") {
  try {
    Config::parse("[a]\nx = 1\nnot a pair\n", "my.ini");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("my.ini:3") != std::string::npos);
  }
  CHECK_THROWS_AS(Config::parse("x = 1\n"), ConfigError);
  CHECK_THROWS_AS(Config::parse("[a\n"), ConfigError);
  const auto c = Config::parse("[a]  # comment\nx = 1 ; trailing\n");
  CHECK(c.get("a", "x") == "1");
  CHECK_THROWS_AS(c.get("a", "y"), ConfigError);
  CHECK(c.get_int("a", "x") == 1);
  CHECK(c.get_bool("a", "x"));
  const auto bad = Config::parse("[a]\nf = 1.5\nb = maybe\n");
  CHECK_THROWS_AS(bad.get_int("a", "f"), ConfigError);
  CHECK_THROWS_AS(bad.get_bool("a", "b"), ConfigError);
  CHECK_THROWS_AS(bad.get_double("a", "b"), ConfigError);
}

TEST_CASE("settings reject unknown keys and bad values") {
  CHECK_THROWS_AS(make_run("x", Config::parse("[detector]\nlearning_rate = 1\n"), 1), ConfigError);
  CHECK_THROWS_AS(make_run("x", Config::parse("[run]\npipeline = sideways\n"), 1), ConfigError);
  CHECK_THROWS_AS(make_run("x", Config::parse("[saliency]\nzeta = 1\n"), 1), ConfigError);
  CHECK_THROWS_AS(make_run("x", Config::parse("[detector]\ninitializations = 12\n"), 1), ConfigError);
  CHECK_THROWS_AS(make_run("x", Config::parse("[classifier]\npatch = 8x8x8\n"), 1), ConfigError);
  CHECK_THROWS_AS(make_run("x", Config::parse("[meta]\nalpha = fast\n"), 1), ConfigError);
  CHECK_NOTHROW(make_run("x", Config{}, 1));
}

TEST_CASE("paper profile carries the published constants") {
  auto c = Config::defaults();
  c.set("run", "profile", "paper");
  const auto s = make_settings(c);
  CHECK(s.preset.paper_scale);
  CHECK(s.detector.trainer.gamma == 0.9);
  CHECK(s.detector.env.trigger_reward == 10);
  CHECK(s.detector.env.trigger_threshold == 0.2);
  CHECK(s.detector.trainer.replay_capacity == 10000);
  CHECK(s.detector.trainer.batch == 100);
  CHECK(s.detector.trainer.adam.lr == 1e-6);
  CHECK(s.detector.trainer.schedule.start == 1.0);
  CHECK(s.detector.trainer.schedule.end == 0.1);
  CHECK(s.detector.trainer.schedule.horizon == 300);
  CHECK(s.detector.trainer.schedule.kappa == 0.5);
  CHECK(s.detector.trainer.max_steps == 20);
  CHECK(s.encoder.positives == 8000);
  CHECK(s.encoder.negatives == 8000);
  CHECK(s.meta.alpha == 0.01);
  CHECK(s.meta.beta == 0.001);
  CHECK(s.meta.adapt_steps == 5);
  CHECK(s.meta.iterations == 3000);
  CHECK(s.meta.tasks_per_batch == 5);
  CHECK(s.meta.n_train == 4);
  CHECK(s.meta.n_val == 4);
  CHECK(s.meta.buffer_size == 40);
  CHECK(s.localize.zeta == 0.8);
  CHECK(s.saliency.weights.tv == 0.1);
  CHECK(s.saliency.weights.area == 3);
  CHECK(s.saliency.weights.preserve == 1);
  CHECK(s.saliency.weights.destroy == 2.5);
  CHECK(s.saliency.weights.destroy_form == saliency::DestroyForm::LogProbability);
  CHECK(s.dice_min == 0.2);
  CHECK(s.patients == 117);
  CHECK(presets::lesion_classifier(s.preset).input == Shape{1, 12, 24, 24});
}

TEST_CASE("resolved config reproduces the settings") {
  auto c = Config::defaults();
  c.merge(Config::parse("[meta]\nbeta = 0.02\n[data]\ntier = easy\n"));
  const std::string text = c.resolved_text();
  auto back = Config::defaults();
  back.merge(Config::parse(text));
  CHECK(back.resolved_text() == text);
  // Switching the profile no longer matters once resolved.
  auto paper = back;
  paper.set("run", "profile", "paper");
  paper.merge(Config::parse(text));
  CHECK(make_settings(paper).meta.beta == 0.02);
  CHECK(make_settings(back).phantom.radius_min == phantom::PhantomConfig::easy().radius_min);
}

TEST_CASE("stage seeds are distinct and stable") {
  std::set<std::uint64_t> seen;
  for (auto s : {Stage::Data, Stage::Encoder, Stage::Detector, Stage::Classifier, Stage::Meta, Stage::FineTune,
                 Stage::Saliency, Stage::Infer})
    seen.insert(stage_seed(7, s));
  CHECK(seen.size() == 8);
  CHECK(stage_seed(7, Stage::Meta) == stage_seed(7, Stage::Meta));
  CHECK(stage_seed(7, Stage::Meta) != stage_seed(8, Stage::Meta));
}

TEST_CASE("gen-data with a fixed seed is byte-identical across runs") {
  log::set_level(log::Level::Warn);
  TempDir a("gen_a"), b("gen_b");
  const auto cfg = Config::parse("[data]\npatients = 6\n");
  gen_data(make_run(a.path, cfg, 42));
  gen_data(make_run(b.path, cfg, 42));
  const auto sa = snapshot(a.path / "data"), sb = snapshot(b.path / "data");
  CHECK(sa.size() == sb.size());
  CHECK(sa == sb);
  CHECK(sa.count("manifest.json") == 1);

  TempDir c("gen_c");
  gen_data(make_run(c.path, cfg, 43));
  CHECK(snapshot(c.path / "data").at("volumes.bin") != sa.at("volumes.bin"));
}

TEST_CASE("missing upstream artifacts name the producing subcommand") {
  TempDir d("missing");
  const auto run = make_run(d.path, Config{}, 1);
  try {
    train_encoder(run);
    FAIL("expected MissingArtifact");
  } catch (const MissingArtifact& e) {
    CHECK(e.producer() == "gen-data");
    CHECK(std::string(e.what()).find("bscreen gen-data") != std::string::npos);
  }
  log::set_level(log::Level::Warn);
  gen_data(make_run(d.path, Config::parse("[data]\npatients = 4\n"), 1));
  auto expect_producer = [&](void (*stage)(const Run&), const std::string& producer) {
    try {
      stage(run);
      FAIL("expected MissingArtifact");
    } catch (const MissingArtifact& e) {
      CHECK(e.producer() == producer);
    }
  };
  expect_producer(train_detector, "train-encoder");
  expect_producer(train_classifier, "train-encoder");
  expect_producer(fine_tune, "meta-train");
  expect_producer(train_saliency, "fine-tune");
  expect_producer(infer, "train-encoder");
  expect_producer(evaluate, "infer");
  expect_producer(compare, "evaluate");
  CHECK_THROWS_AS(run_subcommand("train-everything", run), std::invalid_argument);
}

TEST_CASE("evaluate on the golden detections reproduces the golden FROC") {
  log::set_level(log::Level::Warn);
  TempDir d("golden");
  write_fixture_run(d.path);
  const auto before = snapshot(d.path);
  evaluate(fixture_run(d.path, "pre-hoc"));
  CHECK(io::read_file(d.path / "eval/prehoc_froc.csv") ==
        io::read_file(fs::path(BSCREEN_TEST_DATA) / "froc_golden.csv"));

  // evaluate only adds eval/.
  auto after = snapshot(d.path);
  std::erase_if(after, [](const auto& kv) { return kv.first.rfind("eval", 0) == 0; });
  CHECK(after == before);
}

TEST_CASE("compare emits the four-cell AUC table") {
  log::set_level(log::Level::Warn);
  TempDir d("compare");
  write_fixture_run(d.path);
  const auto run = fixture_run(d.path, "both");
  evaluate(run);
  compare(run);

  const std::string csv = io::read_file(d.path / "compare/auc_table.csv");
  std::vector<std::string> lines;
  std::istringstream in(csv);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "pipeline,breast_auc,patient_auc");
  CHECK(lines[1].rfind("prehoc,", 0) == 0);
  CHECK(lines[2].rfind("posthoc,", 0) == 0);
  for (const auto& l : lines) CHECK(std::count(l.begin(), l.end(), ',') == 2);

  const std::string md = io::read_file(d.path / "compare/auc_table.md");
  CHECK(md.find("| Pre-hoc |") != std::string::npos);
  CHECK(md.find("| Post-hoc |") != std::string::npos);
  CHECK(fs::exists(d.path / "compare/froc.svg"));
  CHECK(fs::exists(d.path / "compare/roc.svg"));

  const auto m = nlohmann::json::parse(io::read_file(d.path / "eval/metrics.json"));
  CHECK(m["posthoc"]["positive_dominates_all"].get<bool>());
  // Post-hoc detections on A and B only: 2 of 4 malignant lesions overall.
  CHECK(m["posthoc"]["tpr_at_max_fpp_all"].get<double>() == 0.5);
  CHECK(m["posthoc"]["tpr_at_max_fpp_positive"].get<double>() == doctest::Approx(2.0 / 3));
}
