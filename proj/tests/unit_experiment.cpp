#include "sefa/errors.hpp"
#include "sefa/experiment.hpp"

#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

using namespace sefa;
namespace fs = std::filesystem;

namespace {

exp::ExperimentConfig tiny_experiment(const std::string& out) {
  auto c = exp::preset("indicator");
  c.name = "tiny";
  c.dataset.sizes = {300, 40, 40};
  c.dataset.indicator_d = 3;
  c.model.latent_dim = 2;
  c.model.encoder_width = 8;
  c.model.predictor_width = 16;
  c.model.train_samples = 4;
  c.model.epochs = 2;
  c.model.batch_size = 64;
  c.model.val_instances = 20;
  c.model.val_predict_samples = 4;
  c.model.val_score_samples = 4;
  c.acquisition.predict_samples = 8;
  c.acquisition.score_samples = 8;
  c.baseline.width = 16;
  c.baseline.depth = 1;
  c.baseline.epochs = 2;
  c.baseline.val_instances = 40;
  c.eval_instances = 20;
  c.seeds = {1, 2};
  c.output_dir = out;
  return c;
}

std::string fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "sefa_unit" / name;
  fs::remove_all(dir);
  return dir.string();
}

}  // namespace

TEST_SUITE("experiment") {
  TEST_CASE("presets validate and round trip through json") {
    for (const auto& name : exp::preset_names()) {
      const auto c = exp::preset(name);
      CHECK_NOTHROW(c.validate());
      const auto back = exp::experiment_config_from_json(exp::to_json(c));
      CHECK(exp::config_hash(back) == exp::config_hash(c));
    }
    CHECK_THROWS_AS(exp::preset("nope"), ConfigError);
  }

  TEST_CASE("unknown keys are rejected at every level") {
    auto j = exp::to_json(exp::preset("syn1"));
    j["extra"] = 1;
    CHECK_THROWS_AS(exp::experiment_config_from_json(j), ConfigError);
    j = exp::to_json(exp::preset("syn1"));
    j["model"]["extra"] = 1;
    CHECK_THROWS_AS(exp::experiment_config_from_json(j), ConfigError);
    j = exp::to_json(exp::preset("syn1"));
    j["dataset"]["extra"] = 1;
    CHECK_THROWS_AS(exp::experiment_config_from_json(j), ConfigError);
  }

  TEST_CASE("missing keys keep defaults") {
    const auto c = exp::experiment_config_from_json(nlohmann::json{{"name", "x"}});
    CHECK(c.name == "x");
    CHECK(c.seeds == std::vector<std::uint64_t>{1, 2, 3});
  }

  TEST_CASE("invalid values are rejected") {
    auto c = exp::preset("syn1");
    c.policies = {"sefa", "sefa"};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = exp::preset("syn1");
    c.seeds = {1, 1};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = exp::preset("syn1");
    c.metric = "f1";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = exp::preset("syn1");
    c.dataset.generator = "mnist";
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(exp::with_ablation(exp::preset("syn1"), "nope"), ConfigError);
  }

  TEST_CASE("config hash ignores key order and tracks content") {
    const auto c = exp::preset("syn2");
    const auto j = exp::to_json(c);
    const auto reparsed = nlohmann::json::parse(j.dump(2));
    CHECK(exp::canonical_dump(j) == exp::canonical_dump(reparsed));
    auto d = c;
    d.model.beta *= 2;
    CHECK(exp::config_hash(c) != exp::config_hash(d));
  }

  TEST_CASE("config files load and report errors") {
    const auto dir = fresh_dir("cfg");
    fs::create_directories(dir);
    const auto path = dir + "/c.json";
    std::ofstream(path) << exp::to_json(exp::preset("syn3")).dump();
    CHECK(exp::config_hash(exp::load_experiment_config(path)) == exp::config_hash(exp::preset("syn3")));
    std::ofstream(path) << "{not json";
    CHECK_THROWS_AS(exp::load_experiment_config(path), ConfigError);
    CHECK_THROWS_AS(exp::load_experiment_config(dir + "/missing.json"), ConfigError);
  }

  TEST_CASE("ablations change the effective settings") {
    const auto base = exp::preset("syn3");
    CHECK(exp::effective_model_config(exp::with_ablation(base, "beta0")).beta == 0.0);
    CHECK(exp::effective_model_config(exp::with_ablation(base, "one-train-sample")).train_samples == 1);
    CHECK(exp::effective_model_config(exp::with_ablation(base, "deterministic")).deterministic_encoder);
    CHECK(exp::effective_acq_config(exp::with_ablation(base, "one-acq-sample")).single_sample);
    CHECK_FALSE(exp::effective_acq_config(exp::with_ablation(base, "no-normalize")).normalize_scores);
    CHECK_FALSE(exp::effective_acq_config(exp::with_ablation(base, "no-prob-weight")).probability_weighting);
  }

  TEST_CASE("seed streams are distinct") {
    std::set<std::uint64_t> seen;
    for (auto s : {exp::Stream::model_init, exp::Stream::training, exp::Stream::validation, exp::Stream::baseline,
                   exp::Stream::ordering, exp::Stream::evaluation}) {
      seen.insert(exp::stream_seed(1, s));
    }
    CHECK(seen.size() == 6);
  }

  TEST_CASE("datasets build from specs") {
    exp::DatasetSpec spec;
    spec.generator = "syn2";
    spec.sizes = {30, 5, 5};
    const auto ds = exp::build_dataset(spec);
    CHECK(ds.train.size() == 30);
    spec.generator = "csv";
    CHECK_THROWS_AS(spec.validate(), ConfigError);
  }

  TEST_CASE("a small experiment writes its artifacts and is reproducible") {
    const auto out_a = fresh_dir("run_a");
    const auto out_b = fresh_dir("run_b");
    const auto a = exp::run_experiment(tiny_experiment(out_a));
    const auto b = exp::run_experiment(tiny_experiment(out_b));
    CHECK(a.summary.seeds_ok == 2);
    CHECK(a.summary.seeds_failed == 0);
    for (const auto* file : {"summary.json", "summary.csv", "manifest.json", "seed_1/result.json", "seed_1/model.sefa",
                             "seed_1/curve_sefa.csv", "seed_1/heatmap_random.csv", "seed_2/trajectories_fixed.csv"}) {
      CHECK_MESSAGE(fs::exists(fs::path(out_a) / file), file);
    }
    REQUIRE(a.summary.policies.size() == 3);
    for (std::size_t p = 0; p < 3; ++p) {
      CHECK(a.summary.policies[p].curve_mean.mean == b.summary.policies[p].curve_mean.mean);
      CHECK(a.summary.policies[p].num_to_complete.has_value());
    }
    const auto* sefa = a.summary.find("sefa");
    REQUIRE(sefa != nullptr);
    CHECK(sefa->first_pick.size() == 4);
  }

  TEST_CASE("resume reuses finished seeds") {
    const auto out = fresh_dir("run_resume");
    auto cfg = tiny_experiment(out);
    cfg.seeds = {5};
    cfg.policies = {"sefa"};
    const auto first = exp::run_experiment(cfg);
    std::vector<std::string> logs;
    exp::RunOptions opt;
    opt.resume = true;
    opt.log = [&](const std::string& line) { logs.push_back(line); };
    const auto second = exp::run_experiment(cfg, opt);
    CHECK(second.summary.policies[0].curve_mean.mean == first.summary.policies[0].curve_mean.mean);
    CHECK(second.seeds[0].seconds == first.seeds[0].seconds);
  }
}
