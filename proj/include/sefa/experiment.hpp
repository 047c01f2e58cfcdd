#pragma once

#include "sefa/acquisition.hpp"
#include "sefa/baseline_mlp.hpp"
#include "sefa/datasets.hpp"
#include "sefa/eval_harness.hpp"
#include "sefa/sefa_model.hpp"

#include "json.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sefa::exp {

struct DatasetSpec {
  /// syn1 | syn2 | syn3 | cube | indicator | csv
  std::string generator = "syn1";
  data::SplitSizes sizes = data::kDeskSyntheticSizes;
  /// Standard deviation of Gaussian noise added to generated features after labeling.
  double noise_sigma = 0.0;
  /// Number of binary features of the indicator problem.
  std::size_t indicator_d = 5;
  /// Seed of the generated or shuffled data; shared by every run seed.
  std::uint64_t seed = 2024;
  std::string csv_path;
  data::CsvOptions csv;

  void validate() const;
};

nlohmann::json to_json(const DatasetSpec& spec);
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

/// Generates or loads the dataset described by `spec`.
data::Dataset build_dataset(const DatasetSpec& spec);

inline constexpr const char* kAblations[] = {"beta0",       "one-acq-sample", "one-train-sample",
                                             "deterministic", "no-normalize",  "no-prob-weight"};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  model::SefaConfig model;
  acq::AcqConfig acquisition;
  baseline::MlpConfig baseline;
  /// Subset of sefa | random | fixed, evaluated in this order.
  std::vector<std::string> policies{"sefa", "random", "fixed"};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir = "runs/experiment";
  /// Acquisition steps; 0 means every feature.
  std::size_t budget = 0;
  /// Test instances evaluated; 0 means the whole test split.
  std::size_t eval_instances = 0;
  /// accuracy | auroc; empty picks AUROC for two classes and accuracy otherwise.
  std::string metric;
  /// Empty or one of kAblations; applied on top of model and acquisition.
  std::string ablation;
  bool export_trajectories = true;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Strict: unknown keys at any level raise ConfigError; missing keys keep defaults.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::string& path);

/// Canonical serialization (sorted keys, fixed number format) and its FNV-1a hash.
std::string canonical_dump(const nlohmann::json& j);
std::string config_hash(const ExperimentConfig& config);

/// Desk-scale defaults for syn1, syn2, syn3, cube and indicator.
ExperimentConfig preset(const std::string& name);
std::vector<std::string> preset_names();

/// Returns `config` with the named ablation written into model/acquisition settings.
ExperimentConfig with_ablation(ExperimentConfig config, const std::string& ablation);
/// Model and acquisition settings the run actually uses (ablation applied).
model::SefaConfig effective_model_config(const ExperimentConfig& config);
acq::AcqConfig effective_acq_config(const ExperimentConfig& config);

/// Independent per-seed streams; new streams never change existing ones.
enum class Stream : std::uint64_t { model_init = 1, training = 2, validation = 3, baseline = 4, ordering = 5, evaluation = 6 };
std::uint64_t stream_seed(std::uint64_t seed, Stream stream);

struct PolicyResult {
  std::string policy;
  eval::AcquisitionCurve curve;
  double curve_mean = 0.0;
  /// Present when the dataset carries ground-truth relevant features.
  std::optional<eval::CompletionStats> completion;
  eval::HeatMap heat_map;
  std::vector<acq::AcquisitionTrajectory> trajectories;
};

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  model::TrainHistory history;
  std::vector<std::size_t> fixed_ordering;
  std::vector<PolicyResult> policies;
  double seconds = 0.0;
};

nlohmann::json seed_result_to_json(const SeedResult& result);

struct PolicySummary {
  std::string policy;
  /// Across seeds (one value per successful seed).
  eval::MeanSe curve_mean;
  std::optional<eval::MeanSe> num_to_complete;
  /// Pooled over every test instance of every successful seed.
  std::optional<eval::MeanSe> num_to_complete_instances;
  std::size_t overruns = 0;
  /// Share of trajectories whose first acquisition is each feature, pooled over seeds.
  std::vector<double> first_pick;
  std::vector<double> curve;
};

struct Summary {
  std::string name;
  std::string config_hash;
  std::string metric;
  std::size_t seeds_ok = 0;
  std::size_t seeds_failed = 0;
  std::vector<PolicySummary> policies;

  const PolicySummary* find(const std::string& policy) const;
};

nlohmann::json to_json(const Summary& summary);
Summary summarize(const ExperimentConfig& config, const std::vector<SeedResult>& seeds);

struct RunOptions {
  bool parallel_seeds = false;
  /// Reuse per-seed results already in the output directory under the same config hash.
  bool resume = false;
  /// Optional directory of trained models and orderings shared between experiments
  /// that differ only in acquisition settings.
  std::string model_cache_dir;
  std::function<void(const std::string&)> log;
};

struct ExperimentOutput {
  Summary summary;
  std::vector<SeedResult> seeds;
  std::string output_dir;
};

/// Trains and evaluates every seed, writing per-seed artifacts, summary.json,
/// summary.csv and manifest.json under config.output_dir. A failing seed is
/// recorded and the others proceed.
ExperimentOutput run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

/// One seed of run_experiment without the summary (artifacts go under `seed_dir` when non-empty).
SeedResult run_seed(const ExperimentConfig& config, const data::Dataset& dataset, std::uint64_t seed,
                    const std::string& seed_dir, const RunOptions& options = {});

}  // namespace sefa::exp
