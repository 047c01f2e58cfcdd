#pragma once

#include "sefa/acquisition.hpp"
#include "sefa/datasets.hpp"
#include "sefa/nn_core.hpp"
#include "sefa/sefa_model.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace sefa::eval {

enum class MetricKind { accuracy, auroc };

/// AUROC for two classes, accuracy otherwise.
MetricKind default_metric(std::size_t num_classes);
std::string to_string(MetricKind kind);
MetricKind metric_from_string(const std::string& name);

/// Argmax match rate; argmax ties go to the lowest class index.
double accuracy(const nn::MatrixT<double>& probs, std::span<const int> labels);
/// Mann-Whitney AUROC with tied scores counted 1/2. Throws DomainError unless both classes occur.
double auroc(std::span<const double> scores, std::span<const int> labels);
/// AUROC uses the class-1 probability as the score.
double compute_metric(MetricKind kind, const nn::MatrixT<double>& probs, std::span<const int> labels);
acq::MetricFn metric_fn(MetricKind kind);

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};
/// Mean and standard error (sample std / sqrt(n); 0 for n = 1).
MeanSe mean_se(std::span<const double> values);

struct AcquisitionCurve {
  MetricKind kind = MetricKind::accuracy;
  /// Metric after 0, 1, ..., budget acquisitions.
  std::vector<double> values;

  std::size_t budget() const { return values.empty() ? 0 : values.size() - 1; }
  /// Average over steps 1..budget (the step-0 value when budget is 0).
  double mean() const;
};

struct Evaluation {
  AcquisitionCurve curve;
  double mean = 0.0;
  std::vector<acq::AcquisitionTrajectory> trajectories;
};

/// Runs `policy` on every instance of `split` (availability = the instance mask),
/// instance n using the rng stream derive_seed(seed, n).
Evaluation evaluate_acquisition(const acq::Policy& policy, const acq::Predictor& predictor,
                                const model::SefaModel* scorer, const data::Split& split, MetricKind metric,
                                std::size_t budget, const acq::AcqConfig& config, std::uint64_t seed);

/// Curve of stored trajectories; instances that stopped early keep their last prediction.
AcquisitionCurve curve_from_trajectories(std::span<const acq::AcquisitionTrajectory> trajectories,
                                         std::span<const int> labels, MetricKind metric, std::size_t budget);

/// 1-based step at which the last relevant feature of `relevant` appears in `acquired`;
/// budget + 1 when some relevant feature is never acquired.
std::size_t steps_to_complete(std::span<const std::size_t> acquired, std::span<const std::size_t> relevant,
                              std::size_t budget);

struct CompletionStats {
  MeanSe summary;
  std::vector<double> per_instance;
  std::size_t overruns = 0;
};

CompletionStats num_to_complete(std::span<const acq::AcquisitionTrajectory> trajectories,
                                std::span<const std::vector<std::size_t>> relevant, std::size_t budget);

struct HeatMap {
  /// proportions[t][i]: share of instances still acquiring at step t+1 that picked feature i.
  std::vector<std::vector<double>> proportions;
  std::vector<std::size_t> counts;
};

HeatMap heat_map(std::span<const acq::AcquisitionTrajectory> trajectories, std::size_t steps, std::size_t num_features);

void write_curve_csv(const std::string& path, const AcquisitionCurve& curve);
void write_heatmap_csv(const std::string& path, const HeatMap& map, const data::FeatureSchema& schema);
/// One row per (instance, step): chosen feature, revealed value and class distribution.
void write_trajectories_csv(const std::string& path, std::span<const acq::AcquisitionTrajectory> trajectories,
                            std::size_t num_classes);
/// One JSON object per (instance, step), line-delimited.
void write_trajectories_jsonl(const std::string& path, std::span<const acq::AcquisitionTrajectory> trajectories);

/// Per-epoch validation score for training: mean acquisition metric over steps 1..d of
/// the SEFA policy on the first `val_instances` validation instances, at the model's
/// validation sample counts and a fixed seed.
model::Validator make_acquisition_validator(const data::Split& val, std::uint64_t seed);

}  // namespace sefa::eval
