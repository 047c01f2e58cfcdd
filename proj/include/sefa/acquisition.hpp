#pragma once

#include "sefa/datasets.hpp"
#include "sefa/nn_core.hpp"
#include "sefa/rng.hpp"
#include "sefa/sefa_model.hpp"

#include "json.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace sefa::acq {

struct AcqConfig {
  std::size_t predict_samples = 200;
  std::size_t score_samples = 200;
  bool normalize_scores = true;
  bool probability_weighting = true;
  /// Ablation: score with a single latent sample.
  bool single_sample = false;
  /// Draw separate latent samples for every class instead of sharing one set across classes.
  bool fresh_class_samples = false;

  std::size_t scoring_samples() const { return single_sample ? 1 : score_samples; }
  void validate() const;
};

nlohmann::json to_json(const AcqConfig& config);
AcqConfig acq_config_from_json(const nlohmann::json& j);

/// Anything that maps prepared instances to class probabilities.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual const data::FeatureSchema& schema() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual data::MaskedInstance prepare(const data::MaskedInstance& raw) const = 0;
  /// Rows = instances. One rng per instance; deterministic predictors ignore them.
  virtual nn::MatrixT<double> predict(std::span<const data::MaskedInstance> prepared, std::span<Rng> rngs) const = 0;
};

class SefaPredictor : public Predictor {
 public:
  SefaPredictor(const model::SefaModel& model, std::size_t samples) : model_(model), samples_(samples) {}

  const data::FeatureSchema& schema() const override { return model_.schema(); }
  std::size_t num_classes() const override { return model_.num_classes(); }
  data::MaskedInstance prepare(const data::MaskedInstance& raw) const override { return model_.prepare(raw); }
  nn::MatrixT<double> predict(std::span<const data::MaskedInstance> prepared, std::span<Rng> rngs) const override {
    return model_.predict_batch(prepared, samples_, rngs);
  }

 private:
  const model::SefaModel& model_;
  std::size_t samples_;
};

struct FeatureScores {
  /// Final scores: zero at observed or unavailable features.
  std::vector<double> scores;
  /// Scores before masking.
  std::vector<double> unmasked;
  /// 1 where the feature is unobserved and available.
  std::vector<std::uint8_t> eligible;
  /// p(Y | x_O) used for the class weights.
  std::vector<double> class_probs;
};

/// Per-feature r for one latent sample given ||g_{G_i}||. Normalized to sum 1 when
/// `normalize`; an all-zero gradient gives the uniform vector 1/d.
std::vector<double> sample_feature_scores(std::span<const double> group_norms, bool normalize);

/// Latent-gradient scores for a batch of prepared (current-state) instances.
/// `availability` may be empty (everything available) or hold one mask per instance.
std::vector<FeatureScores> score_features_batch(const model::SefaModel& model,
                                                std::span<const data::MaskedInstance> prepared,
                                                std::span<const std::vector<std::uint8_t>> availability,
                                                const nn::MatrixT<double>& class_probs, const AcqConfig& config,
                                                std::span<Rng> rngs);

/// Single instance: predicts p(Y | x_O) with predict_samples draws, then scores.
FeatureScores score_features(const model::SefaModel& model, const data::MaskedInstance& raw, const AcqConfig& config,
                             Rng& rng, std::span<const std::uint8_t> availability = {});

/// Argmax over eligible features, ties to the lowest index. Throws ExhaustedError.
std::size_t select_next(const FeatureScores& scores);

struct Policy {
  enum class Kind { sefa, random, fixed };

  Kind kind = Kind::sefa;
  std::vector<std::size_t> ordering;

  static Policy sefa() { return {}; }
  static Policy random() { return {Kind::random, {}}; }
  /// Throws ConfigError unless `ordering` is a permutation of [0, ordering.size()).
  static Policy fixed(std::vector<std::size_t> ordering);
  std::string name() const;
};

/// Uniformly random permutation of [0, d) (Fisher-Yates on rng).
std::vector<std::size_t> random_permutation(std::size_t d, Rng& rng);

struct TrajectoryStep {
  std::size_t feature = 0;
  float value = 0.0f;
  std::vector<double> class_probs;
  /// Scores the choice was made from (SEFA policy only).
  std::vector<double> scores;
};

struct AcquisitionTrajectory {
  std::vector<double> initial_probs;
  std::vector<TrajectoryStep> steps;

  std::vector<std::size_t> acquired() const;
  /// Class probabilities after `t` acquisitions (t = 0 is the initial prediction).
  const std::vector<double>& probs_at(std::size_t t) const { return t == 0 ? initial_probs : steps[t - 1].class_probs; }
};

/// Runs acquisitions for several instances in lockstep. `raw[b].mask` is the data
/// availability; acquisition starts from `initial_masks[b]` (or nothing observed).
/// `scorer` is required for the SEFA policy. Each instance consumes only its own rng,
/// so random draws do not depend on batching; results agree up to floating-point rounding.
std::vector<AcquisitionTrajectory> run_trajectories(const Policy& policy, const Predictor& predictor,
                                                    const model::SefaModel* scorer,
                                                    std::span<const data::MaskedInstance> raw, std::size_t budget,
                                                    const AcqConfig& config, std::span<Rng> rngs,
                                                    std::span<const std::vector<std::uint8_t>> initial_masks = {});

AcquisitionTrajectory run_trajectory(const Policy& policy, const model::SefaModel& model,
                                     const data::MaskedInstance& raw, std::size_t budget, const AcqConfig& config,
                                     Rng& rng);

using MetricFn = std::function<double(const nn::MatrixT<double>& probs, std::span<const int> labels)>;

/// Greedy forward selection: each round unmasks the remaining feature that gives
/// the best metric on `split` together with the features already placed.
std::vector<std::size_t> build_fixed_ordering(const Predictor& predictor, const data::Split& split,
                                              const MetricFn& metric, std::uint64_t seed);

}  // namespace sefa::acq
