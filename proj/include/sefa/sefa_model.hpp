#pragma once

#include "sefa/datasets.hpp"
#include "sefa/nn_core.hpp"
#include "sefa/rng.hpp"

#include "json.hpp"

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace sefa::model {

inline constexpr float kSigmaFloor = 1e-4f;
inline constexpr float kDeterministicSigma = 1e-12f;
inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr int kModelFormatVersion = 1;

struct SefaConfig {
  std::size_t latent_dim = 6;
  std::size_t encoder_width = 50;
  std::size_t encoder_depth = 2;
  std::size_t predictor_width = 150;
  std::size_t predictor_depth = 2;
  double beta = 0.0005;
  std::size_t train_samples = 100;
  std::size_t predict_samples = 200;
  std::size_t score_samples = 200;
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 40;
  std::size_t patience = 5;
  double lr_decay = 0.2;
  bool deterministic_encoder = false;
  // Per-epoch validation fidelity.
  std::size_t val_instances = 1000;
  std::size_t val_predict_samples = 50;
  std::size_t val_score_samples = 50;

  /// Throws ConfigError on any out-of-range field.
  void validate() const;
};

nlohmann::json to_json(const SefaConfig& config);
/// Strict: unknown keys are rejected with ConfigError; missing keys keep defaults.
SefaConfig sefa_config_from_json(const nlohmann::json& j);

nlohmann::json schema_to_json(const data::FeatureSchema& schema);
data::FeatureSchema schema_from_json(const nlohmann::json& j);

/// Per-instance diagonal Gaussians over the concatenated latent groups (rows = instances).
struct LatentBatch {
  nn::Matrix mu;
  nn::Matrix sigma;
};

struct LatentGaussian {
  std::vector<float> mu;
  std::vector<float> sigma;
};

template <typename Scalar>
struct SefaGradsT {
  std::vector<nn::MlpGradsT<Scalar>> encoders;
  std::vector<nn::MatrixT<Scalar>> embeddings;
  nn::MlpGradsT<Scalar> predictor;
};
using SefaGrads = SefaGradsT<float>;

/// A model's networks copied into another precision, for numerical gradient checks.
template <typename Scalar>
struct SefaNetT {
  data::FeatureSchema schema;
  std::size_t num_classes = 0;
  SefaConfig config;
  std::vector<nn::MlpParamsT<Scalar>> encoders;
  std::vector<nn::MatrixT<Scalar>> embeddings;
  nn::MlpParamsT<Scalar> predictor;

  /// Same tensor order as SefaModel::parameters.
  std::vector<std::span<Scalar>> parameters();
  static std::vector<std::span<Scalar>> gradients(SefaGradsT<Scalar>& grads);
  void bump_revision();
};

struct LossBreakdown {
  double loss = 0.0;
  double nll = 0.0;
  double kl = 0.0;
};

class SefaModel {
 public:
  SefaModel() = default;

  /// Fresh model: He-initialized encoders/predictor, embeddings N(0, 1).
  static SefaModel create(const data::FeatureSchema& schema, std::size_t num_classes,
                          data::CopulaTransform copula, const SefaConfig& config, Rng& rng);

  const data::FeatureSchema& schema() const { return schema_; }
  const SefaConfig& config() const { return config_; }
  SefaConfig& mutable_config() { return config_; }
  const data::CopulaTransform& copula() const { return copula_; }
  std::size_t num_features() const { return schema_.size(); }
  std::size_t num_classes() const { return num_classes_; }
  std::size_t latent_width() const { return config_.latent_dim * schema_.size(); }
  /// First latent column of feature i's group; the group has latent_dim columns.
  std::size_t group_offset(std::size_t feature) const { return feature * config_.latent_dim; }

  /// Copula-transforms continuous values; the result is what encode_batch expects.
  data::MaskedInstance prepare(const data::MaskedInstance& raw) const;
  void check_instance(const data::MaskedInstance& instance) const;

  LatentGaussian encode(const data::MaskedInstance& raw) const;
  /// Eval-mode encoding of prepared instances.
  LatentBatch encode_batch(std::span<const data::MaskedInstance> prepared) const;

  /// Draws `samples` latent rows per instance: row b*samples+s = mu_b + sigma_b * eps.
  /// Each instance consumes its own rng.
  nn::Matrix sample_latent(const LatentBatch& latent, std::size_t samples, std::span<Rng> rngs) const;

  /// Class probabilities averaged over `samples` latent draws (rows = instances).
  nn::MatrixT<double> predict_batch(std::span<const data::MaskedInstance> prepared, std::size_t samples,
                                    std::span<Rng> rngs) const;
  std::vector<double> predict(const data::MaskedInstance& raw, std::size_t samples, Rng& rng) const;

  const nn::MlpParams& predictor() const { return predictor_; }
  nn::MlpParams& predictor() { return predictor_; }
  /// Encoder of continuous feature i (empty params for categorical features).
  const std::vector<nn::MlpParams>& encoders() const { return encoders_; }
  std::vector<nn::MlpParams>& encoders() { return encoders_; }
  /// Embedding table of categorical feature i, (cardinality + 1) x 2l.
  const std::vector<nn::Matrix>& embeddings() const { return embeddings_; }
  std::vector<nn::Matrix>& embeddings() { return embeddings_; }

  /// Trainable tensors in a fixed order, and matching gradient tensors.
  std::vector<std::span<float>> parameters();
  static std::vector<std::span<float>> gradients(SefaGrads& grads);
  SefaGrads zero_grads() const;
  SefaNetT<double> to_double() const;
  /// Marks all parameters changed so cached forward passes become stale.
  void bump_revision();

  /// Named flat arrays holding every parameter, running statistic and copula table.
  std::vector<std::pair<std::string, std::vector<float>>> export_arrays() const;

  void save(const std::string& path) const;
  static SefaModel load(const std::string& path);

  std::vector<std::string> class_names;

 private:
  friend LossBreakdown loss_and_grads(SefaModel& model, std::span<const data::MaskedInstance> prepared,
                                      std::span<const int> labels, Rng& rng, SefaGrads* grads);

  nn::Matrix encoder_input(std::size_t feature, std::span<const data::MaskedInstance> prepared) const;
  nn::Matrix embedding_lookup(std::size_t feature, std::span<const data::MaskedInstance> prepared) const;
  void finish_latent(const nn::Matrix& raw_out, std::size_t feature, LatentBatch& latent) const;
  template <typename Fn>
  void visit_arrays(Fn&& fn);

  data::FeatureSchema schema_;
  std::size_t num_classes_ = 0;
  data::CopulaTransform copula_;
  SefaConfig config_;
  std::vector<nn::MlpParams> encoders_;
  std::vector<nn::Matrix> embeddings_;
  nn::MlpParams predictor_;
};

/// KL(N(mu, diag sigma^2) || N(0, I)) in nats; the deterministic encoder keeps only sum mu^2 / 2.
double gaussian_kl(std::span<const float> mu, std::span<const float> sigma, bool deterministic);

/// Subsamples each instance's mask, encodes in train mode, draws train_samples latents
/// and returns the batch-mean loss. Updates batch-norm running statistics. `grads` may be null.
LossBreakdown loss_and_grads(SefaModel& model, std::span<const data::MaskedInstance> prepared,
                             std::span<const int> labels, Rng& rng, SefaGrads* grads);
/// Same loss in double precision; consumes the same random draws as the float version.
LossBreakdown loss_and_grads(SefaNetT<double>& net, std::span<const data::MaskedInstance> prepared,
                             std::span<const int> labels, Rng& rng, SefaGradsT<double>* grads);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_nll = 0.0;
  double val_kl = 0.0;
  double val_metric = 0.0;
  double learning_rate = 0.0;
  bool improved = false;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_metric = 0.0;
};

/// Validation score of a candidate model; larger is better.
using Validator = std::function<double(const SefaModel&)>;
using EpochCallback = std::function<void(const EpochRecord&)>;

/// Mean NLL and KL on validation instances with subsampled masks, fixed seed.
LossBreakdown validation_loss(const SefaModel& model, std::span<const data::MaskedInstance> prepared,
                              std::span<const int> labels, std::size_t samples, std::uint64_t seed);

/// Adam training with validation model selection; leaves the best snapshot in `model`.
TrainHistory train(SefaModel& model, const data::Dataset& dataset, Rng& rng, const Validator& validator,
                   const EpochCallback& on_epoch = {});

double softplus(double x);

}  // namespace sefa::model
