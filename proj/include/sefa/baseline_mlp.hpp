#pragma once

#include "sefa/acquisition.hpp"
#include "sefa/datasets.hpp"
#include "sefa/nn_core.hpp"
#include "sefa/rng.hpp"

#include "json.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace sefa::baseline {

/// Plain MLP classifier on [x * m, m] (one-hot with a missing slot for categorical
/// features), trained with the same random feature subsampling as SEFA.
struct MlpConfig {
  std::size_t width = 250;
  std::size_t depth = 3;
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 120;
  std::size_t patience = 10;
  double lr_decay = 0.2;
  std::size_t val_instances = 1000;

  void validate() const;
};

nlohmann::json to_json(const MlpConfig& config);
MlpConfig mlp_config_from_json(const nlohmann::json& j);

class MlpClassifier : public acq::Predictor {
 public:
  MlpClassifier() = default;
  static MlpClassifier create(const data::FeatureSchema& schema, std::size_t num_classes,
                              data::CopulaTransform copula, const MlpConfig& config, Rng& rng);

  const data::FeatureSchema& schema() const override { return schema_; }
  std::size_t num_classes() const override { return num_classes_; }
  data::MaskedInstance prepare(const data::MaskedInstance& raw) const override;
  nn::MatrixT<double> predict(std::span<const data::MaskedInstance> prepared, std::span<Rng> rngs) const override;

  const MlpConfig& config() const { return config_; }
  std::size_t input_width() const;
  nn::Matrix features(std::span<const data::MaskedInstance> prepared) const;
  nn::MlpParams& params() { return params_; }
  const nn::MlpParams& params() const { return params_; }

 private:
  data::FeatureSchema schema_;
  std::size_t num_classes_ = 0;
  data::CopulaTransform copula_;
  MlpConfig config_;
  nn::MlpParams params_;
};

/// Cross-entropy on subsampled masks; updates batch-norm running statistics.
double mlp_loss_and_grads(MlpClassifier& model, std::span<const data::MaskedInstance> prepared,
                          std::span<const int> labels, Rng& rng, nn::MlpGrads* grads);

/// Mean NLL on validation instances with subsampled masks drawn from a fixed seed.
double mlp_validation_nll(const MlpClassifier& model, std::span<const data::MaskedInstance> prepared,
                          std::span<const int> labels, std::uint64_t seed);

struct MlpEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_nll = 0.0;
  double learning_rate = 0.0;
};

/// Adam with the same decay/snapshot protocol as SEFA, selecting on validation NLL.
std::vector<MlpEpoch> train_mlp(MlpClassifier& model, const data::Dataset& dataset, Rng& rng,
                                const std::function<void(const MlpEpoch&)>& on_epoch = {});

}  // namespace sefa::baseline
