#pragma once

#include "sefa/rng.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <vector>

namespace sefa::nn {

template <typename Scalar>
using MatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using RowVectorT = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Matrix = MatrixT<float>;
using Vector = VectorT<float>;

enum class Mode { train, eval };

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

/// Linear map, optionally followed by ReLU and then batch normalization.
template <typename Scalar>
struct DenseLayerT {
  MatrixT<Scalar> weight;  // out x in
  VectorT<Scalar> bias;    // out
  bool relu = false;
  bool batch_norm = false;
  VectorT<Scalar> bn_scale;
  VectorT<Scalar> bn_shift;
  VectorT<Scalar> running_mean;
  VectorT<Scalar> running_var;

  Eigen::Index in_width() const { return weight.cols(); }
  Eigen::Index out_width() const { return weight.rows(); }
};

template <typename Scalar>
struct MlpParamsT {
  std::vector<DenseLayerT<Scalar>> layers;
  /// Bumped on every parameter update; caches from an older revision are stale.
  std::uint64_t revision = 0;

  Eigen::Index input_width() const;
  Eigen::Index output_width() const;
  /// Throws ConfigError if shapes do not chain or running_var is not positive.
  void validate() const;
};

template <typename Scalar>
struct LayerCacheT {
  MatrixT<Scalar> input;
  MatrixT<Scalar> linear;      // W x + b
  MatrixT<Scalar> normalized;  // x_hat of batch norm
  VectorT<Scalar> inv_std;
};

template <typename Scalar>
struct MlpCacheT {
  std::vector<LayerCacheT<Scalar>> layers;
  const MlpParamsT<Scalar>* owner = nullptr;
  std::uint64_t revision = 0;
  Mode mode = Mode::eval;
};

template <typename Scalar>
struct LayerGradsT {
  MatrixT<Scalar> weight;
  VectorT<Scalar> bias;
  VectorT<Scalar> bn_scale;
  VectorT<Scalar> bn_shift;
};

template <typename Scalar>
struct MlpGradsT {
  std::vector<LayerGradsT<Scalar>> layers;
};

using DenseLayer = DenseLayerT<float>;
using MlpParams = MlpParamsT<float>;
using MlpCache = MlpCacheT<float>;
using MlpGrads = MlpGradsT<float>;

struct MlpShape {
  Eigen::Index input = 0;
  std::vector<Eigen::Index> hidden;
  Eigen::Index output = 0;
  bool batch_norm = true;
};

/// He initialization: weights N(0, 2/fan_in), biases 0, BN identity.
template <typename Scalar>
MlpParamsT<Scalar> make_mlp(const MlpShape& shape, Rng& rng);

/// Forward pass. Train mode normalizes with batch statistics and updates the
/// running statistics; eval mode uses running statistics and leaves params
/// untouched. `cache`, when given, receives what backward needs.
template <typename Scalar>
MatrixT<Scalar> mlp_forward(MlpParamsT<Scalar>& params, const MatrixT<Scalar>& batch, Mode mode,
                            MlpCacheT<Scalar>* cache = nullptr);

template <typename Scalar>
MatrixT<Scalar> mlp_forward_eval(const MlpParamsT<Scalar>& params, const MatrixT<Scalar>& batch,
                                 MlpCacheT<Scalar>* cache = nullptr);

/// Backpropagates `output_grad`. Either output may be null to skip it.
template <typename Scalar>
void mlp_backward(const MlpParamsT<Scalar>& params, const MlpCacheT<Scalar>& cache,
                  const MatrixT<Scalar>& output_grad, MlpGradsT<Scalar>* param_grads,
                  MatrixT<Scalar>* input_grad);

template <typename Scalar>
MlpGradsT<Scalar> zero_grads_like(const MlpParamsT<Scalar>& params);

/// Trainable tensors in a fixed order (weight, bias, bn_scale, bn_shift per layer).
template <typename Scalar>
void append_parameters(MlpParamsT<Scalar>& params, std::vector<std::span<Scalar>>& out);
template <typename Scalar>
void append_gradients(MlpGradsT<Scalar>& grads, std::vector<std::span<Scalar>>& out);

struct AdamState {
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

AdamState make_adam(std::span<const std::span<float>> params, double learning_rate);

/// One bias-corrected Adam update of `params` in place.
void adam_step(AdamState& state, std::span<const std::span<float>> params,
               std::span<const std::span<float>> grads);

/// mu + sigma * eps, eps ~ N(0, I) drawn from rng.
std::vector<double> gaussian_sample(std::span<const double> mu, std::span<const double> sigma,
                                    Rng& rng);

/// KL(N(mu, diag sigma^2) || N(0, I)).
double kl_standard_normal(std::span<const double> mu, std::span<const double> sigma);

/// Row-wise softmax.
template <typename Scalar>
MatrixT<Scalar> softmax_rows(const MatrixT<Scalar>& logits);

/// Gradient of probs(:, target) with respect to the logits, row by row.
template <typename Scalar>
MatrixT<Scalar> softmax_probability_adjoint(const MatrixT<Scalar>& probs, Eigen::Index target);

}  // namespace sefa::nn
