#include "sefa/nn_core.hpp"

#include "sefa/errors.hpp"

#include <cmath>
#include <string>

namespace sefa::nn {

template <typename Scalar>
Eigen::Index MlpParamsT<Scalar>::input_width() const {
  return layers.empty() ? 0 : layers.front().in_width();
}

template <typename Scalar>
Eigen::Index MlpParamsT<Scalar>::output_width() const {
  return layers.empty() ? 0 : layers.back().out_width();
}

template <typename Scalar>
void MlpParamsT<Scalar>::validate() const {
  if (layers.empty()) throw ConfigError("mlp: no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& layer = layers[k];
    const std::string where = "mlp layer " + std::to_string(k) + ": ";
    if (layer.bias.size() != layer.out_width()) throw ConfigError(where + "bias width mismatch");
    if (k > 0 && layers[k - 1].out_width() != layer.in_width()) {
      throw ConfigError(where + "input width does not match previous layer");
    }
    if (layer.batch_norm) {
      const auto w = layer.out_width();
      if (layer.bn_scale.size() != w || layer.bn_shift.size() != w || layer.running_mean.size() != w ||
          layer.running_var.size() != w) {
        throw ConfigError(where + "batch-norm state width mismatch");
      }
      if ((layer.running_var.array() <= Scalar(0)).any()) {
        throw ConfigError(where + "running variance must be positive");
      }
    }
  }
}

template <typename Scalar>
MlpParamsT<Scalar> make_mlp(const MlpShape& shape, Rng& rng) {
  if (shape.input <= 0 || shape.output <= 0) throw ConfigError("mlp: widths must be positive");
  MlpParamsT<Scalar> params;
  Eigen::Index in = shape.input;
  for (auto w : shape.hidden) {
    if (w <= 0) throw ConfigError("mlp: hidden widths must be positive");
  }
  auto add_layer = [&](Eigen::Index out, bool hidden) {
    DenseLayerT<Scalar> layer;
    layer.weight.resize(out, in);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(in));
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = static_cast<Scalar>(std_dev * rng.normal());
    }
    layer.bias = VectorT<Scalar>::Zero(out);
    layer.relu = hidden;
    layer.batch_norm = hidden && shape.batch_norm;
    if (layer.batch_norm) {
      layer.bn_scale = VectorT<Scalar>::Ones(out);
      layer.bn_shift = VectorT<Scalar>::Zero(out);
      layer.running_mean = VectorT<Scalar>::Zero(out);
      layer.running_var = VectorT<Scalar>::Ones(out);
    }
    params.layers.push_back(std::move(layer));
    in = out;
  };
  for (auto w : shape.hidden) add_layer(w, true);
  add_layer(shape.output, false);
  return params;
}

namespace {

template <typename Scalar>
void check_input(const MlpParamsT<Scalar>& params, const MatrixT<Scalar>& batch) {
  if (params.layers.empty()) throw ConfigError("mlp: no layers");
  if (batch.rows() < 1) throw ConfigError("mlp_forward: empty batch");
  if (batch.cols() != params.input_width()) {
    throw ConfigError("mlp_forward: batch width " + std::to_string(batch.cols()) +
                      " does not match input width " + std::to_string(params.input_width()));
  }
}

template <typename Scalar>
MatrixT<Scalar> forward_impl(MlpParamsT<Scalar>& params, const MatrixT<Scalar>& batch, Mode mode,
                             MlpCacheT<Scalar>* cache, bool update_running) {
  check_input(params, batch);
  if (cache) {
    cache->layers.assign(params.layers.size(), {});
    cache->owner = &params;
    cache->revision = params.revision;
    cache->mode = mode;
  }
  MatrixT<Scalar> x = batch;
  const auto rows = static_cast<Scalar>(batch.rows());
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    auto& layer = params.layers[k];
    MatrixT<Scalar> y;
    y.noalias() = x * layer.weight.transpose();
    y.rowwise() += layer.bias.transpose();
    if (cache) {
      cache->layers[k].input = std::move(x);
      if (layer.relu) cache->layers[k].linear = y;
    }
    if (layer.relu) y = y.cwiseMax(Scalar(0));
    if (layer.batch_norm) {
      const Eigen::Index n = y.rows();
      VectorT<Scalar> mean;
      VectorT<Scalar> inv_std;
      if (mode == Mode::train) {
        RowVectorT<Scalar> acc = RowVectorT<Scalar>::Zero(y.cols());
        for (Eigen::Index r = 0; r < n; ++r) acc += y.row(r);
        mean = (acc / rows).transpose();
        acc.setZero();
        for (Eigen::Index r = 0; r < n; ++r) acc.array() += (y.row(r) - mean.transpose()).array().square();
        VectorT<Scalar> var = (acc / rows).transpose();
        inv_std = (var.array() + Scalar(kBatchNormEps)).rsqrt().matrix();
        if (update_running) {
          const Scalar m = Scalar(kBatchNormMomentum);
          const Scalar unbias = rows > 1 ? rows / (rows - 1) : Scalar(1);
          layer.running_mean = (Scalar(1) - m) * layer.running_mean + m * mean;
          layer.running_var = (Scalar(1) - m) * layer.running_var + m * unbias * var;
        }
      } else {
        inv_std = (layer.running_var.array() + Scalar(kBatchNormEps)).rsqrt().matrix();
        mean = layer.running_mean;
      }
      const RowVectorT<Scalar> mean_row = mean.transpose();
      const RowVectorT<Scalar> inv_row = inv_std.transpose();
      if (cache) {
        auto& normalized = cache->layers[k].normalized;
        normalized.resize(n, y.cols());
        for (Eigen::Index r = 0; r < n; ++r) {
          normalized.row(r) = (y.row(r) - mean_row).cwiseProduct(inv_row);
          y.row(r) = normalized.row(r).cwiseProduct(layer.bn_scale.transpose()) + layer.bn_shift.transpose();
        }
        cache->layers[k].inv_std = inv_std;
      } else {
        const RowVectorT<Scalar> scale = inv_row.cwiseProduct(layer.bn_scale.transpose());
        const RowVectorT<Scalar> shift = layer.bn_shift.transpose() - mean_row.cwiseProduct(scale);
        for (Eigen::Index r = 0; r < n; ++r) y.row(r) = y.row(r).cwiseProduct(scale) + shift;
      }
    }
    x = std::move(y);
  }
  return x;
}

}  // namespace

template <typename Scalar>
MatrixT<Scalar> mlp_forward(MlpParamsT<Scalar>& params, const MatrixT<Scalar>& batch, Mode mode,
                            MlpCacheT<Scalar>* cache) {
  return forward_impl(params, batch, mode, cache, mode == Mode::train);
}

template <typename Scalar>
MatrixT<Scalar> mlp_forward_eval(const MlpParamsT<Scalar>& params, const MatrixT<Scalar>& batch,
                                 MlpCacheT<Scalar>* cache) {
  // Eval mode never writes to params.
  return forward_impl(const_cast<MlpParamsT<Scalar>&>(params), batch, Mode::eval, cache, false);
}

template <typename Scalar>
MlpGradsT<Scalar> zero_grads_like(const MlpParamsT<Scalar>& params) {
  MlpGradsT<Scalar> grads;
  grads.layers.resize(params.layers.size());
  for (std::size_t k = 0; k < params.layers.size(); ++k) {
    const auto& layer = params.layers[k];
    auto& g = grads.layers[k];
    g.weight = MatrixT<Scalar>::Zero(layer.weight.rows(), layer.weight.cols());
    g.bias = VectorT<Scalar>::Zero(layer.bias.size());
    if (layer.batch_norm) {
      g.bn_scale = VectorT<Scalar>::Zero(layer.bn_scale.size());
      g.bn_shift = VectorT<Scalar>::Zero(layer.bn_shift.size());
    }
  }
  return grads;
}

template <typename Scalar>
void mlp_backward(const MlpParamsT<Scalar>& params, const MlpCacheT<Scalar>& cache,
                  const MatrixT<Scalar>& output_grad, MlpGradsT<Scalar>* param_grads,
                  MatrixT<Scalar>* input_grad) {
  if (cache.owner != &params || cache.revision != params.revision ||
      cache.layers.size() != params.layers.size()) {
    throw UsageError("mlp_backward: cache was not produced by a forward pass on these parameters");
  }
  const auto rows = cache.layers.front().input.rows();
  if (output_grad.rows() != rows || output_grad.cols() != params.output_width()) {
    throw UsageError("mlp_backward: output gradient shape does not match cached forward pass");
  }
  if (param_grads) *param_grads = zero_grads_like(params);

  MatrixT<Scalar> dy = output_grad;
  const auto n = static_cast<Scalar>(rows);
  for (std::size_t k = params.layers.size(); k-- > 0;) {
    const auto& layer = params.layers[k];
    const auto& lc = cache.layers[k];
    if (layer.batch_norm) {
      const Eigen::Index m = dy.rows();
      RowVectorT<Scalar> sum_d = RowVectorT<Scalar>::Zero(dy.cols());
      RowVectorT<Scalar> sum_dx = RowVectorT<Scalar>::Zero(dy.cols());
      for (Eigen::Index r = 0; r < m; ++r) {
        sum_d += dy.row(r);
        sum_dx += dy.row(r).cwiseProduct(lc.normalized.row(r));
      }
      if (param_grads) {
        auto& g = param_grads->layers[k];
        g.bn_scale = sum_dx.transpose();
        g.bn_shift = sum_d.transpose();
      }
      // Gradients with respect to x_hat are dy * bn_scale.
      const RowVectorT<Scalar> scale = layer.bn_scale.transpose();
      if (cache.mode == Mode::train) {
        const RowVectorT<Scalar> f = (lc.inv_std.transpose().array() / n).matrix().cwiseProduct(scale);
        const RowVectorT<Scalar> c0 = sum_d;
        const RowVectorT<Scalar> c1 = sum_dx;
        for (Eigen::Index r = 0; r < m; ++r) {
          dy.row(r) = (n * dy.row(r) - c0 - lc.normalized.row(r).cwiseProduct(c1)).cwiseProduct(f);
        }
      } else {
        const RowVectorT<Scalar> f = lc.inv_std.transpose().cwiseProduct(scale);
        for (Eigen::Index r = 0; r < m; ++r) dy.row(r) = dy.row(r).cwiseProduct(f);
      }
    }
    if (layer.relu) {
      Scalar* d = dy.data();
      const Scalar* l = lc.linear.data();
      for (Eigen::Index i = 0; i < dy.size(); ++i) d[i] = l[i] > Scalar(0) ? d[i] : Scalar(0);
    }
    if (param_grads) {
      auto& g = param_grads->layers[k];
      g.weight.noalias() = dy.transpose() * lc.input;
      g.bias = dy.colwise().sum().transpose();
    }
    if (k > 0 || input_grad) {
      MatrixT<Scalar> dx;
      dx.noalias() = dy * layer.weight;
      dy = std::move(dx);
    }
  }
  if (input_grad) *input_grad = std::move(dy);
}

template <typename Scalar>
void append_parameters(MlpParamsT<Scalar>& params, std::vector<std::span<Scalar>>& out) {
  for (auto& layer : params.layers) {
    out.emplace_back(layer.weight.data(), static_cast<std::size_t>(layer.weight.size()));
    out.emplace_back(layer.bias.data(), static_cast<std::size_t>(layer.bias.size()));
    if (layer.batch_norm) {
      out.emplace_back(layer.bn_scale.data(), static_cast<std::size_t>(layer.bn_scale.size()));
      out.emplace_back(layer.bn_shift.data(), static_cast<std::size_t>(layer.bn_shift.size()));
    }
  }
}

template <typename Scalar>
void append_gradients(MlpGradsT<Scalar>& grads, std::vector<std::span<Scalar>>& out) {
  for (auto& g : grads.layers) {
    out.emplace_back(g.weight.data(), static_cast<std::size_t>(g.weight.size()));
    out.emplace_back(g.bias.data(), static_cast<std::size_t>(g.bias.size()));
    if (g.bn_scale.size() > 0) {
      out.emplace_back(g.bn_scale.data(), static_cast<std::size_t>(g.bn_scale.size()));
      out.emplace_back(g.bn_shift.data(), static_cast<std::size_t>(g.bn_shift.size()));
    }
  }
}

AdamState make_adam(std::span<const std::span<float>> params, double learning_rate) {
  AdamState state;
  state.learning_rate = learning_rate;
  for (const auto& p : params) {
    state.first_moment.emplace_back(p.size(), 0.0f);
    state.second_moment.emplace_back(p.size(), 0.0f);
  }
  return state;
}

void adam_step(AdamState& state, std::span<const std::span<float>> params,
               std::span<const std::span<float>> grads) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    throw ConfigError("adam_step: parameter/gradient/state tensor counts differ");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != grads[k].size() || params[k].size() != state.first_moment[k].size()) {
      throw ConfigError("adam_step: tensor " + std::to_string(k) + " shape mismatch");
    }
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const float b1 = static_cast<float>(state.beta1);
  const float b2 = static_cast<float>(state.beta2);
  const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(state.beta1, t)));
  const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(state.beta2, t)));
  const float lr = static_cast<float>(state.learning_rate);
  const float eps = static_cast<float>(state.eps);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto n = static_cast<Eigen::Index>(params[k].size());
    Eigen::Map<Eigen::ArrayXf> p(params[k].data(), n);
    Eigen::Map<const Eigen::ArrayXf> g(grads[k].data(), n);
    Eigen::Map<Eigen::ArrayXf> m(state.first_moment[k].data(), n);
    Eigen::Map<Eigen::ArrayXf> v(state.second_moment[k].data(), n);
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.square();
    p -= lr * (m * c1) / ((v * c2).sqrt() + eps);
  }
}

std::vector<double> gaussian_sample(std::span<const double> mu, std::span<const double> sigma, Rng& rng) {
  if (mu.size() != sigma.size()) throw ConfigError("gaussian_sample: mu/sigma length mismatch");
  for (double s : sigma) {
    if (!(s > 0.0)) throw DomainError("gaussian_sample: sigma must be positive");
  }
  std::vector<double> out(mu.size());
  for (std::size_t k = 0; k < mu.size(); ++k) out[k] = mu[k] + sigma[k] * rng.normal();
  return out;
}

double kl_standard_normal(std::span<const double> mu, std::span<const double> sigma) {
  if (mu.size() != sigma.size()) throw ConfigError("kl_standard_normal: mu/sigma length mismatch");
  double total = 0.0;
  for (std::size_t k = 0; k < mu.size(); ++k) {
    if (!(sigma[k] > 0.0)) throw DomainError("kl_standard_normal: sigma must be positive");
    total += mu[k] * mu[k] + sigma[k] * sigma[k] - 1.0 - 2.0 * std::log(sigma[k]);
  }
  return 0.5 * total;
}

template <typename Scalar>
MatrixT<Scalar> softmax_rows(const MatrixT<Scalar>& logits) {
  MatrixT<Scalar> out = logits;
  const VectorT<Scalar> row_max = out.rowwise().maxCoeff();
  out.colwise() -= row_max;
  out = out.array().exp().matrix();
  const VectorT<Scalar> row_sum = out.rowwise().sum();
  out.array().colwise() /= row_sum.array();
  return out;
}

template <typename Scalar>
MatrixT<Scalar> softmax_probability_adjoint(const MatrixT<Scalar>& probs, Eigen::Index target) {
  // d p_t / d logit_k = p_t (delta_tk - p_k)
  MatrixT<Scalar> out = -probs;
  out.col(target).array() += Scalar(1);
  out.array().colwise() *= probs.col(target).array();
  return out;
}

#define SEFA_INSTANTIATE(S)                                                                          \
  template struct MlpParamsT<S>;                                                                     \
  template MlpParamsT<S> make_mlp<S>(const MlpShape&, Rng&);                                         \
  template MatrixT<S> mlp_forward<S>(MlpParamsT<S>&, const MatrixT<S>&, Mode, MlpCacheT<S>*);        \
  template MatrixT<S> mlp_forward_eval<S>(const MlpParamsT<S>&, const MatrixT<S>&, MlpCacheT<S>*);   \
  template void mlp_backward<S>(const MlpParamsT<S>&, const MlpCacheT<S>&, const MatrixT<S>&,        \
                                MlpGradsT<S>*, MatrixT<S>*);                                         \
  template MlpGradsT<S> zero_grads_like<S>(const MlpParamsT<S>&);                                    \
  template void append_parameters<S>(MlpParamsT<S>&, std::vector<std::span<S>>&);                    \
  template void append_gradients<S>(MlpGradsT<S>&, std::vector<std::span<S>>&);                      \
  template MatrixT<S> softmax_rows<S>(const MatrixT<S>&);                                            \
  template MatrixT<S> softmax_probability_adjoint<S>(const MatrixT<S>&, Eigen::Index);

SEFA_INSTANTIATE(float)
SEFA_INSTANTIATE(double)

#undef SEFA_INSTANTIATE

}  // namespace sefa::nn
