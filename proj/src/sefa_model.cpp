#include "sefa/sefa_model.hpp"

#include "sefa/errors.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

namespace sefa::model {

using nlohmann::json;

double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

namespace {

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
nn::MatrixT<Scalar> encoder_input_of(std::size_t feature, std::span<const data::MaskedInstance> prepared) {
  nn::MatrixT<Scalar> input(static_cast<Eigen::Index>(prepared.size()), 2);
  for (std::size_t b = 0; b < prepared.size(); ++b) {
    const bool observed = prepared[b].mask[feature] != 0;
    input(static_cast<Eigen::Index>(b), 0) = observed ? static_cast<Scalar>(prepared[b].values[feature]) : Scalar(0);
    input(static_cast<Eigen::Index>(b), 1) = observed ? Scalar(1) : Scalar(0);
  }
  return input;
}

template <typename Scalar>
nn::MatrixT<Scalar> embedding_rows(const nn::MatrixT<Scalar>& table, std::size_t missing, std::size_t feature,
                                   std::span<const data::MaskedInstance> prepared) {
  nn::MatrixT<Scalar> out(static_cast<Eigen::Index>(prepared.size()), table.cols());
  for (std::size_t b = 0; b < prepared.size(); ++b) {
    const auto row = prepared[b].mask[feature] ? static_cast<std::size_t>(prepared[b].values[feature]) : missing;
    out.row(static_cast<Eigen::Index>(b)) = table.row(static_cast<Eigen::Index>(row));
  }
  return out;
}

/// Writes mu and sigma = softplus(raw) + floor for one feature group.
template <typename Scalar>
void write_latent(const SefaConfig& config, const nn::MatrixT<Scalar>& raw_out, Eigen::Index offset,
                  nn::MatrixT<Scalar>& mu, nn::MatrixT<Scalar>& sigma) {
  const auto l = static_cast<Eigen::Index>(config.latent_dim);
  mu.middleCols(offset, l) = raw_out.leftCols(l);
  if (config.deterministic_encoder) {
    sigma.middleCols(offset, l).setConstant(static_cast<Scalar>(kDeterministicSigma));
  } else {
    sigma.middleCols(offset, l) = raw_out.rightCols(l).unaryExpr(
        [](Scalar r) { return static_cast<Scalar>(softplus(r)) + static_cast<Scalar>(kSigmaFloor); });
  }
}

template <typename Scalar>
double kl_sum(const Scalar* mu, const Scalar* sigma, std::size_t n, bool deterministic) {
  double kl = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double m = mu[k];
    if (deterministic) {
      kl += 0.5 * m * m;
    } else {
      const double sd = sigma[k];
      kl += 0.5 * (m * m + sd * sd - 1.0 - 2.0 * std::log(sd));
    }
  }
  return kl;
}

template <typename Scalar>
std::vector<std::span<Scalar>> collect_parameters(const data::FeatureSchema& schema,
                                                  std::vector<nn::MlpParamsT<Scalar>>& encoders,
                                                  std::vector<nn::MatrixT<Scalar>>& embeddings,
                                                  nn::MlpParamsT<Scalar>& predictor) {
  std::vector<std::span<Scalar>> out;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema.is_categorical(i)) {
      out.emplace_back(embeddings[i].data(), static_cast<std::size_t>(embeddings[i].size()));
    } else {
      nn::append_parameters(encoders[i], out);
    }
  }
  nn::append_parameters(predictor, out);
  return out;
}

template <typename Scalar>
std::vector<std::span<Scalar>> collect_gradients(SefaGradsT<Scalar>& grads) {
  std::vector<std::span<Scalar>> out;
  for (std::size_t i = 0; i < grads.encoders.size(); ++i) {
    if (grads.embeddings[i].size() > 0) {
      out.emplace_back(grads.embeddings[i].data(), static_cast<std::size_t>(grads.embeddings[i].size()));
    } else {
      nn::append_gradients(grads.encoders[i], out);
    }
  }
  nn::append_gradients(grads.predictor, out);
  return out;
}

template <typename Scalar>
SefaGradsT<Scalar> zero_grads_of(const data::FeatureSchema& schema,
                                 const std::vector<nn::MlpParamsT<Scalar>>& encoders,
                                 const std::vector<nn::MatrixT<Scalar>>& embeddings,
                                 const nn::MlpParamsT<Scalar>& predictor) {
  SefaGradsT<Scalar> g;
  g.encoders.resize(schema.size());
  g.embeddings.resize(schema.size());
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema.is_categorical(i)) {
      g.embeddings[i] = nn::MatrixT<Scalar>::Zero(embeddings[i].rows(), embeddings[i].cols());
    } else {
      g.encoders[i] = nn::zero_grads_like(encoders[i]);
    }
  }
  g.predictor = nn::zero_grads_like(predictor);
  return g;
}

/// Network pieces the loss reads and updates, in one precision.
template <typename Scalar>
struct LossParts {
  const data::FeatureSchema& schema;
  std::size_t num_classes;
  const SefaConfig& config;
  std::vector<nn::MlpParamsT<Scalar>>& encoders;
  std::vector<nn::MatrixT<Scalar>>& embeddings;
  nn::MlpParamsT<Scalar>& predictor;
};

template <typename Scalar>
LossBreakdown loss_impl(LossParts<Scalar> parts, std::span<const data::MaskedInstance> prepared,
                        std::span<const int> labels, Rng& rng, SefaGradsT<Scalar>* grads);

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("sefa config: " + what);
}

}  // namespace

void SefaConfig::validate() const {
  require(latent_dim >= 1, "latent_dim must be >= 1");
  require(encoder_width >= 1, "encoder_width must be >= 1");
  require(predictor_width >= 1, "predictor_width must be >= 1");
  require(std::isfinite(beta) && beta >= 0.0, "beta must be >= 0");
  require(train_samples >= 1 && predict_samples >= 1 && score_samples >= 1, "sample counts must be >= 1");
  require(std::isfinite(learning_rate) && learning_rate > 0.0, "learning_rate must be > 0");
  require(batch_size >= 2, "batch_size must be >= 2");
  require(patience >= 1, "patience must be >= 1");
  require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must lie in (0, 1]");
  require(val_instances >= 1 && val_predict_samples >= 1 && val_score_samples >= 1,
          "validation fidelity settings must be >= 1");
}

json to_json(const SefaConfig& c) {
  return json{{"latent_dim", c.latent_dim},
              {"encoder_width", c.encoder_width},
              {"encoder_depth", c.encoder_depth},
              {"predictor_width", c.predictor_width},
              {"predictor_depth", c.predictor_depth},
              {"beta", c.beta},
              {"train_samples", c.train_samples},
              {"predict_samples", c.predict_samples},
              {"score_samples", c.score_samples},
              {"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size},
              {"epochs", c.epochs},
              {"patience", c.patience},
              {"lr_decay", c.lr_decay},
              {"deterministic_encoder", c.deterministic_encoder},
              {"val_instances", c.val_instances},
              {"val_predict_samples", c.val_predict_samples},
              {"val_score_samples", c.val_score_samples}};
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_same_v<T, std::size_t>) {
      if (!it->is_number_integer() || it->template get<long long>() < 0) {
        throw ConfigError(std::string("model.") + key + " must be a nonnegative integer");
      }
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!it->is_boolean()) throw ConfigError(std::string("model.") + key + " must be a boolean");
    } else {
      if (!it->is_number()) throw ConfigError(std::string("model.") + key + " must be a number");
    }
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model.") + key + ": " + e.what());
  }
}

}  // namespace

SefaConfig sefa_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  SefaConfig c;
  const json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("model config: unknown key '" + key + "'");
  }
  read_field(j, "latent_dim", c.latent_dim);
  read_field(j, "encoder_width", c.encoder_width);
  read_field(j, "encoder_depth", c.encoder_depth);
  read_field(j, "predictor_width", c.predictor_width);
  read_field(j, "predictor_depth", c.predictor_depth);
  read_field(j, "beta", c.beta);
  read_field(j, "train_samples", c.train_samples);
  read_field(j, "predict_samples", c.predict_samples);
  read_field(j, "score_samples", c.score_samples);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "epochs", c.epochs);
  read_field(j, "patience", c.patience);
  read_field(j, "lr_decay", c.lr_decay);
  read_field(j, "deterministic_encoder", c.deterministic_encoder);
  read_field(j, "val_instances", c.val_instances);
  read_field(j, "val_predict_samples", c.val_predict_samples);
  read_field(j, "val_score_samples", c.val_score_samples);
  c.validate();
  return c;
}

json schema_to_json(const data::FeatureSchema& schema) {
  json out = json::array();
  for (const auto& f : schema.features) {
    json entry{{"name", f.name}, {"kind", f.kind == data::FeatureKind::categorical ? "categorical" : "continuous"}};
    if (f.kind == data::FeatureKind::categorical) {
      entry["cardinality"] = f.cardinality;
      entry["levels"] = f.levels;
    }
    out.push_back(std::move(entry));
  }
  return out;
}

data::FeatureSchema schema_from_json(const json& j) {
  if (!j.is_array()) throw FormatError("schema must be an array");
  data::FeatureSchema schema;
  try {
    for (const auto& entry : j) {
      data::FeatureSpec f;
      f.name = entry.at("name").get<std::string>();
      const auto kind = entry.at("kind").get<std::string>();
      if (kind == "categorical") {
        f.kind = data::FeatureKind::categorical;
        f.cardinality = entry.at("cardinality").get<std::size_t>();
        if (entry.contains("levels")) f.levels = entry.at("levels").get<std::vector<std::string>>();
      } else if (kind != "continuous") {
        throw FormatError("schema: unknown feature kind '" + kind + "'");
      }
      schema.features.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("schema: ") + e.what());
  }
  try {
    schema.validate();
  } catch (const ConfigError& e) {
    throw FormatError(e.what());
  }
  return schema;
}

SefaModel SefaModel::create(const data::FeatureSchema& schema, std::size_t num_classes, data::CopulaTransform copula,
                            const SefaConfig& config, Rng& rng) {
  config.validate();
  schema.validate();
  if (schema.size() == 0) throw ConfigError("sefa model: schema has no features");
  if (num_classes < 2) throw ConfigError("sefa model: need at least two classes");
  if (!copula.fitted()) throw ConfigError("sefa model: copula transform must be fitted");
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (!schema.is_categorical(i) && (i >= copula.tables().size() || copula.tables()[i].empty())) {
      throw ConfigError("sefa model: copula has no table for continuous feature " + std::to_string(i));
    }
  }
  SefaModel m;
  m.schema_ = schema;
  m.num_classes_ = num_classes;
  m.copula_ = std::move(copula);
  m.config_ = config;
  const auto l = static_cast<Eigen::Index>(config.latent_dim);
  m.encoders_.resize(schema.size());
  m.embeddings_.resize(schema.size());
  for (std::size_t i = 0; i < schema.size(); ++i) {
    if (schema.is_categorical(i)) {
      const auto rows = static_cast<Eigen::Index>(schema.features[i].cardinality + 1);
      nn::Matrix table(rows, 2 * l);
      std::vector<float> draws(static_cast<std::size_t>(table.size()));
      rng.fill_normal(draws);
      std::copy(draws.begin(), draws.end(), table.data());
      m.embeddings_[i] = std::move(table);
    } else {
      nn::MlpShape shape;
      shape.input = 2;
      shape.hidden.assign(config.encoder_depth, static_cast<Eigen::Index>(config.encoder_width));
      shape.output = 2 * l;
      m.encoders_[i] = nn::make_mlp<float>(shape, rng);
    }
  }
  nn::MlpShape pred;
  pred.input = static_cast<Eigen::Index>(m.latent_width());
  pred.hidden.assign(config.predictor_depth, static_cast<Eigen::Index>(config.predictor_width));
  pred.output = static_cast<Eigen::Index>(num_classes);
  m.predictor_ = nn::make_mlp<float>(pred, rng);
  return m;
}

void SefaModel::check_instance(const data::MaskedInstance& instance) const {
  const auto d = schema_.size();
  if (instance.values.size() != d || instance.mask.size() != d) {
    throw ConfigError("instance has " + std::to_string(instance.values.size()) + " values, schema expects " +
                      std::to_string(d));
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (instance.mask[i] > 1) throw ConfigError("instance mask bits must be 0 or 1");
    if (!instance.mask[i]) continue;
    const float v = instance.values[i];
    if (!std::isfinite(v)) throw ConfigError("instance value for feature " + std::to_string(i) + " is not finite");
    if (schema_.is_categorical(i)) {
      const auto card = schema_.features[i].cardinality;
      if (v < 0.0f || v != std::floor(v) || static_cast<std::size_t>(v) >= card) {
        throw ConfigError("categorical feature " + std::to_string(i) + " value out of range");
      }
    }
  }
}

data::MaskedInstance SefaModel::prepare(const data::MaskedInstance& raw) const {
  check_instance(raw);
  data::MaskedInstance out = copula_.transform(schema_, raw);
  for (std::size_t i = 0; i < schema_.size(); ++i) {
    if (schema_.is_categorical(i) && !out.mask[i]) out.values[i] = static_cast<float>(schema_.features[i].cardinality);
  }
  return out;
}

nn::Matrix SefaModel::encoder_input(std::size_t feature, std::span<const data::MaskedInstance> prepared) const {
  return encoder_input_of<float>(feature, prepared);
}

nn::Matrix SefaModel::embedding_lookup(std::size_t feature, std::span<const data::MaskedInstance> prepared) const {
  return embedding_rows(embeddings_[feature], schema_.features[feature].cardinality, feature, prepared);
}

void SefaModel::finish_latent(const nn::Matrix& raw_out, std::size_t feature, LatentBatch& latent) const {
  write_latent(config_, raw_out, static_cast<Eigen::Index>(group_offset(feature)), latent.mu, latent.sigma);
}

LatentBatch SefaModel::encode_batch(std::span<const data::MaskedInstance> prepared) const {
  if (prepared.empty()) throw ConfigError("encode: empty batch");
  const auto rows = static_cast<Eigen::Index>(prepared.size());
  LatentBatch latent{nn::Matrix(rows, static_cast<Eigen::Index>(latent_width())),
                     nn::Matrix(rows, static_cast<Eigen::Index>(latent_width()))};
  for (std::size_t i = 0; i < schema_.size(); ++i) {
    if (schema_.is_categorical(i)) {
      finish_latent(embedding_lookup(i, prepared), i, latent);
    } else {
      finish_latent(nn::mlp_forward_eval(encoders_[i], encoder_input(i, prepared)), i, latent);
    }
  }
  return latent;
}

LatentGaussian SefaModel::encode(const data::MaskedInstance& raw) const {
  const data::MaskedInstance prepared = prepare(raw);
  const LatentBatch latent = encode_batch(std::span(&prepared, 1));
  LatentGaussian out;
  out.mu.assign(latent.mu.data(), latent.mu.data() + latent.mu.size());
  out.sigma.assign(latent.sigma.data(), latent.sigma.data() + latent.sigma.size());
  return out;
}

nn::Matrix SefaModel::sample_latent(const LatentBatch& latent, std::size_t samples, std::span<Rng> rngs) const {
  const auto batch = latent.mu.rows();
  if (samples < 1) throw ConfigError("sample_latent: samples must be >= 1");
  if (static_cast<Eigen::Index>(rngs.size()) != batch) throw ConfigError("sample_latent: need one rng per instance");
  const auto s = static_cast<Eigen::Index>(samples);
  const auto width = latent.mu.cols();
  nn::Matrix z(batch * s, width);
  for (Eigen::Index b = 0; b < batch; ++b) {
    auto block = z.middleRows(b * s, s);
    rngs[static_cast<std::size_t>(b)].fill_normal(std::span<float>(block.data(), static_cast<std::size_t>(s * width)));
    block.array().rowwise() *= latent.sigma.row(b).array();
    block.rowwise() += latent.mu.row(b);
  }
  return z;
}

nn::MatrixT<double> SefaModel::predict_batch(std::span<const data::MaskedInstance> prepared, std::size_t samples,
                                             std::span<Rng> rngs) const {
  const LatentBatch latent = encode_batch(prepared);
  const nn::Matrix z = sample_latent(latent, samples, rngs);
  const nn::Matrix probs = nn::softmax_rows<float>(nn::mlp_forward_eval(predictor_, z));
  const auto s = static_cast<Eigen::Index>(samples);
  nn::MatrixT<double> out(static_cast<Eigen::Index>(prepared.size()), probs.cols());
  for (Eigen::Index b = 0; b < out.rows(); ++b) {
    out.row(b) = probs.middleRows(b * s, s).cast<double>().colwise().sum() / static_cast<double>(samples);
  }
  return out;
}

std::vector<double> SefaModel::predict(const data::MaskedInstance& raw, std::size_t samples, Rng& rng) const {
  const data::MaskedInstance prepared = prepare(raw);
  const auto probs = predict_batch(std::span(&prepared, 1), samples, std::span(&rng, 1));
  return {probs.data(), probs.data() + probs.size()};
}

std::vector<std::span<float>> SefaModel::parameters() {
  return collect_parameters(schema_, encoders_, embeddings_, predictor_);
}

std::vector<std::span<float>> SefaModel::gradients(SefaGrads& grads) { return collect_gradients(grads); }

SefaGrads SefaModel::zero_grads() const { return zero_grads_of(schema_, encoders_, embeddings_, predictor_); }

SefaNetT<double> SefaModel::to_double() const {
  const auto cast_mlp = [](const nn::MlpParams& src) {
    nn::MlpParamsT<double> dst;
    for (const auto& layer : src.layers) {
      nn::DenseLayerT<double> out;
      out.weight = layer.weight.cast<double>();
      out.bias = layer.bias.cast<double>();
      out.relu = layer.relu;
      out.batch_norm = layer.batch_norm;
      out.bn_scale = layer.bn_scale.cast<double>();
      out.bn_shift = layer.bn_shift.cast<double>();
      out.running_mean = layer.running_mean.cast<double>();
      out.running_var = layer.running_var.cast<double>();
      dst.layers.push_back(std::move(out));
    }
    return dst;
  };
  SefaNetT<double> net;
  net.schema = schema_;
  net.num_classes = num_classes_;
  net.config = config_;
  for (const auto& e : encoders_) net.encoders.push_back(cast_mlp(e));
  for (const auto& e : embeddings_) net.embeddings.push_back(e.cast<double>());
  net.predictor = cast_mlp(predictor_);
  return net;
}

template <typename Scalar>
std::vector<std::span<Scalar>> SefaNetT<Scalar>::parameters() {
  return collect_parameters(schema, encoders, embeddings, predictor);
}

template <typename Scalar>
std::vector<std::span<Scalar>> SefaNetT<Scalar>::gradients(SefaGradsT<Scalar>& grads) {
  return collect_gradients(grads);
}

template <typename Scalar>
void SefaNetT<Scalar>::bump_revision() {
  for (auto& e : encoders) ++e.revision;
  ++predictor.revision;
}

template struct SefaNetT<double>;

void SefaModel::bump_revision() {
  for (auto& e : encoders_) ++e.revision;
  ++predictor_.revision;
}

double gaussian_kl(std::span<const float> mu, std::span<const float> sigma, bool deterministic) {
  if (mu.size() != sigma.size()) throw ConfigError("gaussian_kl: mu and sigma lengths differ");
  return kl_sum(mu.data(), sigma.data(), mu.size(), deterministic);
}

namespace {

template <typename Scalar>
LossBreakdown loss_impl(LossParts<Scalar> parts, std::span<const data::MaskedInstance> prepared,
                        std::span<const int> labels, Rng& rng, SefaGradsT<Scalar>* grads) {
  using Mat = nn::MatrixT<Scalar>;
  const auto batch = prepared.size();
  if (batch == 0) throw ConfigError("loss_and_grads: empty batch");
  if (labels.size() != batch) throw ConfigError("loss_and_grads: label count differs from batch size");
  const auto& cfg = parts.config;
  const auto& schema = parts.schema;
  const auto d = schema.size();
  const auto l = static_cast<Eigen::Index>(cfg.latent_dim);
  const auto n = static_cast<Eigen::Index>(cfg.train_samples);
  const auto rows = static_cast<Eigen::Index>(batch);
  const auto width = static_cast<Eigen::Index>(cfg.latent_dim * d);
  const auto classes = static_cast<Eigen::Index>(parts.num_classes);
  for (int y : labels) {
    if (y < 0 || y >= classes) throw ConfigError("loss_and_grads: label out of range");
  }

  std::vector<data::MaskedInstance> sub;
  sub.reserve(batch);
  for (const auto& inst : prepared) {
    const auto mask = data::subsample_mask(inst.mask, rng);
    sub.push_back(data::restrict_to(schema, inst, mask));
  }

  Mat mu(rows, width);
  Mat sigma(rows, width);
  std::vector<Mat> raw(d);
  std::vector<nn::MlpCacheT<Scalar>> caches(d);
  for (std::size_t i = 0; i < d; ++i) {
    if (schema.is_categorical(i)) {
      raw[i] = embedding_rows(parts.embeddings[i], schema.features[i].cardinality, i, sub);
    } else {
      raw[i] = nn::mlp_forward(parts.encoders[i], encoder_input_of<Scalar>(i, sub), nn::Mode::train, &caches[i]);
    }
    write_latent(cfg, raw[i], static_cast<Eigen::Index>(i) * l, mu, sigma);
  }

  nn::Matrix eps_draws(rows * n, width);
  rng.fill_normal(std::span<float>(eps_draws.data(), static_cast<std::size_t>(eps_draws.size())));
  const Mat eps = eps_draws.cast<Scalar>();
  Mat z(rows * n, width);
  for (Eigen::Index b = 0; b < rows; ++b) {
    z.middleRows(b * n, n) = eps.middleRows(b * n, n);
    z.middleRows(b * n, n).array().rowwise() *= sigma.row(b).array();
    z.middleRows(b * n, n).rowwise() += mu.row(b);
  }

  nn::MlpCacheT<Scalar> pcache;
  const Mat logits = nn::mlp_forward(parts.predictor, z, nn::Mode::train, &pcache);
  const Mat probs = nn::softmax_rows<Scalar>(logits);

  LossBreakdown out;
  std::vector<double> coef(batch, 0.0);
  for (Eigen::Index b = 0; b < rows; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    double mean = 0.0;
    for (Eigen::Index s = 0; s < n; ++s) mean += probs(b * n + s, y);
    mean /= static_cast<double>(n);
    out.nll += -std::log(std::max(mean, kProbabilityFloor));
    if (mean > kProbabilityFloor) coef[static_cast<std::size_t>(b)] = -1.0 / (static_cast<double>(batch * n) * mean);
    out.kl += kl_sum(mu.row(b).data(), sigma.row(b).data(), static_cast<std::size_t>(width), cfg.deterministic_encoder);
  }
  out.nll /= static_cast<double>(batch);
  out.kl /= static_cast<double>(batch);
  out.loss = out.nll + cfg.beta * out.kl;
  if (!grads) return out;

  Mat dlogits(rows * n, classes);
  for (Eigen::Index b = 0; b < rows; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    const auto c = static_cast<Scalar>(coef[static_cast<std::size_t>(b)]);
    for (Eigen::Index s = 0; s < n; ++s) {
      const Eigen::Index r = b * n + s;
      const Scalar py = probs(r, y);
      dlogits.row(r) = -c * py * probs.row(r);
      dlogits(r, y) += c * py;
    }
  }
  *grads = zero_grads_of(schema, parts.encoders, parts.embeddings, parts.predictor);
  Mat dz;
  nn::mlp_backward(parts.predictor, pcache, dlogits, &grads->predictor, &dz);

  const auto kl_scale = static_cast<Scalar>(cfg.beta / static_cast<double>(batch));
  Mat dmu(rows, width);
  Mat dsigma(rows, width);
  for (Eigen::Index b = 0; b < rows; ++b) {
    dmu.row(b) = dz.middleRows(b * n, n).colwise().sum();
    dsigma.row(b) = (dz.middleRows(b * n, n).array() * eps.middleRows(b * n, n).array()).colwise().sum();
  }
  dmu += kl_scale * mu;
  if (!cfg.deterministic_encoder) {
    dsigma.array() += kl_scale * (sigma.array() - sigma.array().inverse());
  }

  for (std::size_t i = 0; i < d; ++i) {
    const auto offset = static_cast<Eigen::Index>(i) * l;
    Mat dout(rows, 2 * l);
    dout.leftCols(l) = dmu.middleCols(offset, l);
    if (cfg.deterministic_encoder) {
      dout.rightCols(l).setZero();
    } else {
      dout.rightCols(l) = dsigma.middleCols(offset, l).cwiseProduct(raw[i].rightCols(l).unaryExpr(&sigmoid<Scalar>));
    }
    if (schema.is_categorical(i)) {
      const auto missing = schema.features[i].cardinality;
      for (std::size_t b = 0; b < batch; ++b) {
        const auto row = sub[b].mask[i] ? static_cast<std::size_t>(sub[b].values[i]) : missing;
        grads->embeddings[i].row(static_cast<Eigen::Index>(row)) += dout.row(static_cast<Eigen::Index>(b));
      }
    } else {
      nn::mlp_backward<Scalar>(parts.encoders[i], caches[i], dout, &grads->encoders[i], nullptr);
    }
  }
  return out;
}

}  // namespace

LossBreakdown loss_and_grads(SefaModel& model, std::span<const data::MaskedInstance> prepared,
                             std::span<const int> labels, Rng& rng, SefaGrads* grads) {
  return loss_impl<float>({model.schema_, model.num_classes_, model.config_, model.encoders_, model.embeddings_,
                           model.predictor_},
                          prepared, labels, rng, grads);
}

LossBreakdown loss_and_grads(SefaNetT<double>& net, std::span<const data::MaskedInstance> prepared,
                             std::span<const int> labels, Rng& rng, SefaGradsT<double>* grads) {
  return loss_impl<double>({net.schema, net.num_classes, net.config, net.encoders, net.embeddings, net.predictor},
                           prepared, labels, rng, grads);
}

LossBreakdown validation_loss(const SefaModel& model, std::span<const data::MaskedInstance> prepared,
                              std::span<const int> labels, std::size_t samples, std::uint64_t seed) {
  if (prepared.empty()) throw ConfigError("validation_loss: empty split");
  constexpr std::size_t kChunk = 256;
  LossBreakdown out;
  const bool deterministic = model.config().deterministic_encoder;
  for (std::size_t start = 0; start < prepared.size(); start += kChunk) {
    const auto count = std::min(kChunk, prepared.size() - start);
    std::vector<data::MaskedInstance> sub;
    std::vector<Rng> rngs;
    for (std::size_t k = 0; k < count; ++k) {
      rngs.emplace_back(derive_seed(seed, start + k));
      const auto mask = data::subsample_mask(prepared[start + k].mask, rngs.back());
      sub.push_back(data::restrict_to(model.schema(), prepared[start + k], mask));
    }
    const LatentBatch latent = model.encode_batch(sub);
    const nn::Matrix z = model.sample_latent(latent, samples, rngs);
    const nn::Matrix probs = nn::softmax_rows<float>(nn::mlp_forward_eval(model.predictor(), z));
    const auto s = static_cast<Eigen::Index>(samples);
    for (std::size_t k = 0; k < count; ++k) {
      const auto b = static_cast<Eigen::Index>(k);
      const double p = probs.middleRows(b * s, s).col(labels[start + k]).cast<double>().mean();
      out.nll += -std::log(std::max(p, kProbabilityFloor));
      const auto width = static_cast<std::size_t>(latent.mu.cols());
      out.kl += gaussian_kl(std::span(latent.mu.row(b).data(), width), std::span(latent.sigma.row(b).data(), width),
                            deterministic);
    }
  }
  out.nll /= static_cast<double>(prepared.size());
  out.kl /= static_cast<double>(prepared.size());
  out.loss = out.nll + model.config().beta * out.kl;
  return out;
}

TrainHistory train(SefaModel& model, const data::Dataset& dataset, Rng& rng, const Validator& validator,
                   const EpochCallback& on_epoch) {
  if (dataset.train.empty() || dataset.val.empty()) throw ConfigError("train: train and validation splits must be nonempty");
  const SefaConfig cfg = model.config();
  cfg.validate();
  TrainHistory history;
  if (cfg.epochs == 0) return history;

  std::vector<data::MaskedInstance> train_x;
  train_x.reserve(dataset.train.size());
  for (const auto& inst : dataset.train.instances) train_x.push_back(model.prepare(inst));
  const auto val_count = std::min(cfg.val_instances, dataset.val.size());
  std::vector<data::MaskedInstance> val_x;
  for (std::size_t k = 0; k < val_count; ++k) val_x.push_back(model.prepare(dataset.val.instances[k]));
  const std::span<const int> val_y(dataset.val.labels.data(), val_count);
  const std::uint64_t val_seed = derive_seed(0x5EFA, 1);

  auto params = model.parameters();
  nn::AdamState adam = nn::make_adam(params, cfg.learning_rate);
  SefaModel best = model;
  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;

  std::vector<std::size_t> order(train_x.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<data::MaskedInstance> batch_x;
  std::vector<int> batch_y;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.uniform_index(k)]);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const auto count = std::min(cfg.batch_size, order.size() - start);
      // A single-row batch has no batch statistics.
      if (count < 2 && seen > 0) continue;
      batch_x.clear();
      batch_y.clear();
      for (std::size_t k = start; k < start + count; ++k) {
        batch_x.push_back(train_x[order[k]]);
        batch_y.push_back(dataset.train.labels[order[k]]);
      }
      SefaGrads grads;
      const LossBreakdown lb = loss_and_grads(model, batch_x, batch_y, rng, &grads);
      nn::adam_step(adam, params, SefaModel::gradients(grads));
      model.bump_revision();
      loss_sum += lb.loss * static_cast<double>(count);
      seen += count;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1));
    rec.learning_rate = adam.learning_rate;
    const LossBreakdown vl = validation_loss(model, val_x, val_y, cfg.val_predict_samples, val_seed);
    rec.val_nll = vl.nll;
    rec.val_kl = vl.kl;
    rec.val_metric = validator ? validator(model) : -vl.nll;
    rec.improved = rec.val_metric > best_metric;
    if (rec.improved) {
      best_metric = rec.val_metric;
      history.best_epoch = epoch;
      best = model;
      since_improvement = 0;
    } else if (++since_improvement >= cfg.patience) {
      adam.learning_rate *= cfg.lr_decay;
      since_improvement = 0;
    }
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  history.best_metric = best_metric;
  model = std::move(best);
  model.bump_revision();
  return history;
}

// ---- serialization ----

template <typename Fn>
void SefaModel::visit_arrays(Fn&& fn) {
  auto visit_mlp = [&](const std::string& prefix, nn::MlpParams& mlp) {
    for (std::size_t k = 0; k < mlp.layers.size(); ++k) {
      auto& layer = mlp.layers[k];
      const std::string p = prefix + "." + std::to_string(k) + ".";
      fn(p + "weight", std::span<float>(layer.weight.data(), static_cast<std::size_t>(layer.weight.size())));
      fn(p + "bias", std::span<float>(layer.bias.data(), static_cast<std::size_t>(layer.bias.size())));
      if (layer.batch_norm) {
        fn(p + "bn_scale", std::span<float>(layer.bn_scale.data(), static_cast<std::size_t>(layer.bn_scale.size())));
        fn(p + "bn_shift", std::span<float>(layer.bn_shift.data(), static_cast<std::size_t>(layer.bn_shift.size())));
        fn(p + "running_mean",
           std::span<float>(layer.running_mean.data(), static_cast<std::size_t>(layer.running_mean.size())));
        fn(p + "running_var",
           std::span<float>(layer.running_var.data(), static_cast<std::size_t>(layer.running_var.size())));
      }
    }
  };
  for (std::size_t i = 0; i < schema_.size(); ++i) {
    if (schema_.is_categorical(i)) {
      fn("embedding." + std::to_string(i),
         std::span<float>(embeddings_[i].data(), static_cast<std::size_t>(embeddings_[i].size())));
    } else {
      visit_mlp("encoder." + std::to_string(i), encoders_[i]);
    }
  }
  visit_mlp("predictor", predictor_);
}

std::vector<std::pair<std::string, std::vector<float>>> SefaModel::export_arrays() const {
  std::vector<std::pair<std::string, std::vector<float>>> out;
  const_cast<SefaModel*>(this)->visit_arrays([&](const std::string& name, std::span<float> values) {
    out.emplace_back(name, std::vector<float>(values.begin(), values.end()));
  });
  const auto& tables = copula_.tables();
  for (std::size_t i = 0; i < tables.size(); ++i) {
    if (!tables[i].empty()) out.emplace_back("copula." + std::to_string(i), tables[i]);
  }
  return out;
}

namespace {

constexpr char kMagic[] = "SEFA1\n";
constexpr std::size_t kMagicSize = 6;

void put_u64(std::string& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[k])) << (8 * k);
  return v;
}

void put_floats(std::string& out, std::span<const float> values) {
  for (float f : values) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
  }
}

void get_floats(const char* p, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t bits = 0;
    for (int k = 0; k < 4; ++k) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[4 * i + k])) << (8 * k);
    out[i] = std::bit_cast<float>(bits);
  }
}

}  // namespace

void SefaModel::save(const std::string& path) const {
  const auto arrays = export_arrays();
  json manifest{{"format", "SEFA"},
                {"version", kModelFormatVersion},
                {"schema", schema_to_json(schema_)},
                {"num_classes", num_classes_},
                {"class_names", class_names},
                {"config", to_json(config_)}};
  json listing = json::array();
  for (const auto& [name, values] : arrays) listing.push_back({{"name", name}, {"size", values.size()}});
  manifest["arrays"] = std::move(listing);
  const std::string text = manifest.dump();

  std::string bytes(kMagic, kMagicSize);
  put_u64(bytes, text.size());
  bytes += text;
  for (const auto& [name, values] : arrays) put_floats(bytes, values);
  put_u64(bytes, fnv1a64(bytes));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("save: cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("save: write failed for '" + path + "'");
}

SefaModel SefaModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("load: cannot open '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < kMagicSize || bytes.compare(0, kMagicSize, kMagic, kMagicSize) != 0) {
    if (bytes.size() >= 4 && bytes.compare(0, 4, "SEFA") == 0) throw VersionError("load: unsupported model file version");
    throw FormatError("load: not a model file (bad magic)");
  }
  if (bytes.size() < kMagicSize + 16) throw ChecksumError("load: file truncated");
  const std::uint64_t manifest_size = get_u64(bytes.data() + kMagicSize);
  const std::size_t body = bytes.size() - 8;
  if (manifest_size > body - kMagicSize - 8) throw ChecksumError("load: file truncated");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(kMagicSize + 8, manifest_size));
  } catch (const json::exception&) {
    throw ChecksumError("load: manifest unreadable (corrupt or truncated file)");
  }
  if (!manifest.is_object() || !manifest.contains("version") || !manifest["version"].is_number_integer()) {
    throw FormatError("load: manifest has no version");
  }
  const int version = manifest["version"].get<int>();
  if (version != kModelFormatVersion) {
    throw VersionError("load: model format version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kModelFormatVersion) + ")");
  }
  if (get_u64(bytes.data() + body) != fnv1a64(std::string_view(bytes.data(), body))) {
    throw ChecksumError("load: checksum mismatch");
  }

  try {
    const auto schema = schema_from_json(manifest.at("schema"));
    const auto config = sefa_config_from_json(manifest.at("config"));
    const auto num_classes = manifest.at("num_classes").get<std::size_t>();

    std::map<std::string, std::vector<float>> arrays;
    std::size_t offset = kMagicSize + 8 + manifest_size;
    for (const auto& entry : manifest.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      const auto size = entry.at("size").get<std::size_t>();
      if (size > (body - offset) / 4) throw FormatError("load: array '" + name + "' runs past the end of the file");
      std::vector<float> values(size);
      get_floats(bytes.data() + offset, values);
      offset += 4 * size;
      if (!arrays.emplace(name, std::move(values)).second) throw FormatError("load: duplicate array '" + name + "'");
    }
    if (offset != body) throw FormatError("load: trailing bytes after arrays");

    std::vector<std::vector<float>> tables(schema.size());
    for (std::size_t i = 0; i < schema.size(); ++i) {
      if (schema.is_categorical(i)) continue;
      auto it = arrays.find("copula." + std::to_string(i));
      if (it == arrays.end() || it->second.empty()) throw FormatError("load: missing copula table for feature " + std::to_string(i));
      tables[i] = std::move(it->second);
      arrays.erase(it);
    }
    Rng scratch(0);
    SefaModel model = create(schema, num_classes, data::CopulaTransform::from_tables(std::move(tables)), config, scratch);
    model.class_names = manifest.value("class_names", std::vector<std::string>{});
    std::size_t used = 0;
    model.visit_arrays([&](const std::string& name, std::span<float> dest) {
      auto it = arrays.find(name);
      if (it == arrays.end()) throw FormatError("load: missing array '" + name + "'");
      if (it->second.size() != dest.size()) throw FormatError("load: array '" + name + "' has the wrong size");
      std::copy(it->second.begin(), it->second.end(), dest.begin());
      ++used;
    });
    if (used != arrays.size()) throw FormatError("load: unexpected arrays in model file");
    model.predictor_.validate();
    for (std::size_t i = 0; i < schema.size(); ++i) {
      if (!schema.is_categorical(i)) model.encoders_[i].validate();
    }
    return model;
  } catch (const json::exception& e) {
    throw FormatError(std::string("load: malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("load: ") + e.what());
  }
}

}  // namespace sefa::model
