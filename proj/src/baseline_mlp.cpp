#include "sefa/baseline_mlp.hpp"

#include "sefa/errors.hpp"
#include "sefa/sefa_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sefa::baseline {

using nlohmann::json;

void MlpConfig::validate() const {
  if (width < 1) throw ConfigError("mlp config: width must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("mlp config: learning_rate must be > 0");
  if (batch_size < 2) throw ConfigError("mlp config: batch_size must be >= 2");
  if (patience < 1) throw ConfigError("mlp config: patience must be >= 1");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("mlp config: lr_decay must lie in (0, 1]");
  if (val_instances < 1) throw ConfigError("mlp config: val_instances must be >= 1");
}

json to_json(const MlpConfig& c) {
  return json{{"width", c.width},           {"depth", c.depth},   {"learning_rate", c.learning_rate},
              {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"patience", c.patience},
              {"lr_decay", c.lr_decay},     {"val_instances", c.val_instances}};
}

MlpConfig mlp_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("baseline config must be an object");
  MlpConfig c;
  for (const auto& [key, value] : j.items()) {
    const bool is_real = key == "learning_rate" || key == "lr_decay";
    if (is_real) {
      if (!value.is_number()) throw ConfigError("baseline." + key + " must be a number");
      (key == "learning_rate" ? c.learning_rate : c.lr_decay) = value.get<double>();
      continue;
    }
    std::size_t* slot = key == "width"           ? &c.width
                        : key == "depth"         ? &c.depth
                        : key == "batch_size"    ? &c.batch_size
                        : key == "epochs"        ? &c.epochs
                        : key == "patience"      ? &c.patience
                        : key == "val_instances" ? &c.val_instances
                                                 : nullptr;
    if (!slot) throw ConfigError("baseline config: unknown key '" + key + "'");
    if (!value.is_number_integer() || value.get<long long>() < 0) {
      throw ConfigError("baseline." + key + " must be a nonnegative integer");
    }
    *slot = value.get<std::size_t>();
  }
  c.validate();
  return c;
}

MlpClassifier MlpClassifier::create(const data::FeatureSchema& schema, std::size_t num_classes,
                                    data::CopulaTransform copula, const MlpConfig& config, Rng& rng) {
  config.validate();
  schema.validate();
  if (num_classes < 2) throw ConfigError("mlp classifier: need at least two classes");
  if (!copula.fitted()) throw ConfigError("mlp classifier: copula transform must be fitted");
  MlpClassifier m;
  m.schema_ = schema;
  m.num_classes_ = num_classes;
  m.copula_ = std::move(copula);
  m.config_ = config;
  nn::MlpShape shape;
  shape.input = static_cast<Eigen::Index>(m.input_width());
  shape.hidden.assign(config.depth, static_cast<Eigen::Index>(config.width));
  shape.output = static_cast<Eigen::Index>(num_classes);
  m.params_ = nn::make_mlp<float>(shape, rng);
  return m;
}

std::size_t MlpClassifier::input_width() const {
  std::size_t w = 0;
  for (std::size_t i = 0; i < schema_.size(); ++i) w += schema_.is_categorical(i) ? schema_.features[i].cardinality + 1 : 2;
  return w;
}

data::MaskedInstance MlpClassifier::prepare(const data::MaskedInstance& raw) const {
  if (raw.values.size() != schema_.size() || raw.mask.size() != schema_.size()) {
    throw ConfigError("mlp classifier: instance does not match schema");
  }
  data::MaskedInstance out = copula_.transform(schema_, raw);
  for (std::size_t i = 0; i < schema_.size(); ++i) {
    if (schema_.is_categorical(i) && !out.mask[i]) out.values[i] = static_cast<float>(schema_.features[i].cardinality);
  }
  return out;
}

nn::Matrix MlpClassifier::features(std::span<const data::MaskedInstance> prepared) const {
  nn::Matrix x = nn::Matrix::Zero(static_cast<Eigen::Index>(prepared.size()), static_cast<Eigen::Index>(input_width()));
  for (std::size_t b = 0; b < prepared.size(); ++b) {
    const auto row = static_cast<Eigen::Index>(b);
    Eigen::Index col = 0;
    for (std::size_t i = 0; i < schema_.size(); ++i) {
      const bool observed = prepared[b].mask[i] != 0;
      if (schema_.is_categorical(i)) {
        const auto card = schema_.features[i].cardinality;
        const auto level = observed ? static_cast<std::size_t>(prepared[b].values[i]) : card;
        x(row, col + static_cast<Eigen::Index>(std::min(level, card))) = 1.0f;
        col += static_cast<Eigen::Index>(card + 1);
      } else {
        x(row, col) = observed ? prepared[b].values[i] : 0.0f;
        x(row, col + 1) = observed ? 1.0f : 0.0f;
        col += 2;
      }
    }
  }
  return x;
}

nn::MatrixT<double> MlpClassifier::predict(std::span<const data::MaskedInstance> prepared, std::span<Rng>) const {
  if (prepared.empty()) return nn::MatrixT<double>(0, static_cast<Eigen::Index>(num_classes_));
  return nn::softmax_rows<float>(nn::mlp_forward_eval(params_, features(prepared))).cast<double>();
}

double mlp_loss_and_grads(MlpClassifier& model, std::span<const data::MaskedInstance> prepared,
                          std::span<const int> labels, Rng& rng, nn::MlpGrads* grads) {
  const auto batch = prepared.size();
  if (batch == 0 || labels.size() != batch) throw ConfigError("mlp_loss_and_grads: bad batch");
  std::vector<data::MaskedInstance> sub;
  sub.reserve(batch);
  for (const auto& inst : prepared) sub.push_back(data::restrict_to(model.schema(), inst, data::subsample_mask(inst.mask, rng)));
  nn::MlpCache cache;
  const nn::Matrix logits = nn::mlp_forward(model.params(), model.features(sub), nn::Mode::train, &cache);
  const nn::Matrix probs = nn::softmax_rows<float>(logits);
  double loss = 0.0;
  nn::Matrix dlogits = probs;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto r = static_cast<Eigen::Index>(b);
    loss += -std::log(std::max(static_cast<double>(probs(r, labels[b])), model::kProbabilityFloor));
    dlogits(r, labels[b]) -= 1.0f;
  }
  dlogits /= static_cast<float>(batch);
  if (grads) nn::mlp_backward<float>(model.params(), cache, dlogits, grads, nullptr);
  return loss / static_cast<double>(batch);
}

double mlp_validation_nll(const MlpClassifier& model, std::span<const data::MaskedInstance> prepared,
                          std::span<const int> labels, std::uint64_t seed) {
  if (prepared.empty()) throw ConfigError("mlp_validation_nll: empty split");
  std::vector<data::MaskedInstance> sub;
  sub.reserve(prepared.size());
  for (std::size_t n = 0; n < prepared.size(); ++n) {
    Rng rng(derive_seed(seed, n));
    sub.push_back(data::restrict_to(model.schema(), prepared[n], data::subsample_mask(prepared[n].mask, rng)));
  }
  const auto probs = model.predict(sub, {});
  double nll = 0.0;
  for (std::size_t n = 0; n < prepared.size(); ++n) {
    nll += -std::log(std::max(probs(static_cast<Eigen::Index>(n), labels[n]), model::kProbabilityFloor));
  }
  return nll / static_cast<double>(prepared.size());
}

std::vector<MlpEpoch> train_mlp(MlpClassifier& model, const data::Dataset& dataset, Rng& rng,
                                const std::function<void(const MlpEpoch&)>& on_epoch) {
  if (dataset.train.empty() || dataset.val.empty()) throw ConfigError("train_mlp: train and validation splits must be nonempty");
  const MlpConfig cfg = model.config();
  std::vector<MlpEpoch> history;
  if (cfg.epochs == 0) return history;

  std::vector<data::MaskedInstance> train_x;
  for (const auto& inst : dataset.train.instances) train_x.push_back(model.prepare(inst));
  const auto val_count = std::min(cfg.val_instances, dataset.val.size());
  std::vector<data::MaskedInstance> val_x;
  for (std::size_t k = 0; k < val_count; ++k) val_x.push_back(model.prepare(dataset.val.instances[k]));
  const std::span<const int> val_y(dataset.val.labels.data(), val_count);
  const std::uint64_t val_seed = derive_seed(0x5EFA, 2);

  std::vector<std::span<float>> params;
  nn::append_parameters(model.params(), params);
  nn::AdamState adam = nn::make_adam(params, cfg.learning_rate);
  nn::MlpParams best = model.params();
  double best_nll = std::numeric_limits<double>::infinity();
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
      if (count < 2 && seen > 0) continue;
      batch_x.clear();
      batch_y.clear();
      for (std::size_t k = start; k < start + count; ++k) {
        batch_x.push_back(train_x[order[k]]);
        batch_y.push_back(dataset.train.labels[order[k]]);
      }
      nn::MlpGrads grads;
      loss_sum += mlp_loss_and_grads(model, batch_x, batch_y, rng, &grads) * static_cast<double>(count);
      seen += count;
      std::vector<std::span<float>> g;
      nn::append_gradients(grads, g);
      nn::adam_step(adam, params, g);
      ++model.params().revision;
    }
    MlpEpoch rec{epoch, loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1)), 0.0, adam.learning_rate};
    rec.val_nll = mlp_validation_nll(model, val_x, val_y, val_seed);
    if (rec.val_nll < best_nll) {
      best_nll = rec.val_nll;
      best = model.params();
      since_improvement = 0;
    } else if (++since_improvement >= cfg.patience) {
      adam.learning_rate *= cfg.lr_decay;
      since_improvement = 0;
    }
    history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  model.params() = std::move(best);
  ++model.params().revision;
  return history;
}

}  // namespace sefa::baseline
