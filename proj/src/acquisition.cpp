#include "sefa/acquisition.hpp"

#include "sefa/errors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sefa::acq {

using nlohmann::json;

void AcqConfig::validate() const {
  if (predict_samples < 1 || score_samples < 1) throw ConfigError("acquisition: sample counts must be >= 1");
}

json to_json(const AcqConfig& c) {
  return json{{"predict_samples", c.predict_samples},
              {"score_samples", c.score_samples},
              {"normalize_scores", c.normalize_scores},
              {"probability_weighting", c.probability_weighting},
              {"single_sample", c.single_sample},
              {"fresh_class_samples", c.fresh_class_samples}};
}

AcqConfig acq_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("acquisition config must be an object");
  AcqConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "predict_samples" || key == "score_samples") {
      if (!value.is_number_integer() || value.get<long long>() < 1) {
        throw ConfigError("acquisition." + key + " must be a positive integer");
      }
      (key == "predict_samples" ? c.predict_samples : c.score_samples) = value.get<std::size_t>();
    } else if (key == "normalize_scores" || key == "probability_weighting" || key == "single_sample" ||
               key == "fresh_class_samples") {
      if (!value.is_boolean()) throw ConfigError("acquisition." + key + " must be a boolean");
      const bool v = value.get<bool>();
      if (key == "normalize_scores") c.normalize_scores = v;
      else if (key == "probability_weighting") c.probability_weighting = v;
      else if (key == "single_sample") c.single_sample = v;
      else c.fresh_class_samples = v;
    } else {
      throw ConfigError("acquisition config: unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

std::vector<double> sample_feature_scores(std::span<const double> group_norms, bool normalize) {
  std::vector<double> r(group_norms.begin(), group_norms.end());
  if (!normalize || r.empty()) return r;
  double total = 0.0;
  for (double v : r) total += v;
  if (total > 0.0) {
    for (double& v : r) v /= total;
  } else {
    std::fill(r.begin(), r.end(), 1.0 / static_cast<double>(r.size()));
  }
  return r;
}

namespace {

void check_span_sizes(std::size_t batch, std::size_t rngs, std::size_t availability) {
  if (rngs != batch) throw ConfigError("acquisition: need one rng per instance");
  if (availability != 0 && availability != batch) throw ConfigError("acquisition: need one availability mask per instance");
}

// Adds weight * mean_s r(c, z_s, .) for every instance of the batch.
void accumulate_gradient_scores(const nn::Matrix& grad, std::size_t samples, std::size_t d, std::size_t l,
                                bool normalize, const Eigen::VectorXd& weight, Eigen::MatrixXd& acc) {
  const auto s_count = static_cast<Eigen::Index>(samples);
  std::vector<double> norms(d);
  for (Eigen::Index b = 0; b < acc.rows(); ++b) {
    const double w = weight(b) / static_cast<double>(samples);
    if (w == 0.0) continue;
    for (Eigen::Index s = 0; s < s_count; ++s) {
      const auto row = grad.row(b * s_count + s);
      for (std::size_t i = 0; i < d; ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < l; ++k) {
          const double g = row(static_cast<Eigen::Index>(i * l + k));
          sq += g * g;
        }
        norms[i] = std::sqrt(sq);
      }
      const auto r = sample_feature_scores(norms, normalize);
      for (std::size_t i = 0; i < d; ++i) acc(b, static_cast<Eigen::Index>(i)) += w * r[i];
    }
  }
}

}  // namespace

std::vector<FeatureScores> score_features_batch(const model::SefaModel& model,
                                                std::span<const data::MaskedInstance> prepared,
                                                std::span<const std::vector<std::uint8_t>> availability,
                                                const nn::MatrixT<double>& class_probs, const AcqConfig& config,
                                                std::span<Rng> rngs) {
  config.validate();
  const auto batch = prepared.size();
  if (batch == 0) return {};
  check_span_sizes(batch, rngs.size(), availability.size());
  const auto d = model.num_features();
  const auto l = model.config().latent_dim;
  const auto classes = model.num_classes();
  if (class_probs.rows() != static_cast<Eigen::Index>(batch) || class_probs.cols() != static_cast<Eigen::Index>(classes)) {
    throw ConfigError("score_features: class probability matrix has the wrong shape");
  }
  const auto samples = config.scoring_samples();

  const model::LatentBatch latent = model.encode_batch(prepared);
  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(d));
  nn::MlpCache cache;
  nn::Matrix probs;
  auto forward = [&] {
    const nn::Matrix z = model.sample_latent(latent, samples, rngs);
    probs = nn::softmax_rows<float>(nn::mlp_forward_eval(model.predictor(), z, &cache));
  };
  if (!config.fresh_class_samples) forward();
  for (std::size_t c = 0; c < classes; ++c) {
    if (config.fresh_class_samples) forward();
    Eigen::VectorXd weight(static_cast<Eigen::Index>(batch));
    for (std::size_t b = 0; b < batch; ++b) {
      weight(static_cast<Eigen::Index>(b)) = config.probability_weighting
                                                 ? class_probs(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c))
                                                 : 1.0 / static_cast<double>(classes);
    }
    const nn::Matrix adjoint = nn::softmax_probability_adjoint<float>(probs, static_cast<Eigen::Index>(c));
    nn::Matrix grad;
    nn::mlp_backward<float>(model.predictor(), cache, adjoint, nullptr, &grad);
    accumulate_gradient_scores(grad, samples, d, l, config.normalize_scores, weight, acc);
  }

  std::vector<FeatureScores> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    auto& fs = out[b];
    fs.unmasked.resize(d);
    fs.scores.resize(d);
    fs.eligible.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
      fs.unmasked[i] = acc(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(i));
      const bool available = availability.empty() || availability[b][i] != 0;
      fs.eligible[i] = (!prepared[b].mask[i] && available) ? 1 : 0;
      fs.scores[i] = fs.eligible[i] ? fs.unmasked[i] : 0.0;
    }
    fs.class_probs.resize(classes);
    for (std::size_t c = 0; c < classes; ++c) {
      fs.class_probs[c] = class_probs(static_cast<Eigen::Index>(b), static_cast<Eigen::Index>(c));
    }
  }
  return out;
}

FeatureScores score_features(const model::SefaModel& model, const data::MaskedInstance& raw, const AcqConfig& config,
                             Rng& rng, std::span<const std::uint8_t> availability) {
  const data::MaskedInstance prepared = model.prepare(raw);
  if (!availability.empty() && availability.size() != model.num_features()) {
    throw ConfigError("score_features: availability mask length differs from feature count");
  }
  const auto probs = model.predict_batch(std::span(&prepared, 1), config.predict_samples, std::span(&rng, 1));
  std::vector<std::vector<std::uint8_t>> avail;
  if (!availability.empty()) avail.emplace_back(availability.begin(), availability.end());
  return score_features_batch(model, std::span(&prepared, 1), avail, probs, config, std::span(&rng, 1)).front();
}

std::size_t select_next(const FeatureScores& scores) {
  std::size_t best = scores.eligible.size();
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < scores.eligible.size(); ++i) {
    if (!scores.eligible[i]) continue;
    if (best == scores.eligible.size() || scores.scores[i] > best_score) {
      best = i;
      best_score = scores.scores[i];
    }
  }
  if (best == scores.eligible.size()) throw ExhaustedError("select_next: no unobserved, available feature left");
  return best;
}

Policy Policy::fixed(std::vector<std::size_t> ordering) {
  std::vector<std::uint8_t> seen(ordering.size(), 0);
  for (auto f : ordering) {
    if (f >= ordering.size() || seen[f]) throw ConfigError("fixed policy: ordering must be a permutation");
    seen[f] = 1;
  }
  return {Kind::fixed, std::move(ordering)};
}

std::string Policy::name() const {
  switch (kind) {
    case Kind::sefa: return "sefa";
    case Kind::random: return "random";
    case Kind::fixed: return "fixed";
  }
  return "unknown";
}

std::vector<std::size_t> random_permutation(std::size_t d, Rng& rng) {
  std::vector<std::size_t> perm(d);
  for (std::size_t i = 0; i < d; ++i) perm[i] = i;
  for (std::size_t k = d; k > 1; --k) std::swap(perm[k - 1], perm[rng.uniform_index(k)]);
  return perm;
}

std::vector<std::size_t> AcquisitionTrajectory::acquired() const {
  std::vector<std::size_t> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.feature);
  return out;
}

namespace {

constexpr std::size_t kLockstepChunk = 32;

std::vector<double> row_vector(const nn::MatrixT<double>& m, Eigen::Index r) {
  return {m.row(r).data(), m.row(r).data() + m.cols()};
}

void run_chunk(const Policy& policy, const Predictor& predictor, const model::SefaModel* scorer,
               std::span<const data::MaskedInstance> raw, std::size_t budget, const AcqConfig& config,
               std::span<Rng> rngs, std::span<const std::vector<std::uint8_t>> initial_masks,
               std::span<AcquisitionTrajectory> out) {
  const auto batch = raw.size();
  const auto& schema = predictor.schema();
  const auto d = schema.size();

  std::vector<data::MaskedInstance> full_pred(batch);
  std::vector<data::MaskedInstance> full_score(scorer ? batch : 0);
  std::vector<std::vector<std::uint8_t>> availability(batch);
  std::vector<std::vector<std::uint8_t>> mask(batch);
  std::vector<std::vector<std::size_t>> permutation(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    full_pred[b] = predictor.prepare(raw[b]);
    if (scorer) full_score[b] = scorer->prepare(raw[b]);
    availability[b] = raw[b].mask;
    mask[b] = initial_masks.empty() ? std::vector<std::uint8_t>(d, 0) : initial_masks[b];
    if (mask[b].size() != d) throw ConfigError("run_trajectory: initial mask length differs from feature count");
    for (std::size_t i = 0; i < d; ++i) mask[b][i] = mask[b][i] && availability[b][i];
    if (policy.kind == Policy::Kind::random) permutation[b] = random_permutation(d, rngs[b]);
  }

  std::vector<std::size_t> active(batch);
  for (std::size_t b = 0; b < batch; ++b) active[b] = b;
  std::vector<data::MaskedInstance> states;
  std::vector<Rng> local_rngs;
  auto gather = [&](const std::vector<data::MaskedInstance>& full) {
    states.clear();
    local_rngs.clear();
    for (auto b : active) {
      states.push_back(data::restrict_to(schema, full[b], mask[b]));
      local_rngs.push_back(rngs[b]);
    }
  };
  auto scatter_rngs = [&] {
    for (std::size_t k = 0; k < active.size(); ++k) rngs[active[k]] = local_rngs[k];
  };

  gather(full_pred);
  nn::MatrixT<double> probs = predictor.predict(states, local_rngs);
  scatter_rngs();
  for (std::size_t k = 0; k < active.size(); ++k) out[active[k]].initial_probs = row_vector(probs, static_cast<Eigen::Index>(k));

  for (std::size_t t = 0; t < budget; ++t) {
    // Instances with nothing left to acquire stop early.
    std::vector<std::size_t> next_active;
    std::vector<Eigen::Index> keep_rows;
    for (std::size_t k = 0; k < active.size(); ++k) {
      const auto b = active[k];
      bool any = false;
      for (std::size_t i = 0; i < d && !any; ++i) any = !mask[b][i] && availability[b][i];
      if (any) {
        next_active.push_back(b);
        keep_rows.push_back(static_cast<Eigen::Index>(k));
      }
    }
    if (next_active.empty()) break;
    if (next_active.size() != active.size()) {
      nn::MatrixT<double> kept(static_cast<Eigen::Index>(keep_rows.size()), probs.cols());
      for (std::size_t k = 0; k < keep_rows.size(); ++k) kept.row(static_cast<Eigen::Index>(k)) = probs.row(keep_rows[k]);
      probs = std::move(kept);
      active = std::move(next_active);
    }

    std::vector<FeatureScores> scores;
    if (policy.kind == Policy::Kind::sefa) {
      gather(full_score);
      std::vector<std::vector<std::uint8_t>> avail;
      for (auto b : active) avail.push_back(availability[b]);
      scores = score_features_batch(*scorer, states, avail, probs, config, local_rngs);
      scatter_rngs();
    }
    for (std::size_t k = 0; k < active.size(); ++k) {
      const auto b = active[k];
      std::size_t choice = d;
      if (policy.kind == Policy::Kind::sefa) {
        choice = select_next(scores[k]);
      } else {
        const auto& order = policy.kind == Policy::Kind::fixed ? policy.ordering : permutation[b];
        for (auto f : order) {
          if (!mask[b][f] && availability[b][f]) {
            choice = f;
            break;
          }
        }
      }
      mask[b][choice] = 1;
      TrajectoryStep step;
      step.feature = choice;
      step.value = raw[b].values[choice];
      if (policy.kind == Policy::Kind::sefa) step.scores = std::move(scores[k].scores);
      out[b].steps.push_back(std::move(step));
    }

    gather(full_pred);
    probs = predictor.predict(states, local_rngs);
    scatter_rngs();
    for (std::size_t k = 0; k < active.size(); ++k) {
      out[active[k]].steps.back().class_probs = row_vector(probs, static_cast<Eigen::Index>(k));
    }
  }
}

}  // namespace

std::vector<AcquisitionTrajectory> run_trajectories(const Policy& policy, const Predictor& predictor,
                                                    const model::SefaModel* scorer,
                                                    std::span<const data::MaskedInstance> raw, std::size_t budget,
                                                    const AcqConfig& config, std::span<Rng> rngs,
                                                    std::span<const std::vector<std::uint8_t>> initial_masks) {
  config.validate();
  const auto d = predictor.schema().size();
  if (budget > d) throw ConfigError("run_trajectory: budget exceeds the number of features");
  check_span_sizes(raw.size(), rngs.size(), initial_masks.size());
  if (policy.kind == Policy::Kind::sefa && !scorer) throw ConfigError("run_trajectory: SEFA policy needs a model");
  if (scorer && scorer->num_features() != d) throw ConfigError("run_trajectory: scorer and predictor schemas differ");
  if (policy.kind == Policy::Kind::fixed && policy.ordering.size() != d) {
    throw ConfigError("run_trajectory: fixed ordering length differs from feature count");
  }
  std::vector<AcquisitionTrajectory> out(raw.size());
  for (std::size_t start = 0; start < raw.size(); start += kLockstepChunk) {
    const auto count = std::min(kLockstepChunk, raw.size() - start);
    run_chunk(policy, predictor, scorer, raw.subspan(start, count), budget, config, rngs.subspan(start, count),
              initial_masks.empty() ? initial_masks : initial_masks.subspan(start, count),
              std::span(out).subspan(start, count));
  }
  return out;
}

AcquisitionTrajectory run_trajectory(const Policy& policy, const model::SefaModel& model,
                                     const data::MaskedInstance& raw, std::size_t budget, const AcqConfig& config,
                                     Rng& rng) {
  const SefaPredictor predictor(model, config.predict_samples);
  return run_trajectories(policy, predictor, &model, std::span(&raw, 1), budget, config, std::span(&rng, 1)).front();
}

std::vector<std::size_t> build_fixed_ordering(const Predictor& predictor, const data::Split& split,
                                              const MetricFn& metric, std::uint64_t seed) {
  if (split.empty()) throw ConfigError("build_fixed_ordering: empty split");
  const auto& schema = predictor.schema();
  const auto d = schema.size();
  std::vector<data::MaskedInstance> full;
  full.reserve(split.size());
  for (const auto& inst : split.instances) full.push_back(predictor.prepare(inst));

  std::vector<std::uint8_t> kept(d, 0);
  std::vector<std::size_t> ordering;
  std::vector<data::MaskedInstance> states(full.size());
  for (std::size_t round = 0; round < d; ++round) {
    std::size_t best = d;
    double best_metric = -std::numeric_limits<double>::infinity();
    for (std::size_t f = 0; f < d; ++f) {
      if (kept[f]) continue;
      std::vector<std::uint8_t> mask = kept;
      mask[f] = 1;
      for (std::size_t n = 0; n < full.size(); ++n) states[n] = data::restrict_to(schema, full[n], mask);
      std::vector<Rng> rngs;
      rngs.reserve(full.size());
      for (std::size_t n = 0; n < full.size(); ++n) rngs.emplace_back(derive_seed(seed, n));
      nn::MatrixT<double> probs(static_cast<Eigen::Index>(full.size()), static_cast<Eigen::Index>(predictor.num_classes()));
      constexpr std::size_t kChunk = 1024;
      for (std::size_t start = 0; start < full.size(); start += kChunk) {
        const auto count = std::min(kChunk, full.size() - start);
        probs.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count)) =
            predictor.predict(std::span(states).subspan(start, count), std::span(rngs).subspan(start, count));
      }
      const double m = metric(probs, split.labels);
      if (best == d || m > best_metric) {
        best = f;
        best_metric = m;
      }
    }
    kept[best] = 1;
    ordering.push_back(best);
  }
  return ordering;
}

}  // namespace sefa::acq
