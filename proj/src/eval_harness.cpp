#include "sefa/eval_harness.hpp"

#include "sefa/errors.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace sefa::eval {

MetricKind default_metric(std::size_t num_classes) { return num_classes == 2 ? MetricKind::auroc : MetricKind::accuracy; }

std::string to_string(MetricKind kind) { return kind == MetricKind::auroc ? "auroc" : "accuracy"; }

MetricKind metric_from_string(const std::string& name) {
  if (name == "auroc") return MetricKind::auroc;
  if (name == "accuracy") return MetricKind::accuracy;
  throw ConfigError("unknown metric '" + name + "' (expected auroc or accuracy)");
}

double accuracy(const nn::MatrixT<double>& probs, std::span<const int> labels) {
  if (labels.empty()) throw ConfigError("accuracy: no instances");
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) throw ConfigError("accuracy: row/label count mismatch");
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c) {
      if (probs(r, c) > probs(r, best)) best = c;
    }
    if (best == labels[static_cast<std::size_t>(r)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size() || scores.empty()) throw ConfigError("auroc: score/label count mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t k = 0; k < order.size();) {
    std::size_t end = k;
    while (end < order.size() && scores[order[end]] == scores[order[k]]) ++end;
    const double avg_rank = 0.5 * static_cast<double>(k + 1 + end);
    for (std::size_t m = k; m < end; ++m) {
      if (labels[order[m]] == 1) {
        rank_sum += avg_rank;
        ++positives;
      } else if (labels[order[m]] != 0) {
        throw ConfigError("auroc: labels must be 0 or 1");
      }
    }
    k = end;
  }
  const std::size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) throw DomainError("auroc: undefined unless both classes are present");
  const double p = static_cast<double>(positives);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(negatives));
}

double compute_metric(MetricKind kind, const nn::MatrixT<double>& probs, std::span<const int> labels) {
  if (kind == MetricKind::accuracy) return accuracy(probs, labels);
  if (probs.cols() != 2) throw ConfigError("auroc: needs exactly two classes");
  std::vector<double> scores(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) scores[static_cast<std::size_t>(r)] = probs(r, 1);
  return auroc(scores, labels);
}

acq::MetricFn metric_fn(MetricKind kind) {
  return [kind](const nn::MatrixT<double>& probs, std::span<const int> labels) { return compute_metric(kind, probs, labels); };
}

MeanSe mean_se(std::span<const double> values) {
  MeanSe out;
  out.n = values.size();
  if (values.empty()) return out;
  double sum = 0.0;
  for (double v : values) sum += v;
  out.mean = sum / static_cast<double>(out.n);
  if (out.n > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - out.mean) * (v - out.mean);
    out.se = std::sqrt(sq / static_cast<double>(out.n - 1) / static_cast<double>(out.n));
  }
  return out;
}

double AcquisitionCurve::mean() const {
  if (values.empty()) return 0.0;
  if (values.size() == 1) return values.front();
  double sum = 0.0;
  for (std::size_t t = 1; t < values.size(); ++t) sum += values[t];
  return sum / static_cast<double>(values.size() - 1);
}

AcquisitionCurve curve_from_trajectories(std::span<const acq::AcquisitionTrajectory> trajectories,
                                         std::span<const int> labels, MetricKind metric, std::size_t budget) {
  if (trajectories.size() != labels.size()) throw ConfigError("curve: trajectory/label count mismatch");
  if (trajectories.empty()) throw ConfigError("curve: no trajectories");
  const auto classes = static_cast<Eigen::Index>(trajectories.front().initial_probs.size());
  AcquisitionCurve curve;
  curve.kind = metric;
  nn::MatrixT<double> probs(static_cast<Eigen::Index>(trajectories.size()), classes);
  for (std::size_t t = 0; t <= budget; ++t) {
    for (std::size_t n = 0; n < trajectories.size(); ++n) {
      const auto& tr = trajectories[n];
      const auto& p = tr.probs_at(std::min(t, tr.steps.size()));
      for (Eigen::Index c = 0; c < classes; ++c) probs(static_cast<Eigen::Index>(n), c) = p[static_cast<std::size_t>(c)];
    }
    curve.values.push_back(compute_metric(metric, probs, labels));
  }
  return curve;
}

Evaluation evaluate_acquisition(const acq::Policy& policy, const acq::Predictor& predictor,
                                const model::SefaModel* scorer, const data::Split& split, MetricKind metric,
                                std::size_t budget, const acq::AcqConfig& config, std::uint64_t seed) {
  if (split.empty()) throw ConfigError("evaluate_acquisition: empty split");
  std::vector<Rng> rngs;
  rngs.reserve(split.size());
  for (std::size_t n = 0; n < split.size(); ++n) rngs.emplace_back(derive_seed(seed, n));
  Evaluation out;
  out.trajectories = acq::run_trajectories(policy, predictor, scorer, split.instances, budget, config, rngs);
  out.curve = curve_from_trajectories(out.trajectories, split.labels, metric, budget);
  out.mean = out.curve.mean();
  return out;
}

std::size_t steps_to_complete(std::span<const std::size_t> acquired, std::span<const std::size_t> relevant,
                              std::size_t budget) {
  std::size_t last = 0;
  for (auto f : relevant) {
    auto it = std::find(acquired.begin(), acquired.end(), f);
    const auto pos = static_cast<std::size_t>(it - acquired.begin());
    if (it == acquired.end() || pos >= budget) return budget + 1;
    last = std::max(last, pos + 1);
  }
  return last;
}

CompletionStats num_to_complete(std::span<const acq::AcquisitionTrajectory> trajectories,
                                std::span<const std::vector<std::size_t>> relevant, std::size_t budget) {
  if (trajectories.size() != relevant.size()) throw ConfigError("num_to_complete: need one relevant set per trajectory");
  CompletionStats out;
  for (std::size_t n = 0; n < trajectories.size(); ++n) {
    const auto acquired = trajectories[n].acquired();
    const auto steps = steps_to_complete(acquired, relevant[n], budget);
    if (steps > budget) ++out.overruns;
    out.per_instance.push_back(static_cast<double>(steps));
  }
  out.summary = mean_se(out.per_instance);
  return out;
}

HeatMap heat_map(std::span<const acq::AcquisitionTrajectory> trajectories, std::size_t steps, std::size_t num_features) {
  if (steps > num_features) throw ConfigError("heat_map: more steps than features");
  HeatMap map;
  map.proportions.assign(steps, std::vector<double>(num_features, 0.0));
  map.counts.assign(steps, 0);
  for (const auto& tr : trajectories) {
    for (std::size_t t = 0; t < steps && t < tr.steps.size(); ++t) {
      const auto f = tr.steps[t].feature;
      if (f >= num_features) throw ConfigError("heat_map: feature index out of range");
      map.proportions[t][f] += 1.0;
      ++map.counts[t];
    }
  }
  for (std::size_t t = 0; t < steps; ++t) {
    if (map.counts[t] == 0) continue;
    for (double& v : map.proportions[t]) v /= static_cast<double>(map.counts[t]);
  }
  return map;
}

namespace {

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << std::setprecision(10);
  return out;
}

}  // namespace

void write_curve_csv(const std::string& path, const AcquisitionCurve& curve) {
  auto out = open_output(path);
  out << "step," << to_string(curve.kind) << '\n';
  for (std::size_t t = 0; t < curve.values.size(); ++t) out << t << ',' << curve.values[t] << '\n';
}

void write_heatmap_csv(const std::string& path, const HeatMap& map, const data::FeatureSchema& schema) {
  auto out = open_output(path);
  out << "step";
  for (const auto& f : schema.features) out << ',' << f.name;
  out << '\n';
  for (std::size_t t = 0; t < map.proportions.size(); ++t) {
    out << t + 1;
    for (double v : map.proportions[t]) out << ',' << v;
    out << '\n';
  }
}

void write_trajectories_csv(const std::string& path, std::span<const acq::AcquisitionTrajectory> trajectories,
                            std::size_t num_classes) {
  auto out = open_output(path);
  out << "instance,step,feature,value";
  for (std::size_t c = 0; c < num_classes; ++c) out << ",p" << c;
  out << '\n';
  for (std::size_t n = 0; n < trajectories.size(); ++n) {
    const auto& tr = trajectories[n];
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& s = tr.steps[t];
      out << n << ',' << t + 1 << ',' << s.feature << ',' << s.value;
      for (double p : s.class_probs) out << ',' << p;
      out << '\n';
    }
  }
}

void write_trajectories_jsonl(const std::string& path, std::span<const acq::AcquisitionTrajectory> trajectories) {
  auto out = open_output(path);
  for (std::size_t n = 0; n < trajectories.size(); ++n) {
    const auto& tr = trajectories[n];
    for (std::size_t t = 0; t < tr.steps.size(); ++t) {
      const auto& s = tr.steps[t];
      nlohmann::json rec{{"instance", n},
                         {"step", t + 1},
                         {"feature", s.feature},
                         {"value", s.value},
                         {"class_distribution", s.class_probs}};
      if (!s.scores.empty()) rec["scores"] = s.scores;
      out << rec.dump() << '\n';
    }
  }
}

model::Validator make_acquisition_validator(const data::Split& val, std::uint64_t seed) {
  if (val.empty()) throw ConfigError("validator: empty validation split");
  return [&val, seed](const model::SefaModel& model) {
    const auto& cfg = model.config();
    data::Split subset;
    const auto count = std::min(cfg.val_instances, val.size());
    subset.instances.assign(val.instances.begin(), val.instances.begin() + static_cast<std::ptrdiff_t>(count));
    subset.labels.assign(val.labels.begin(), val.labels.begin() + static_cast<std::ptrdiff_t>(count));
    acq::AcqConfig acq_cfg;
    acq_cfg.predict_samples = cfg.val_predict_samples;
    acq_cfg.score_samples = cfg.val_score_samples;
    const acq::SefaPredictor predictor(model, acq_cfg.predict_samples);
    const auto metric = default_metric(model.num_classes());
    return evaluate_acquisition(acq::Policy::sefa(), predictor, &model, subset, metric, model.num_features(), acq_cfg, seed)
        .mean;
  };
}

}  // namespace sefa::eval
