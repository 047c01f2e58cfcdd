#include "sefa/experiment.hpp"

#include "sefa/errors.hpp"
#include "sefa/rng.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace sefa::exp {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, const std::string& context, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(context + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(context + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& context) {
  const auto it = j.find(key);
  if (it == j.end()) return;
  const std::string where = context + "." + key;
  if constexpr (std::is_same_v<T, bool>) {
    if (!it->is_boolean()) throw ConfigError(where + " must be a boolean");
    out = it->get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!it->is_string()) throw ConfigError(where + " must be a string");
    out = it->get<std::string>();
  } else if constexpr (std::is_same_v<T, double>) {
    if (!it->is_number()) throw ConfigError(where + " must be a number");
    out = it->get<double>();
  } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
    if (!it->is_array()) throw ConfigError(where + " must be an array of strings");
    out.clear();
    for (const auto& v : *it) {
      if (!v.is_string()) throw ConfigError(where + " must be an array of strings");
      out.push_back(v.get<std::string>());
    }
  } else if constexpr (std::is_same_v<T, std::vector<std::uint64_t>>) {
    if (!it->is_array()) throw ConfigError(where + " must be an array of nonnegative integers");
    out.clear();
    for (const auto& v : *it) {
      if (!v.is_number_unsigned()) throw ConfigError(where + " must be an array of nonnegative integers");
      out.push_back(v.get<std::uint64_t>());
    }
  } else {
    if (!it->is_number_unsigned()) throw ConfigError(where + " must be a nonnegative integer");
    out = it->get<T>();
  }
}

template <typename Fn>
auto wrap_config(const std::string& context, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError(context + ": " + e.what());
  }
}

const std::set<std::string> kGenerators{"syn1", "syn2", "syn3", "cube", "indicator", "csv"};
const std::set<std::string> kPolicies{"sefa", "random", "fixed"};

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

json mean_se_json(const eval::MeanSe& m) { return json{{"mean", m.mean}, {"se", m.se}, {"n", m.n}}; }

eval::MeanSe mean_se_from_json(const json& j) {
  return {j.at("mean").get<double>(), j.at("se").get<double>(), j.at("n").get<std::size_t>()};
}

data::Split head(const data::Split& split, std::size_t count) {
  if (count == 0 || count >= split.size()) return split;
  const auto n = static_cast<std::ptrdiff_t>(count);
  data::Split out;
  out.instances.assign(split.instances.begin(), split.instances.begin() + n);
  out.labels.assign(split.labels.begin(), split.labels.begin() + n);
  if (split.has_relevant()) out.relevant.assign(split.relevant.begin(), split.relevant.begin() + n);
  return out;
}

void write_train_log(const fs::path& path, const model::TrainHistory& history) {
  std::ostringstream out;
  out.precision(17);
  out << "epoch,train_loss,val_nll,val_kl,val_metric,learning_rate,improved\n";
  for (const auto& e : history.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_nll << ',' << e.val_kl << ',' << e.val_metric << ','
        << e.learning_rate << ',' << (e.improved ? 1 : 0) << '\n';
  }
  write_text(path, out.str());
}

json history_to_json(const model::TrainHistory& history) {
  json epochs = json::array();
  for (const auto& e : history.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_nll", e.val_nll},
                      {"val_kl", e.val_kl},
                      {"val_metric", e.val_metric},
                      {"learning_rate", e.learning_rate},
                      {"improved", e.improved}});
  }
  return json{{"epochs", epochs}, {"best_epoch", history.best_epoch}, {"best_metric", history.best_metric}};
}

model::TrainHistory history_from_json(const json& j) {
  model::TrainHistory h;
  for (const auto& e : j.at("epochs")) {
    h.epochs.push_back({e.at("epoch").get<std::size_t>(), e.at("train_loss").get<double>(), e.at("val_nll").get<double>(),
                        e.at("val_kl").get<double>(), e.at("val_metric").get<double>(),
                        e.at("learning_rate").get<double>(), e.at("improved").get<bool>()});
  }
  h.best_epoch = j.at("best_epoch").get<std::size_t>();
  h.best_metric = j.at("best_metric").get<double>();
  return h;
}

SeedResult seed_result_from_json(const json& j) {
  SeedResult r;
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.at("error").get<std::string>();
  r.seconds = j.at("seconds").get<double>();
  if (j.contains("history")) r.history = history_from_json(j.at("history"));
  r.fixed_ordering = j.value("fixed_ordering", std::vector<std::size_t>{});
  for (const auto& p : j.at("policies")) {
    PolicyResult pr;
    pr.policy = p.at("policy").get<std::string>();
    pr.curve.kind = eval::metric_from_string(p.at("metric").get<std::string>());
    pr.curve.values = p.at("curve").get<std::vector<double>>();
    pr.curve_mean = p.at("curve_mean").get<double>();
    if (p.contains("num_to_complete")) {
      const auto& c = p.at("num_to_complete");
      eval::CompletionStats stats;
      stats.summary = mean_se_from_json(c);
      stats.overruns = c.at("overruns").get<std::size_t>();
      stats.per_instance = c.at("per_instance").get<std::vector<double>>();
      pr.completion = std::move(stats);
    }
    pr.heat_map.proportions = p.at("heat_map").at("proportions").get<std::vector<std::vector<double>>>();
    pr.heat_map.counts = p.at("heat_map").at("counts").get<std::vector<std::size_t>>();
    r.policies.push_back(std::move(pr));
  }
  return r;
}

std::string training_key(const ExperimentConfig& config, std::uint64_t seed) {
  const json key{{"dataset", to_json(config.dataset)},
                 {"model", model::to_json(effective_model_config(config))},
                 {"seed", seed},
                 {"version", SEFA_VERSION}};
  return hex64(fnv1a64(canonical_dump(key)));
}

}  // namespace

void DatasetSpec::validate() const {
  if (!kGenerators.count(generator)) {
    throw ConfigError("dataset.generator must be one of syn1, syn2, syn3, cube, indicator, csv (got '" + generator + "')");
  }
  if (generator == "csv") {
    if (csv_path.empty()) throw ConfigError("dataset.csv_path is required for the csv generator");
    if (csv.label_column.empty()) throw ConfigError("dataset.csv.label_column is required for the csv generator");
  } else if (sizes.train < 2 || sizes.val < 1 || sizes.test < 1) {
    throw ConfigError("dataset.sizes: need train >= 2, val >= 1 and test >= 1");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("dataset.noise_sigma must be >= 0");
  if (generator == "indicator" && (indicator_d < 2 || indicator_d > 12)) {
    throw ConfigError("dataset.indicator_d must be in [2, 12]");
  }
}

json to_json(const DatasetSpec& s) {
  json j{{"generator", s.generator},
         {"sizes", {{"train", s.sizes.train}, {"val", s.sizes.val}, {"test", s.sizes.test}}},
         {"noise_sigma", s.noise_sigma},
         {"indicator_d", s.indicator_d},
         {"seed", s.seed},
         {"csv_path", s.csv_path}};
  j["csv"] = {{"label_column", s.csv.label_column},
              {"categorical_columns", s.csv.categorical_columns},
              {"feature_columns", s.csv.feature_columns},
              {"train_ratio", s.csv.train_ratio},
              {"val_ratio", s.csv.val_ratio},
              {"test_ratio", s.csv.test_ratio},
              {"missing_tokens", s.csv.missing_tokens}};
  return j;
}

DatasetSpec dataset_spec_from_json(const json& j) {
  const std::string ctx = "dataset";
  check_keys(j, ctx, {"generator", "sizes", "noise_sigma", "indicator_d", "seed", "csv_path", "csv"});
  DatasetSpec s;
  read(j, "generator", s.generator, ctx);
  if (j.contains("sizes")) {
    const auto& sz = j.at("sizes");
    check_keys(sz, ctx + ".sizes", {"train", "val", "test"});
    read(sz, "train", s.sizes.train, ctx + ".sizes");
    read(sz, "val", s.sizes.val, ctx + ".sizes");
    read(sz, "test", s.sizes.test, ctx + ".sizes");
  }
  read(j, "noise_sigma", s.noise_sigma, ctx);
  read(j, "indicator_d", s.indicator_d, ctx);
  read(j, "seed", s.seed, ctx);
  read(j, "csv_path", s.csv_path, ctx);
  if (j.contains("csv")) {
    const auto& c = j.at("csv");
    const std::string cc = ctx + ".csv";
    check_keys(c, cc, {"label_column", "categorical_columns", "feature_columns", "train_ratio", "val_ratio",
                       "test_ratio", "missing_tokens"});
    read(c, "label_column", s.csv.label_column, cc);
    read(c, "categorical_columns", s.csv.categorical_columns, cc);
    read(c, "feature_columns", s.csv.feature_columns, cc);
    read(c, "train_ratio", s.csv.train_ratio, cc);
    read(c, "val_ratio", s.csv.val_ratio, cc);
    read(c, "test_ratio", s.csv.test_ratio, cc);
    read(c, "missing_tokens", s.csv.missing_tokens, cc);
  }
  s.validate();
  return s;
}

data::Dataset build_dataset(const DatasetSpec& spec) {
  spec.validate();
  if (spec.generator == "csv") {
    auto options = spec.csv;
    options.seed = spec.seed;
    return data::load_csv(spec.csv_path, options);
  }
  if (spec.generator == "cube") return data::gen_cube(spec.sizes, spec.seed);
  if (spec.generator == "indicator") return data::gen_indicator(spec.indicator_d, spec.sizes, spec.seed);
  const int variant = spec.generator.back() - '0';
  return data::gen_syn(variant, spec.sizes, spec.noise_sigma, spec.seed);
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("name must not be empty");
  dataset.validate();
  wrap_config("model", [&] { model.validate(); });
  wrap_config("acquisition", [&] { acquisition.validate(); });
  wrap_config("baseline", [&] { baseline.validate(); });
  if (policies.empty()) throw ConfigError("policies must not be empty");
  std::set<std::string> seen;
  for (const auto& p : policies) {
    if (!kPolicies.count(p)) throw ConfigError("policies: unknown policy '" + p + "' (expected sefa, random or fixed)");
    if (!seen.insert(p).second) throw ConfigError("policies: duplicate policy '" + p + "'");
  }
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (!metric.empty() && metric != "accuracy" && metric != "auroc") {
    throw ConfigError("metric must be accuracy, auroc or empty (got '" + metric + "')");
  }
  if (!ablation.empty() && std::none_of(std::begin(kAblations), std::end(kAblations),
                                        [&](const char* a) { return ablation == a; })) {
    throw ConfigError("ablation: unknown ablation '" + ablation + "'");
  }
}

json to_json(const ExperimentConfig& c) {
  return json{{"name", c.name},
              {"dataset", to_json(c.dataset)},
              {"model", model::to_json(c.model)},
              {"acquisition", acq::to_json(c.acquisition)},
              {"baseline", baseline::to_json(c.baseline)},
              {"policies", c.policies},
              {"seeds", c.seeds},
              {"output_dir", c.output_dir},
              {"budget", c.budget},
              {"eval_instances", c.eval_instances},
              {"metric", c.metric},
              {"ablation", c.ablation},
              {"export_trajectories", c.export_trajectories}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  const std::string ctx = "config";
  check_keys(j, ctx, {"name", "dataset", "model", "acquisition", "baseline", "policies", "seeds", "output_dir", "budget",
                      "eval_instances", "metric", "ablation", "export_trajectories"});
  ExperimentConfig c;
  read(j, "name", c.name, ctx);
  if (j.contains("dataset")) c.dataset = dataset_spec_from_json(j.at("dataset"));
  if (j.contains("model")) c.model = model::sefa_config_from_json(j.at("model"));
  if (j.contains("acquisition")) c.acquisition = acq::acq_config_from_json(j.at("acquisition"));
  if (j.contains("baseline")) c.baseline = baseline::mlp_config_from_json(j.at("baseline"));
  read(j, "policies", c.policies, ctx);
  read(j, "seeds", c.seeds, ctx);
  read(j, "output_dir", c.output_dir, ctx);
  read(j, "budget", c.budget, ctx);
  read(j, "eval_instances", c.eval_instances, ctx);
  read(j, "metric", c.metric, ctx);
  read(j, "ablation", c.ablation, ctx);
  read(j, "export_trajectories", c.export_trajectories, ctx);
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return experiment_config_from_json(j);
}

std::string canonical_dump(const json& j) { return j.dump(); }

std::string config_hash(const ExperimentConfig& config) { return hex64(fnv1a64(canonical_dump(to_json(config)))); }

std::vector<std::string> preset_names() { return {"syn1", "syn2", "syn3", "cube", "indicator"}; }

ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  c.output_dir = "runs/" + name;
  c.dataset.generator = name;
  auto& m = c.model;
  if (name == "syn1" || name == "indicator") {
    // Defaults are SEFA configuration 4 and Fixed MLP configuration 7.
  } else if (name == "syn2") {
    m.latent_dim = 4;
    m.predictor_width = 100;
    m.predictor_depth = 2;
    m.encoder_width = 20;
    m.encoder_depth = 2;
    m.beta = 0.0005;
    m.learning_rate = 1e-3;
    m.batch_size = 128;
  } else if (name == "syn3") {
    m.latent_dim = 8;
    m.predictor_width = 250;
    m.predictor_depth = 1;
    m.encoder_width = 100;
    m.encoder_depth = 1;
    m.beta = 0.0001;
    m.learning_rate = 1e-3;
    m.batch_size = 256;
  } else if (name == "cube") {
    m.latent_dim = 4;
    m.predictor_width = 250;
    m.predictor_depth = 2;
    m.encoder_width = 150;
    m.encoder_depth = 2;
    m.beta = 0.005;
    m.learning_rate = 3e-4;
    m.batch_size = 128;
    c.baseline.width = 200;
    c.baseline.depth = 1;
    c.baseline.batch_size = 128;
    c.baseline.patience = 5;
    m.epochs = 15;
    m.val_instances = 250;
    c.eval_instances = 1000;
  } else {
    throw ConfigError("unknown preset '" + name + "' (expected syn1, syn2, syn3, cube or indicator)");
  }
  c.validate();
  return c;
}

ExperimentConfig with_ablation(ExperimentConfig config, const std::string& ablation) {
  config.ablation = ablation;
  config.validate();
  return config;
}

model::SefaConfig effective_model_config(const ExperimentConfig& config) {
  auto m = config.model;
  if (config.ablation == "beta0") m.beta = 0.0;
  if (config.ablation == "one-train-sample") m.train_samples = 1;
  if (config.ablation == "deterministic") m.deterministic_encoder = true;
  return m;
}

acq::AcqConfig effective_acq_config(const ExperimentConfig& config) {
  auto a = config.acquisition;
  if (config.ablation == "one-acq-sample") a.single_sample = true;
  if (config.ablation == "no-normalize") a.normalize_scores = false;
  if (config.ablation == "no-prob-weight") a.probability_weighting = false;
  return a;
}

std::uint64_t stream_seed(std::uint64_t seed, Stream stream) {
  return derive_seed(seed, static_cast<std::uint64_t>(stream));
}

json seed_result_to_json(const SeedResult& r) {
  json j{{"seed", r.seed}, {"ok", r.ok}, {"error", r.error}, {"seconds", r.seconds}};
  if (!r.history.epochs.empty()) j["history"] = history_to_json(r.history);
  j["fixed_ordering"] = r.fixed_ordering;
  json policies = json::array();
  for (const auto& p : r.policies) {
    json entry{{"policy", p.policy},
               {"metric", eval::to_string(p.curve.kind)},
               {"curve", p.curve.values},
               {"curve_mean", p.curve_mean},
               {"heat_map", {{"proportions", p.heat_map.proportions}, {"counts", p.heat_map.counts}}}};
    if (p.completion) {
      auto c = mean_se_json(p.completion->summary);
      c["overruns"] = p.completion->overruns;
      c["per_instance"] = p.completion->per_instance;
      entry["num_to_complete"] = std::move(c);
    }
    policies.push_back(std::move(entry));
  }
  j["policies"] = std::move(policies);
  return j;
}

const PolicySummary* Summary::find(const std::string& policy) const {
  for (const auto& p : policies) {
    if (p.policy == policy) return &p;
  }
  return nullptr;
}

json to_json(const Summary& s) {
  json policies = json::array();
  for (const auto& p : s.policies) {
    json entry{{"policy", p.policy},
               {"curve_mean", mean_se_json(p.curve_mean)},
               {"curve", p.curve},
               {"first_pick", p.first_pick},
               {"overruns", p.overruns}};
    if (p.num_to_complete) entry["num_to_complete"] = mean_se_json(*p.num_to_complete);
    if (p.num_to_complete_instances) entry["num_to_complete_instances"] = mean_se_json(*p.num_to_complete_instances);
    policies.push_back(std::move(entry));
  }
  return json{{"name", s.name},
              {"config_hash", s.config_hash},
              {"metric", s.metric},
              {"seeds_ok", s.seeds_ok},
              {"seeds_failed", s.seeds_failed},
              {"policies", std::move(policies)}};
}

Summary summarize(const ExperimentConfig& config, const std::vector<SeedResult>& seeds) {
  Summary s;
  s.name = config.name;
  s.config_hash = config_hash(config);
  for (const auto& r : seeds) (r.ok ? s.seeds_ok : s.seeds_failed)++;
  for (const auto& policy : config.policies) {
    PolicySummary ps;
    ps.policy = policy;
    std::vector<double> means;
    std::vector<double> completion_means;
    std::vector<double> pooled;
    std::vector<double> first_counts;
    double first_total = 0.0;
    for (const auto& r : seeds) {
      if (!r.ok) continue;
      const auto it = std::find_if(r.policies.begin(), r.policies.end(),
                                   [&](const PolicyResult& p) { return p.policy == policy; });
      if (it == r.policies.end()) continue;
      if (s.metric.empty()) s.metric = eval::to_string(it->curve.kind);
      means.push_back(it->curve_mean);
      if (ps.curve.empty()) ps.curve.assign(it->curve.values.size(), 0.0);
      for (std::size_t t = 0; t < ps.curve.size() && t < it->curve.values.size(); ++t) ps.curve[t] += it->curve.values[t];
      if (it->completion) {
        completion_means.push_back(it->completion->summary.mean);
        pooled.insert(pooled.end(), it->completion->per_instance.begin(), it->completion->per_instance.end());
        ps.overruns += it->completion->overruns;
      }
      if (!it->heat_map.proportions.empty()) {
        const auto& row = it->heat_map.proportions.front();
        const auto count = static_cast<double>(it->heat_map.counts.front());
        if (first_counts.empty()) first_counts.assign(row.size(), 0.0);
        for (std::size_t i = 0; i < row.size(); ++i) first_counts[i] += row[i] * count;
        first_total += count;
      }
    }
    if (means.empty()) continue;
    for (double& v : ps.curve) v /= static_cast<double>(means.size());
    ps.curve_mean = eval::mean_se(means);
    if (!completion_means.empty()) {
      ps.num_to_complete = eval::mean_se(completion_means);
      ps.num_to_complete_instances = eval::mean_se(pooled);
    }
    for (double c : first_counts) ps.first_pick.push_back(first_total > 0.0 ? c / first_total : 0.0);
    s.policies.push_back(std::move(ps));
  }
  return s;
}

SeedResult run_seed(const ExperimentConfig& config, const data::Dataset& dataset, std::uint64_t seed,
                    const std::string& seed_dir, const RunOptions& options) {
  const auto start = std::chrono::steady_clock::now();
  const auto log = [&](const std::string& msg) {
    if (options.log) options.log("[" + config.name + " seed " + std::to_string(seed) + "] " + msg);
  };
  SeedResult result;
  result.seed = seed;
  try {
    const auto model_cfg = effective_model_config(config);
    const auto acq_cfg = effective_acq_config(config);
    const auto d = dataset.schema.size();
    const auto budget = config.budget == 0 ? d : config.budget;
    if (budget > d) throw ConfigError("budget " + std::to_string(budget) + " exceeds feature count " + std::to_string(d));
    const auto metric = config.metric.empty() ? eval::default_metric(dataset.num_classes)
                                              : eval::metric_from_string(config.metric);
    const auto test = head(dataset.test, config.eval_instances);
    const fs::path dir(seed_dir);
    if (!seed_dir.empty()) fs::create_directories(dir);

    const auto copula = data::CopulaTransform::fit(dataset.schema, dataset.train);
    const auto uses = [&](const char* p) {
      return std::find(config.policies.begin(), config.policies.end(), p) != config.policies.end();
    };
    const bool needs_sefa = uses("sefa");
    const bool needs_mlp = uses("random") || uses("fixed");

    model::SefaModel sefa;
    if (needs_sefa) {
      fs::path cached;
      if (!options.model_cache_dir.empty()) {
        fs::create_directories(options.model_cache_dir);
        cached = fs::path(options.model_cache_dir) / (training_key(config, seed) + ".sefa");
      }
      if (!cached.empty() && fs::exists(cached) && fs::exists(fs::path(cached).replace_extension(".history.json"))) {
        log("loading cached model " + cached.string());
        sefa = model::SefaModel::load(cached.string());
        std::ifstream in(fs::path(cached).replace_extension(".history.json"));
        result.history = history_from_json(json::parse(in));
      } else {
        Rng init(stream_seed(seed, Stream::model_init));
        sefa = model::SefaModel::create(dataset.schema, dataset.num_classes, copula, model_cfg, init);
        sefa.class_names = dataset.class_names;
        Rng train_rng(stream_seed(seed, Stream::training));
        const auto validator = eval::make_acquisition_validator(dataset.val, stream_seed(seed, Stream::validation));
        result.history = model::train(sefa, dataset, train_rng, validator, [&](const model::EpochRecord& e) {
          char buf[200];
          std::snprintf(buf, sizeof buf, "epoch %zu loss %.4f val_nll %.4f val_metric %.4f lr %.2g%s", e.epoch,
                        e.train_loss, e.val_nll, e.val_metric, e.learning_rate, e.improved ? " *" : "");
          log(buf);
        });
        if (!cached.empty()) {
          sefa.save(cached.string());
          write_text(fs::path(cached).replace_extension(".history.json"), history_to_json(result.history).dump());
        }
      }
      if (!seed_dir.empty()) {
        sefa.save((dir / "model.sefa").string());
        write_train_log(dir / "train_log.csv", result.history);
      }
    }

    baseline::MlpClassifier mlp;
    if (needs_mlp) {
      Rng mlp_rng(stream_seed(seed, Stream::baseline));
      mlp = baseline::MlpClassifier::create(dataset.schema, dataset.num_classes, copula, config.baseline, mlp_rng);
      const auto epochs = baseline::train_mlp(mlp, dataset, mlp_rng);
      log("baseline trained (" + std::to_string(epochs.size()) + " epochs)");
      if (!seed_dir.empty()) {
        std::ostringstream out;
        out.precision(17);
        out << "epoch,train_loss,val_nll,learning_rate\n";
        for (const auto& e : epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_nll << ',' << e.learning_rate << '\n';
        write_text(dir / "baseline_log.csv", out.str());
      }
    }

    const acq::SefaPredictor sefa_predictor(sefa, acq_cfg.predict_samples);
    for (const auto& name : config.policies) {
      acq::Policy policy;
      const acq::Predictor* predictor = &mlp;
      const model::SefaModel* scorer = nullptr;
      if (name == "sefa") {
        predictor = &sefa_predictor;
        scorer = &sefa;
      } else if (name == "random") {
        policy = acq::Policy::random();
      } else {
        result.fixed_ordering = acq::build_fixed_ordering(mlp, dataset.train, eval::metric_fn(metric),
                                                          stream_seed(seed, Stream::ordering));
        policy = acq::Policy::fixed(result.fixed_ordering);
      }
      log("evaluating " + name + " on " + std::to_string(test.size()) + " instances");
      auto evaluation = eval::evaluate_acquisition(policy, *predictor, scorer, test, metric, budget, acq_cfg,
                                                   stream_seed(seed, Stream::evaluation));
      PolicyResult pr;
      pr.policy = name;
      pr.curve = evaluation.curve;
      pr.curve_mean = evaluation.mean;
      if (test.has_relevant()) pr.completion = eval::num_to_complete(evaluation.trajectories, test.relevant, budget);
      pr.heat_map = eval::heat_map(evaluation.trajectories, budget, d);
      {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%s: mean %s %.4f", name.c_str(), eval::to_string(metric).c_str(), pr.curve_mean);
        std::string msg = buf;
        if (pr.completion) {
          std::snprintf(buf, sizeof buf, ", num-to-complete %.3f", pr.completion->summary.mean);
          msg += buf;
        }
        log(msg);
      }
      if (!seed_dir.empty()) {
        eval::write_curve_csv((dir / ("curve_" + name + ".csv")).string(), pr.curve);
        eval::write_heatmap_csv((dir / ("heatmap_" + name + ".csv")).string(), pr.heat_map, dataset.schema);
        if (config.export_trajectories) {
          eval::write_trajectories_csv((dir / ("trajectories_" + name + ".csv")).string(), evaluation.trajectories,
                                       dataset.num_classes);
        }
      }
      pr.trajectories = std::move(evaluation.trajectories);
      result.policies.push_back(std::move(pr));
    }
    result.ok = true;
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
    result.policies.clear();
    log(std::string("failed: ") + e.what());
  }
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

ExperimentOutput run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const auto hash = config_hash(config);
  const fs::path out_dir(config.output_dir);
  fs::create_directories(out_dir);

  std::mutex log_mutex;
  RunOptions opts = options;
  if (options.log) {
    opts.log = [&](const std::string& msg) {
      std::lock_guard lock(log_mutex);
      options.log(msg);
    };
  }

  const auto dataset = build_dataset(config.dataset);
  ExperimentOutput output;
  output.output_dir = out_dir.string();
  output.seeds.resize(config.seeds.size());

  const auto run_one = [&](std::size_t k) {
    const auto seed = config.seeds[k];
    const auto seed_dir = out_dir / ("seed_" + std::to_string(seed));
    const auto result_path = seed_dir / "result.json";
    if (opts.resume && fs::exists(result_path)) {
      try {
        std::ifstream in(result_path);
        const auto j = json::parse(in);
        if (j.value("config_hash", std::string()) == hash && j.value("ok", false)) {
          output.seeds[k] = seed_result_from_json(j);
          if (opts.log) opts.log("[" + config.name + " seed " + std::to_string(seed) + "] reusing " + result_path.string());
          return;
        }
      } catch (const std::exception&) {
        // Unreadable results are recomputed.
      }
    }
    output.seeds[k] = run_seed(config, dataset, seed, seed_dir.string(), opts);
    try {
      auto j = seed_result_to_json(output.seeds[k]);
      j["config_hash"] = hash;
      fs::create_directories(seed_dir);
      write_text(result_path, j.dump(2));
    } catch (const std::exception& e) {
      output.seeds[k].ok = false;
      output.seeds[k].error = std::string("writing results: ") + e.what();
    }
  };

  if (opts.parallel_seeds && config.seeds.size() > 1) {
    std::vector<std::thread> threads;
    for (std::size_t k = 0; k < config.seeds.size(); ++k) threads.emplace_back(run_one, k);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t k = 0; k < config.seeds.size(); ++k) run_one(k);
  }

  output.summary = summarize(config, output.seeds);
  write_text(out_dir / "summary.json", to_json(output.summary).dump(2) + "\n");

  std::ostringstream csv;
  csv.precision(17);
  csv << "policy,metric,curve_mean,curve_mean_se,num_to_complete,num_to_complete_se,"
         "num_to_complete_instances,num_to_complete_instances_se,seeds\n";
  for (const auto& p : output.summary.policies) {
    csv << p.policy << ',' << output.summary.metric << ',' << p.curve_mean.mean << ',' << p.curve_mean.se << ',';
    if (p.num_to_complete) {
      csv << p.num_to_complete->mean << ',' << p.num_to_complete->se << ',' << p.num_to_complete_instances->mean << ','
          << p.num_to_complete_instances->se;
    } else {
      csv << ",,,";
    }
    csv << ',' << p.curve_mean.n << '\n';
  }
  write_text(out_dir / "summary.csv", csv.str());

  json seeds = json::array();
  for (const auto& r : output.seeds) {
    seeds.push_back({{"seed", r.seed}, {"ok", r.ok}, {"error", r.error}, {"seconds", r.seconds}});
  }
  const json manifest{{"config", to_json(config)},
                      {"config_hash", hash},
                      {"seeds", seeds},
                      {"version", SEFA_VERSION},
                      {"compiler", __VERSION__},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return output;
}

}  // namespace sefa::exp
