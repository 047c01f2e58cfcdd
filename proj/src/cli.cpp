#include "sefa/cli.hpp"

#include "sefa/errors.hpp"
#include "sefa/eval_harness.hpp"
#include "sefa/experiment.hpp"
#include "sefa/oracles.hpp"
#include "sefa/service.hpp"

#include "CLI11.hpp"
#include "httplib.h"

#include <Eigen/Core>

#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace sefa::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

struct ConfigSource {
  std::string preset;
  std::string config_path;
  std::string ablation;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "Built-in experiment preset")
        ->check(CLI::IsMember(exp::preset_names()));
    app->add_option("--config", config_path, "Experiment config (JSON)")->check(CLI::ExistingFile);
    app->add_option("--ablation", ablation, "Ablation applied on top of the config")
        ->check(CLI::IsMember(std::vector<std::string>(std::begin(exp::kAblations), std::end(exp::kAblations))));
  }

  exp::ExperimentConfig load() const {
    if (preset.empty() == config_path.empty()) throw ConfigError("give exactly one of --preset or --config");
    auto config = preset.empty() ? exp::load_experiment_config(config_path) : exp::preset(preset);
    if (!ablation.empty()) {
      config = exp::with_ablation(std::move(config), ablation);
      config.name += "-" + ablation;
      if (!preset.empty()) config.output_dir = "runs/" + config.name;
    }
    return config;
  }
};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

void print_oracles(std::ostream& out) {
  out.setf(std::ios::fixed);
  out.precision(5);
  const auto ex = oracle::entropy_example_tables();
  out << "Entropy example: p(Y | x1, x2)\n";
  out << "x1 x2     p1      p2      p3      H\n";
  for (const auto& r : ex.joint) {
    out << ' ' << r.x1 << "  " << r.x2 << "  " << r.p[0] << ' ' << r.p[1] << ' ' << r.p[2] << ' ' << r.entropy << '\n';
  }
  out << "\nEntropy example: single-feature conditionals (H(Y) = " << ex.label_entropy << ")\n";
  out << "feature value    p1      p2      p3      H     gain\n";
  for (const auto& r : ex.marginals) {
    const int feature = r.x1 != 0 ? 1 : 2;
    const int value = r.x1 != 0 ? r.x1 : r.x2;
    out << "  x" << feature << "     " << value << "   " << r.p[0] << ' ' << r.p[1] << ' ' << r.p[2] << ' ' << r.entropy
        << ' ' << r.info_gain << '\n';
  }

  out << "\nIndicator problem (d binary features plus an indicator)\n";
  out << " d  greedy CMI   3 - 1/d    exp-CMI  exp-CMI score: indicator  other\n";
  for (std::size_t d = 3; d <= 8; ++d) {
    const auto joint = oracle::indicator_joint(d);
    const oracle::Assignment none(d + 1, oracle::kMissing);
    out << ' ' << d << "  " << oracle::greedy_cmi_expected_acquisitions(d) << "    "
        << 3.0 - 1.0 / static_cast<double>(d) << "  " << oracle::expected_cmi_acquisitions(d) << "    "
        << oracle::expected_cmi_objective(joint, d, none) << "             " << oracle::expected_cmi_objective(joint, 0, none) << '\n';
  }

  out << "\nRandom policy expected num-to-complete (11 features)\n";
  const std::vector<std::pair<std::size_t, double>> syn12{{3, 0.5}, {5, 0.5}};
  const std::vector<std::pair<std::size_t, double>> syn3{{5, 1.0}};
  out << "  syn1 " << oracle::random_policy_expected_steps(11, syn12) << '\n';
  out << "  syn2 " << oracle::random_policy_expected_steps(11, syn12) << '\n';
  out << "  syn3 " << oracle::random_policy_expected_steps(11, syn3) << '\n';
}

json evaluation_json(const std::string& policy, const eval::Evaluation& e,
                     const std::optional<eval::CompletionStats>& completion) {
  json j{{"policy", policy},
         {"metric", eval::to_string(e.curve.kind)},
         {"curve", e.curve.values},
         {"curve_mean", e.mean}};
  if (completion) {
    j["num_to_complete"] = {{"mean", completion->summary.mean},
                            {"se", completion->summary.se},
                            {"n", completion->summary.n},
                            {"overruns", completion->overruns}};
  }
  return j;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"SEFA active feature acquisition"};
  app.require_subcommand(1);
  app.set_version_flag("--version", version_string());

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset as CSV");
  exp::DatasetSpec gen_spec;
  std::string gen_out;
  gen->add_option("--dataset", gen_spec.generator, "syn1, syn2, syn3, cube or indicator")
      ->check(CLI::IsMember({"syn1", "syn2", "syn3", "cube", "indicator"}));
  gen->add_option("--train", gen_spec.sizes.train, "Training instances");
  gen->add_option("--val", gen_spec.sizes.val, "Validation instances");
  gen->add_option("--test", gen_spec.sizes.test, "Test instances");
  gen->add_option("--seed", gen_spec.seed, "Data seed");
  gen->add_option("--noise", gen_spec.noise_sigma, "Feature noise standard deviation");
  gen->add_option("--indicator-d", gen_spec.indicator_d, "Binary features of the indicator problem");
  gen->add_option("--out", gen_out, "Output CSV path")->required();

  // train
  auto* train = app.add_subcommand("train", "Train a SEFA model");
  ConfigSource train_src;
  train_src.add(train);
  std::string train_out;
  std::string train_log;
  std::uint64_t train_seed = 1;
  std::size_t train_epochs = 0;
  train->add_option("--out", train_out, "Model file to write")->required();
  train->add_option("--log", train_log, "Optional per-epoch CSV log");
  train->add_option("--seed", train_seed, "Run seed");
  train->add_option("--epochs", train_epochs, "Override the number of epochs");

  // eval
  auto* evaluate = app.add_subcommand("eval", "Evaluate a trained model on the config's test split");
  ConfigSource eval_src;
  eval_src.add(evaluate);
  std::string eval_model;
  std::string eval_out;
  std::string eval_policies = "sefa,random";
  std::uint64_t eval_seed = 1;
  std::size_t eval_instances = 0;
  evaluate->add_option("--model", eval_model, "Model file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--out", eval_out, "Output directory")->required();
  evaluate->add_option("--policies", eval_policies, "Comma-separated subset of sefa,random (random uses the model's predictions)");
  evaluate->add_option("--seed", eval_seed, "Evaluation seed");
  evaluate->add_option("--instances", eval_instances, "Test instances (0 = config value)");

  // acquire
  auto* acquire = app.add_subcommand("acquire", "Score features for one partially observed instance");
  std::string acq_model;
  std::vector<std::string> acq_observe;
  std::uint64_t acq_seed = 0;
  acquire->add_option("--model", acq_model, "Model file")->required()->check(CLI::ExistingFile);
  acquire->add_option("--observe", acq_observe, "Observed value as name=value (repeatable)");
  acquire->add_option("--seed", acq_seed, "Sampling seed");

  // oracle
  auto* oracle_cmd = app.add_subcommand("oracle", "Print exact oracle tables and values");

  // serve
  auto* serve = app.add_subcommand("serve", "Run the HTTP acquisition service");
  std::vector<std::string> serve_models;
  std::string serve_host = "127.0.0.1";
  int serve_port = 8080;
  std::string serve_ui;
  long long serve_ttl = 3600;
  serve->add_option("--model", serve_models, "Model as id=path or path (repeatable)")->required();
  serve->add_option("--host", serve_host, "Bind address");
  serve->add_option("--port", serve_port, "Port")->check(CLI::Range(0, 65535));
  serve->add_option("--ui-dir", serve_ui, "Static console bundle served under /ui");
  serve->add_option("--ttl", serve_ttl, "Idle session lifetime in seconds")->check(CLI::PositiveNumber);

  // run
  auto* run_cmd = app.add_subcommand("run", "Full pipeline: train, evaluate and summarize every seed");
  ConfigSource run_src;
  run_src.add(run_cmd);
  std::string run_seeds;
  std::string run_out;
  std::string run_cache;
  bool run_parallel = false;
  bool run_resume = false;
  bool run_print = false;
  run_cmd->add_option("--seeds", run_seeds, "Comma-separated seeds overriding the config");
  run_cmd->add_option("--out", run_out, "Output directory overriding the config");
  run_cmd->add_option("--model-cache", run_cache, "Directory of trained models shared between runs");
  run_cmd->add_flag("--parallel-seeds", run_parallel, "Run seeds concurrently");
  run_cmd->add_flag("--resume", run_resume, "Reuse finished seeds with the same config hash");
  run_cmd->add_flag("--print-config", run_print, "Print the resolved config and exit");

  std::vector<const char*> argv{"sefa"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::Success& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str() << r.str();
    return code == 0 ? kExitOk : kExitConfig;
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    app.exit(e, o, r);
    err << r.str() << o.str();
    return kExitConfig;
  }

  const auto log = [&err](const std::string& msg) { err << msg << std::endl; };

  if (*gen) {
    const auto ds = exp::build_dataset(gen_spec);
    ensure_parent(gen_out);
    data::export_csv(ds, gen_out);
    out << "wrote " << ds.train.size() + ds.val.size() + ds.test.size() << " rows to " << gen_out << '\n';
    return kExitOk;
  }

  if (*train) {
    auto config = train_src.load();
    if (train_epochs > 0) config.model.epochs = train_epochs;
    config.validate();
    const auto ds = exp::build_dataset(config.dataset);
    const auto copula = data::CopulaTransform::fit(ds.schema, ds.train);
    Rng init(exp::stream_seed(train_seed, exp::Stream::model_init));
    auto model = model::SefaModel::create(ds.schema, ds.num_classes, copula, exp::effective_model_config(config), init);
    model.class_names = ds.class_names;
    Rng rng(exp::stream_seed(train_seed, exp::Stream::training));
    const auto validator = eval::make_acquisition_validator(ds.val, exp::stream_seed(train_seed, exp::Stream::validation));
    const auto history = model::train(model, ds, rng, validator, [&](const model::EpochRecord& e) {
      log("epoch " + std::to_string(e.epoch) + " loss " + fmt("%.4f", e.train_loss) + " val_metric " +
          fmt("%.4f", e.val_metric) + (e.improved ? " *" : ""));
    });
    ensure_parent(train_out);
    model.save(train_out);
    if (!train_log.empty()) {
      ensure_parent(train_log);
      std::ofstream f(train_log);
      f.precision(17);
      f << "epoch,train_loss,val_nll,val_kl,val_metric,learning_rate,improved\n";
      for (const auto& e : history.epochs) {
        f << e.epoch << ',' << e.train_loss << ',' << e.val_nll << ',' << e.val_kl << ',' << e.val_metric << ','
          << e.learning_rate << ',' << (e.improved ? 1 : 0) << '\n';
      }
    }
    out << "best epoch " << history.best_epoch << " validation metric " << fmt("%.6f", history.best_metric) << '\n';
    out << "wrote " << train_out << '\n';
    return kExitOk;
  }

  if (*evaluate) {
    const auto config = eval_src.load();
    const auto model = model::SefaModel::load(eval_model);
    const auto ds = exp::build_dataset(config.dataset);
    if (ds.schema.size() != model.num_features() || ds.num_classes != model.num_classes()) {
      throw ConfigError("model does not match the config's dataset");
    }
    const auto acq_cfg = exp::effective_acq_config(config);
    const auto metric = config.metric.empty() ? eval::default_metric(ds.num_classes) : eval::metric_from_string(config.metric);
    const auto budget = config.budget == 0 ? ds.schema.size() : config.budget;
    data::Split test = ds.test;
    const auto count = eval_instances > 0 ? eval_instances : config.eval_instances;
    if (count > 0 && count < test.size()) {
      test.instances.resize(count);
      test.labels.resize(count);
      if (test.has_relevant()) test.relevant.resize(count);
    }
    fs::create_directories(eval_out);
    const acq::SefaPredictor predictor(model, acq_cfg.predict_samples);
    json results = json::array();
    for (const auto& name : split_list(eval_policies)) {
      if (name != "sefa" && name != "random") throw ConfigError("eval: unknown policy '" + name + "'");
      const auto policy = name == "sefa" ? acq::Policy::sefa() : acq::Policy::random();
      log("evaluating " + name + " on " + std::to_string(test.size()) + " instances");
      const auto e = eval::evaluate_acquisition(policy, predictor, &model, test, metric, budget, acq_cfg,
                                                exp::stream_seed(eval_seed, exp::Stream::evaluation));
      std::optional<eval::CompletionStats> completion;
      if (test.has_relevant()) completion = eval::num_to_complete(e.trajectories, test.relevant, budget);
      const auto dir = fs::path(eval_out);
      eval::write_curve_csv((dir / ("curve_" + name + ".csv")).string(), e.curve);
      eval::write_heatmap_csv((dir / ("heatmap_" + name + ".csv")).string(), eval::heat_map(e.trajectories, budget, ds.schema.size()),
                              ds.schema);
      eval::write_trajectories_csv((dir / ("trajectories_" + name + ".csv")).string(), e.trajectories, ds.num_classes);
      results.push_back(evaluation_json(name, e, completion));
      out << name << ": mean " << eval::to_string(metric) << ' ' << fmt("%.4f", e.mean);
      if (completion) out << ", num-to-complete " << fmt("%.3f", completion->summary.mean);
      out << '\n';
    }
    std::ofstream(fs::path(eval_out) / "eval.json") << results.dump(2) << '\n';
    return kExitOk;
  }

  if (*acquire) {
    service::AcquireService svc;
    svc.add_model("model", model::SefaModel::load(acq_model));
    json body{{"seed", acq_seed}, {"observations", json::array()}};
    for (const auto& o : acq_observe) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("--observe expects name=value, got '" + o + "'");
      body["observations"].push_back({{"feature", o.substr(0, eq)}, {"value", o.substr(eq + 1)}});
    }
    const auto reply = svc.handle("POST", "/models/model/sessions", body.dump());
    if (reply.status >= 400) {
      err << reply.body.dump() << '\n';
      return reply.status == 400 || reply.status == 409 ? kExitConfig : kExitRuntime;
    }
    auto state = reply.body;
    state.erase("session_id");
    state.erase("model_id");
    out << state.dump(2) << '\n';
    return kExitOk;
  }

  if (*oracle_cmd) {
    print_oracles(out);
    return kExitOk;
  }

  if (*serve) {
    service::ServiceOptions options;
    options.ui_dir = serve_ui;
    options.session_ttl = std::chrono::seconds(serve_ttl);
    service::AcquireService svc(options);
    for (const auto& spec : serve_models) {
      const auto eq = spec.find('=');
      const std::string path = eq == std::string::npos ? spec : spec.substr(eq + 1);
      const std::string id = eq == std::string::npos ? fs::path(path).stem().string() : spec.substr(0, eq);
      svc.add_model(id, model::SefaModel::load(path));
      log("loaded model '" + id + "' from " + path);
    }
    httplib::Server server;
    svc.mount(server);
    g_server = &server;
    std::signal(SIGINT, stop_server);
    std::signal(SIGTERM, stop_server);
    const int port = serve_port == 0 ? server.bind_to_any_port(serve_host) : (server.bind_to_port(serve_host, serve_port) ? serve_port : -1);
    if (port < 0) throw std::runtime_error("cannot bind " + serve_host + ":" + std::to_string(serve_port));
    log("listening on http://" + serve_host + ":" + std::to_string(port));
    const bool ok = server.listen_after_bind();
    g_server = nullptr;
    return ok ? kExitOk : kExitRuntime;
  }

  if (*run_cmd) {
    auto config = run_src.load();
    if (!run_seeds.empty()) {
      config.seeds.clear();
      for (const auto& s : split_list(run_seeds)) {
        try {
          config.seeds.push_back(std::stoull(s));
        } catch (const std::exception&) {
          throw ConfigError("--seeds: '" + s + "' is not a seed");
        }
      }
    }
    if (!run_out.empty()) config.output_dir = run_out;
    config.validate();
    if (run_print) {
      out << exp::to_json(config).dump(2) << '\n';
      return kExitOk;
    }
    exp::RunOptions options;
    options.parallel_seeds = run_parallel;
    options.resume = run_resume;
    options.model_cache_dir = run_cache;
    options.log = log;
    const auto result = exp::run_experiment(config, options);
    out << "summary (" << result.summary.seeds_ok << " seeds ok, " << result.summary.seeds_failed << " failed):\n";
    for (const auto& p : result.summary.policies) {
      out << "  " << p.policy << ": " << result.summary.metric << ' ' << fmt("%.4f", p.curve_mean.mean) << " +- "
          << fmt("%.4f", p.curve_mean.se);
      if (p.num_to_complete) {
        out << ", num-to-complete " << fmt("%.3f", p.num_to_complete->mean) << " +- " << fmt("%.3f", p.num_to_complete->se);
      }
      out << '\n';
    }
    out << "artifacts in " << result.output_dir << '\n';
    return result.summary.seeds_failed == 0 ? kExitOk : kExitRuntime;
  }
  return kExitConfig;
}

}  // namespace

std::string version_string() {
  return std::string("sefa ") + SEFA_VERSION + " (" + __VERSION__ + ", Eigen " + std::to_string(EIGEN_WORLD_VERSION) +
         "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION) + ")";
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace sefa::cli
