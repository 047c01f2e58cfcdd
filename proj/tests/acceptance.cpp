// Acceptance checks: one PASS/FAIL line per criterion with pinned tolerances.
//
//   sefa_acceptance [--only oracle,properties,syn,heatmap,ablation,cube] [--out DIR] [--fresh] [--quick]
//
// Experiment criteria reuse finished seeds in --out when the config hash matches
// (runs are deterministic); --fresh deletes DIR first. --quick shrinks the
// experiments to a smoke test and labels every line accordingly.

#include "sefa/acquisition.hpp"
#include "sefa/datasets.hpp"
#include "sefa/eval_harness.hpp"
#include "sefa/experiment.hpp"
#include "sefa/nn_core.hpp"
#include "sefa/oracles.hpp"
#include "sefa/sefa_model.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace sefa;
namespace fs = std::filesystem;

namespace {

struct Line {
  std::string name;
  bool pass = false;
  std::string detail;
};

std::vector<Line> g_lines;
bool g_quick = false;

void report(const std::string& name, bool pass, const std::string& detail) {
  const std::string label = g_quick ? "[quick] " + name : name;
  g_lines.push_back({label, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << label << " | " << detail << std::endl;
}

std::string num(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

// ---------------------------------------------------------------- oracles

struct Mismatch {
  double worst = 0.0;
  void add(double got, double expected) { worst = std::max(worst, std::abs(got - expected)); }
};

void check_oracles() {
  // Published joint table: p(Y | x1, x2) for x1, x2 in 1..3, row-major.
  const double joint[9][3] = {{0.10037, 0.44982, 0.44982}, {0.00000, 0.99850, 0.00150}, {0.00000, 0.00150, 0.99850},
                              {0.99850, 0.00000, 0.00150}, {0.44982, 0.10037, 0.44982}, {0.00150, 0.00000, 0.99850},
                              {0.99850, 0.00150, 0.00000}, {0.00150, 0.99850, 0.00000}, {0.44982, 0.44982, 0.10037}};
  // Published single-feature table: x1 = 1..3 then x2 = 1..3; p1, p2, p3, H, gain.
  const double marginal[6][5] = {{0.03346, 0.48327, 0.48327, 0.81652, 0.28210},
                                 {0.48327, 0.03346, 0.48327, 0.81652, 0.28210},
                                 {0.48327, 0.48327, 0.03346, 0.81652, 0.28210},
                                 {0.69912, 0.15044, 0.15044, 0.82016, 0.27845},
                                 {0.15044, 0.69912, 0.15044, 0.82016, 0.27845},
                                 {0.15044, 0.15044, 0.69912, 0.82016, 0.27845}};
  const auto ex = oracle::entropy_example_tables();
  Mismatch tables;
  bool layout = ex.joint.size() == 9 && ex.marginals.size() == 6;
  if (layout) {
    for (std::size_t r = 0; r < 9; ++r) {
      const auto& row = ex.joint[r];
      layout = layout && row.x1 == static_cast<int>(r / 3 + 1) && row.x2 == static_cast<int>(r % 3 + 1);
      for (int c = 0; c < 3; ++c) tables.add(row.p[c], joint[r][c]);
    }
    for (std::size_t r = 0; r < 6; ++r) {
      const auto& row = ex.marginals[r];
      const bool first = r < 3;
      const int value = static_cast<int>(r % 3 + 1);
      layout = layout && (first ? row.x1 == value && row.x2 == 0 : row.x1 == 0 && row.x2 == value);
      for (int c = 0; c < 3; ++c) tables.add(row.p[c], marginal[r][c]);
      tables.add(row.entropy, marginal[r][3]);
      tables.add(row.info_gain, marginal[r][4]);
    }
  }

  double cmi_err = 0.0;
  double ecmi_err = 0.0;
  bool ecmi_first = true;
  for (std::size_t d = 3; d <= 8; ++d) {
    cmi_err = std::max(cmi_err, std::abs(oracle::greedy_cmi_expected_acquisitions(d) - (3.0 - 1.0 / static_cast<double>(d))));
    ecmi_err = std::max(ecmi_err, std::abs(oracle::expected_cmi_acquisitions(d) - 2.0));
    const auto first = oracle::greedy_first_choices(oracle::indicator_joint(d), oracle::Objective::expected_cmi);
    ecmi_first = ecmi_first && first == std::vector<std::size_t>{d};
  }
  const auto j3 = oracle::indicator_joint(3);
  const oracle::Assignment none(4, oracle::kMissing);
  const double indicator_score = oracle::expected_cmi_objective(j3, 3, none);
  double other_err = 0.0;
  for (std::size_t i = 0; i < 3; ++i) other_err = std::max(other_err, std::abs(oracle::expected_cmi_objective(j3, i, none) - 0.231));
  const double score_err = std::max(std::abs(indicator_score - 0.477), other_err);

  const bool pass = layout && tables.worst <= 1e-4 && cmi_err <= 1e-12 && ecmi_err <= 1e-12 && ecmi_first &&
                    score_err <= 1e-3;
  report("oracle exactness", pass,
         "tables max|err| " + sci(tables.worst) + " (tol 1e-4); greedy CMI vs 3-1/d " + sci(cmi_err) +
             " (tol 1e-12); expected-CMI acquisitions vs 2 " + sci(ecmi_err) + " (tol 1e-12); expected-CMI picks indicator first " +
             (ecmi_first ? "yes" : "no") + "; d=3 scores " + num(indicator_score) + " vs 0.477, others within " +
             sci(other_err) + " of 0.231 (tol 1e-3)");
}

// ------------------------------------------------------------- properties

using MatD = nn::MatrixT<double>;

// Max over tensors of ||fd - analytic|| / ||analytic|| for a double MLP with batch norm.
double mlp_fd_error() {
  Rng rng(11);
  nn::MlpShape shape{5, {7, 6}, 3, true};
  auto params = nn::make_mlp<double>(shape, rng);
  for (auto& layer : params.layers) {
    if (layer.batch_norm) {
      for (Eigen::Index k = 0; k < layer.bn_scale.size(); ++k) {
        layer.bn_scale(k) = 0.5 + rng.uniform();
        layer.bn_shift(k) = rng.normal() * 0.1;
      }
    }
  }
  MatD x(9, 5), w(9, 3);
  for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = rng.normal();
  for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = rng.normal();
  const auto loss = [&](nn::MlpParamsT<double> p, const MatD& in) {
    return nn::mlp_forward<double>(p, in, nn::Mode::train).cwiseProduct(w).sum();
  };
  nn::MlpCacheT<double> cache;
  auto copy = params;
  nn::mlp_forward<double>(copy, x, nn::Mode::train, &cache);
  nn::MlpGradsT<double> grads;
  MatD dx;
  nn::mlp_backward<double>(copy, cache, w, &grads, &dx);

  const double h = 1e-6;
  double worst = 0.0;
  std::vector<std::span<double>> ps;
  std::vector<std::span<double>> gs;
  nn::append_parameters(params, ps);
  nn::append_gradients(grads, gs);
  for (std::size_t t = 0; t < ps.size(); ++t) {
    double num2 = 0.0, den2 = 0.0;
    for (std::size_t k = 0; k < ps[t].size(); ++k) {
      const double saved = ps[t][k];
      ps[t][k] = saved + h;
      const double up = loss(params, x);
      ps[t][k] = saved - h;
      const double down = loss(params, x);
      ps[t][k] = saved;
      const double fd = (up - down) / (2 * h);
      num2 += (fd - gs[t][k]) * (fd - gs[t][k]);
      den2 += gs[t][k] * gs[t][k];
    }
    worst = std::max(worst, std::sqrt(num2) / std::max(std::sqrt(den2), 1e-12));
  }
  double num2 = 0.0, den2 = 0.0;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    MatD up = x, down = x;
    up.data()[k] += h;
    down.data()[k] -= h;
    const double fd = (loss(params, up) - loss(params, down)) / (2 * h);
    num2 += (fd - dx.data()[k]) * (fd - dx.data()[k]);
    den2 += dx.data()[k] * dx.data()[k];
  }
  return std::max(worst, std::sqrt(num2) / std::sqrt(den2));
}

double softmax_adjoint_fd_error() {
  Rng rng(12);
  MatD logits(4, 5);
  for (Eigen::Index k = 0; k < logits.size(); ++k) logits.data()[k] = rng.normal();
  double worst = 0.0;
  for (Eigen::Index c = 0; c < 5; ++c) {
    const MatD adj = nn::softmax_probability_adjoint<double>(nn::softmax_rows<double>(logits), c);
    const double h = 1e-6;
    double num2 = 0.0, den2 = 0.0;
    for (Eigen::Index k = 0; k < logits.size(); ++k) {
      MatD up = logits, down = logits;
      up.data()[k] += h;
      down.data()[k] -= h;
      const Eigen::Index r = k / logits.cols();
      const double fd = (nn::softmax_rows<double>(up)(r, c) - nn::softmax_rows<double>(down)(r, c)) / (2 * h);
      num2 += (fd - adj.data()[k]) * (fd - adj.data()[k]);
      den2 += adj.data()[k] * adj.data()[k];
    }
    worst = std::max(worst, std::sqrt(num2) / std::sqrt(den2));
  }
  return worst;
}

// Directional derivative of the full SEFA loss (float) along random parameter directions.
double sefa_fd_error() {
  data::SplitSizes sizes{64, 8, 8};
  const auto ds = data::gen_indicator(3, sizes, 5);
  auto syn = data::gen_syn(1, sizes, 0.0, 6);
  // Mixed schema: the indicator problem's categorical features plus two continuous columns.
  data::FeatureSchema schema = ds.schema;
  schema.features.push_back({"c0", data::FeatureKind::continuous, 0, {}});
  schema.features.push_back({"c1", data::FeatureKind::continuous, 0, {}});
  std::vector<data::MaskedInstance> batch;
  std::vector<int> labels;
  for (std::size_t n = 0; n < 16; ++n) {
    auto inst = ds.train.instances[n];
    inst.values.push_back(syn.train.instances[n].values[0]);
    inst.values.push_back(syn.train.instances[n].values[1]);
    inst.mask.push_back(1);
    inst.mask.push_back(1);
    batch.push_back(inst);
    labels.push_back(ds.train.labels[n]);
  }
  model::SefaConfig cfg;
  cfg.latent_dim = 2;
  cfg.encoder_width = 6;
  cfg.predictor_width = 8;
  cfg.train_samples = 3;
  cfg.beta = 0.05;
  Rng rng(7);
  data::Split fit_split;
  fit_split.instances = batch;
  fit_split.labels = labels;
  auto model = model::SefaModel::create(schema, ds.num_classes, data::CopulaTransform::fit(schema, fit_split), cfg, rng);
  // Freshly initialized biases are zero, which puts missing-feature rows exactly on a ReLU kink.
  Rng jitter(8);
  for (auto tensor : model.parameters()) {
    for (auto& x : tensor) x += static_cast<float>(0.1 * jitter.normal());
  }
  model.bump_revision();
  std::vector<data::MaskedInstance> prepared;
  for (const auto& inst : batch) prepared.push_back(model.prepare(inst));

  const auto net = model.to_double();
  const auto loss_at = [&](model::SefaNetT<double> m) {
    Rng r(99);
    return model::loss_and_grads(m, prepared, labels, r, nullptr).loss;
  };
  model::SefaGradsT<double> grads;
  {
    auto copy = net;
    Rng r(99);
    model::loss_and_grads(copy, prepared, labels, r, &grads);
  }
  const auto gs = model::SefaNetT<double>::gradients(grads);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    Rng dir(1000 + static_cast<std::uint64_t>(trial));
    auto plus = net;
    auto minus = net;
    auto pp = plus.parameters();
    auto pm = minus.parameters();
    const double h = 1e-6;
    double analytic = 0.0;
    for (std::size_t t = 0; t < pp.size(); ++t) {
      for (std::size_t k = 0; k < pp[t].size(); ++k) {
        const double v = dir.normal();
        analytic += v * gs[t][k];
        pp[t][k] += h * v;
        pm[t][k] -= h * v;
      }
    }
    plus.bump_revision();
    minus.bump_revision();
    const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic) / std::max(std::abs(analytic), 1e-8));
  }
  return worst;
}

double kl_quadrature_error() {
  Rng rng(21);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const float mu = static_cast<float>(rng.normal() * 2.0);
    const float sigma = static_cast<float>(std::exp(rng.normal()));
    const double m = mu, s = sigma;
    // Simpson's rule on KL = int q log(q / p).
    const int n = 20000;
    const double lo = m - 14 * s, hi = m + 14 * s, step = (hi - lo) / n;
    double acc = 0.0;
    for (int k = 0; k <= n; ++k) {
      const double z = lo + k * step;
      const double log_q = -0.5 * std::log(2 * M_PI) - std::log(s) - 0.5 * (z - m) * (z - m) / (s * s);
      const double log_p = -0.5 * std::log(2 * M_PI) - 0.5 * z * z;
      const double f = std::exp(log_q) * (log_q - log_p);
      acc += f * (k == 0 || k == n ? 1.0 : (k % 2 ? 4.0 : 2.0));
    }
    const double numeric = acc * step / 3.0;
    const float mus[1] = {mu};
    const float sigmas[1] = {sigma};
    worst = std::max(worst, std::abs(model::gaussian_kl(mus, sigmas, false) - numeric));
  }
  return worst;
}

void check_properties() {
  const double fd_mlp = mlp_fd_error();
  const double fd_softmax = softmax_adjoint_fd_error();
  const double fd_sefa = sefa_fd_error();
  const double kl_err = kl_quadrature_error();

  // Scoring invariants on a briefly trained Syn 1 model.
  const auto ds = data::gen_syn(1, {4000, 500, 500}, 0.0, 31);
  model::SefaConfig cfg;
  cfg.epochs = 2;
  cfg.val_instances = 100;
  Rng rng(32);
  auto model = model::SefaModel::create(ds.schema, 2, data::CopulaTransform::fit(ds.schema, ds.train), cfg, rng);
  model::train(model, ds, rng, [](const model::SefaModel&) { return 0.0; });

  std::vector<data::MaskedInstance> states;
  Rng mask_rng(33);
  for (std::size_t n = 0; n < 50; ++n) {
    const auto mask = data::subsample_mask(ds.test.instances[n].mask, mask_rng);
    states.push_back(data::restrict_to(ds.schema, ds.test.instances[n], mask));
  }
  acq::AcqConfig weighted;
  weighted.predict_samples = 64;
  weighted.score_samples = 64;
  acq::AcqConfig unweighted = weighted;
  unweighted.probability_weighting = false;
  double sum_err = 0.0;
  double weighting_diff = 0.0;
  bool masked_zero = true;
  for (std::size_t n = 0; n < states.size(); ++n) {
    Rng a(derive_seed(40, n)), b(derive_seed(40, n));
    const auto sw = acq::score_features(model, states[n], weighted, a);
    const auto su = acq::score_features(model, states[n], unweighted, b);
    sum_err = std::max(sum_err, std::abs(std::accumulate(sw.unmasked.begin(), sw.unmasked.end(), 0.0) - 1.0));
    for (std::size_t i = 0; i < sw.scores.size(); ++i) {
      weighting_diff = std::max(weighting_diff, std::abs(sw.scores[i] - su.scores[i]));
      if (states[n].mask[i] && sw.scores[i] != 0.0) masked_zero = false;
    }
  }

  // Determinism and batching invariance of trajectories.
  data::Split few;
  for (std::size_t n = 0; n < 6; ++n) {
    few.instances.push_back(ds.test.instances[n]);
    few.labels.push_back(ds.test.labels[n]);
  }
  acq::AcqConfig small;
  small.predict_samples = 16;
  small.score_samples = 16;
  const acq::SefaPredictor predictor(model, small.predict_samples);
  const auto e1 = eval::evaluate_acquisition(acq::Policy::sefa(), predictor, &model, few, eval::MetricKind::auroc, 11, small, 5);
  const auto e2 = eval::evaluate_acquisition(acq::Policy::sefa(), predictor, &model, few, eval::MetricKind::auroc, 11, small, 5);
  bool deterministic = true;
  bool batch_invariant = true;
  bool no_repeats = true;
  double batch_gap = 0.0;
  for (std::size_t n = 0; n < few.size(); ++n) {
    deterministic = deterministic && e1.trajectories[n].acquired() == e2.trajectories[n].acquired();
    Rng solo(derive_seed(5, n));
    const auto single = acq::run_trajectory(acq::Policy::sefa(), model, few.instances[n], 11, small, solo);
    batch_invariant = batch_invariant && single.acquired() == e1.trajectories[n].acquired();
    for (std::size_t t = 0; t < single.steps.size(); ++t) {
      for (std::size_t c = 0; c < single.steps[t].class_probs.size(); ++c) {
        batch_gap = std::max(batch_gap, std::abs(single.steps[t].class_probs[c] - e1.trajectories[n].steps[t].class_probs[c]));
      }
    }
    const auto acquired = e1.trajectories[n].acquired();
    no_repeats = no_repeats && std::set<std::size_t>(acquired.begin(), acquired.end()).size() == acquired.size();
  }

  const bool pass = fd_mlp <= 1e-4 && fd_softmax <= 1e-4 && fd_sefa <= 1e-4 && kl_err <= 1e-6 && sum_err <= 1e-6 &&
                    weighting_diff <= 1e-6 && masked_zero && deterministic && batch_invariant && batch_gap <= 1e-5 && no_repeats;
  report("property suite", pass,
         "FD rel err mlp " + sci(fd_mlp) + ", softmax " + sci(fd_softmax) + ", sefa loss " + sci(fd_sefa) +
             " (tol 1e-4); KL vs quadrature " + sci(kl_err) + " (tol 1e-6); sum R - 1 " + sci(sum_err) +
             " (tol 1e-6); binary weighting diff " + sci(weighting_diff) + " on 50 instances (tol 1e-6); masking " +
             (masked_zero && no_repeats ? "ok" : "violated") + "; determinism " + (deterministic ? "ok" : "violated") +
             "; batching " + (batch_invariant ? "same choices" : "different choices") + ", max prob gap " + sci(batch_gap) +
             " (tol 1e-5)");
}

// ------------------------------------------------------------ experiments

struct Runner {
  fs::path out;
  exp::RunOptions options;
  std::map<std::string, exp::Summary> cache;

  exp::ExperimentConfig shrink(exp::ExperimentConfig c) const {
    if (!g_quick) return c;
    c.dataset.sizes = {3000, 500, 500};
    c.model.epochs = 2;
    c.model.val_instances = 100;
    c.baseline.epochs = 5;
    c.eval_instances = 300;
    return c;
  }

  const exp::Summary& run(const std::string& key, exp::ExperimentConfig config) {
    const auto it = cache.find(key);
    if (it != cache.end()) return it->second;
    config = shrink(std::move(config));
    config.name = key;
    config.output_dir = (out / key).string();
    std::cerr << "== running " << key << " (" << config.seeds.size() << " seeds) into " << config.output_dir << std::endl;
    const auto result = exp::run_experiment(config, options);
    return cache.emplace(key, result.summary).first->second;
  }
};

double ntc(const exp::Summary& s, const std::string& policy) {
  const auto* p = s.find(policy);
  return p && p->num_to_complete ? p->num_to_complete->mean : std::nan("");
}

double curve_mean(const exp::Summary& s, const std::string& policy) {
  const auto* p = s.find(policy);
  return p ? p->curve_mean.mean : std::nan("");
}

std::string failures(const exp::Summary& s) {
  return s.seeds_failed == 0 ? "" : " [" + std::to_string(s.seeds_failed) + " seed(s) failed]";
}

void check_syn(Runner& runner) {
  const double bound[3] = {4.5, 4.7, 5.6};
  const double random_expected[3] = {9.5, 9.5, 10.0};
  bool pass = true;
  std::string detail;
  for (int v = 1; v <= 3; ++v) {
    const auto name = "syn" + std::to_string(v);
    const auto& s = runner.run(name, exp::preset(name));
    const double sefa = ntc(s, "sefa"), random = ntc(s, "random"), fixed = ntc(s, "fixed");
    const bool ok = s.seeds_failed == 0 && s.seeds_ok == 3 && sefa <= bound[v - 1] &&
                    std::abs(random - random_expected[v - 1]) <= 0.1 && sefa < fixed;
    pass = pass && ok;
    detail += (detail.empty() ? "" : "; ") + name + " sefa " + num(sefa, 3) + " (<= " + num(bound[v - 1], 1) +
              "), random " + num(random, 3) + " (" + num(random_expected[v - 1], 1) + " +- 0.1), fixed " + num(fixed, 3) +
              failures(s);
  }
  report("syn1-3 num-to-complete", pass, detail);
}

void check_heatmap(Runner& runner) {
  const auto& s = runner.run("syn3", exp::preset("syn3"));
  const auto* p = s.find("sefa");
  const double share = p && p->first_pick.size() == 11 ? p->first_pick[10] : std::nan("");
  report("syn3 heat map first pick", share >= 0.90 && s.seeds_failed == 0,
         "feature 11 acquired first in " + num(100.0 * share, 1) + "% of SEFA test trajectories (>= 90%)" + failures(s));
}

void check_ablation(Runner& runner) {
  const auto& full = runner.run("syn3", exp::preset("syn3"));
  auto base = exp::preset("syn3");
  base.policies = {"sefa"};
  const auto& det = runner.run("syn3-deterministic", exp::with_ablation(base, "deterministic"));
  const auto& one = runner.run("syn3-one-acq-sample", exp::with_ablation(base, "one-acq-sample"));
  const double f = ntc(full, "sefa"), d = ntc(det, "sefa"), o = ntc(one, "sefa");
  const bool ok = full.seeds_failed == 0 && det.seeds_failed == 0 && one.seeds_failed == 0 && d > f && o > f;
  report("syn3 ablation direction", ok,
         "full " + num(f, 3) + ", deterministic encoder " + num(d, 3) + ", one acquisition sample " + num(o, 3) +
             " (both must exceed full)" + failures(full) + failures(det) + failures(one));
}

void check_cube(Runner& runner) {
  const auto& s = runner.run("cube", exp::preset("cube"));
  const double sefa = curve_mean(s, "sefa"), random = curve_mean(s, "random");
  const bool ok = s.seeds_failed == 0 && s.seeds_ok == 3 && sefa >= 0.88 && sefa - random >= 0.15;
  report("cube acquisition accuracy", ok,
         "sefa mean accuracy " + num(sefa) + " (>= 0.88), random " + num(random) + ", gap " + num(sefa - random) +
             " (>= 0.15)" + failures(s));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string only = "oracle,properties,syn,heatmap,ablation,cube";
  std::string out = "acceptance_runs";
  bool fresh = false;
  bool verbose = false;
  app.add_option("--only", only, "Comma-separated subset of oracle,properties,syn,heatmap,ablation,cube");
  app.add_option("--out", out, "Directory for experiment artifacts");
  app.add_flag("--fresh", fresh, "Delete previous artifacts first");
  app.add_flag("--quick", g_quick, "Small smoke-test experiments");
  app.add_flag("--verbose", verbose, "Log training progress");
  CLI11_PARSE(app, argc, argv);

  std::set<std::string> selected;
  std::stringstream ss(only);
  for (std::string item; std::getline(ss, item, ',');) {
    if (item.empty()) continue;
    static const std::set<std::string> known{"oracle", "properties", "syn", "heatmap", "ablation", "cube"};
    if (!known.count(item)) {
      std::cerr << "unknown criterion '" << item << "'\n";
      return 2;
    }
    selected.insert(item);
  }

  Runner runner;
  runner.out = out;
  if (fresh) fs::remove_all(runner.out);
  runner.options.resume = true;
  runner.options.model_cache_dir = (runner.out / "models").string();
  runner.options.log = [verbose](const std::string& msg) {
    if (verbose || msg.find("epoch") == std::string::npos) std::cerr << msg << std::endl;
  };

  const auto guarded = [](const std::string& name, const auto& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      report(name, false, std::string("threw: ") + e.what());
    }
  };
  if (selected.count("oracle")) guarded("oracle exactness", check_oracles);
  if (selected.count("properties")) guarded("property suite", check_properties);
  if (selected.count("syn")) guarded("syn1-3 num-to-complete", [&] { check_syn(runner); });
  if (selected.count("heatmap")) guarded("syn3 heat map first pick", [&] { check_heatmap(runner); });
  if (selected.count("ablation")) guarded("syn3 ablation direction", [&] { check_ablation(runner); });
  if (selected.count("cube")) guarded("cube acquisition accuracy", [&] { check_cube(runner); });

  const auto failed = std::count_if(g_lines.begin(), g_lines.end(), [](const Line& l) { return !l.pass; });
  std::cout << (failed == 0 ? "ALL PASS" : "FAILURES: " + std::to_string(failed)) << " (" << g_lines.size()
            << " criteria)" << std::endl;
  return failed == 0 ? 0 : 1;
}
