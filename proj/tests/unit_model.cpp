#include "sefa/acquisition.hpp"
#include "sefa/baseline_mlp.hpp"
#include "sefa/datasets.hpp"
#include "sefa/errors.hpp"
#include "sefa/sefa_model.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>

using namespace sefa;

namespace {

model::SefaConfig tiny_config() {
  model::SefaConfig cfg;
  cfg.latent_dim = 2;
  cfg.encoder_width = 8;
  cfg.predictor_width = 16;
  cfg.train_samples = 4;
  cfg.predict_samples = 16;
  cfg.score_samples = 16;
  cfg.batch_size = 32;
  cfg.epochs = 2;
  cfg.val_instances = 20;
  cfg.val_predict_samples = 4;
  cfg.val_score_samples = 4;
  return cfg;
}

struct Fixture {
  data::Dataset ds = data::gen_indicator(3, {300, 40, 40}, 5);
  model::SefaModel model;

  Fixture() {
    Rng rng(6);
    model = model::SefaModel::create(ds.schema, ds.num_classes, data::CopulaTransform::fit(ds.schema, ds.train),
                                     tiny_config(), rng);
    model::train(model, ds, rng, [](const model::SefaModel&) { return 0.0; });
  }
};

model::SefaModel mixed_model() {
  const auto syn = data::gen_syn(2, {200, 20, 20}, 0.0, 3);
  Rng rng(4);
  return model::SefaModel::create(syn.schema, syn.num_classes, data::CopulaTransform::fit(syn.schema, syn.train),
                                  tiny_config(), rng);
}

std::string temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "sefa_unit";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

}  // namespace

TEST_SUITE("sefa_model") {
  TEST_CASE("config validation and strict json") {
    model::SefaConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.latent_dim = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    auto j = model::to_json(model::SefaConfig{});
    CHECK(model::to_json(model::sefa_config_from_json(j)) == j);
    j["bogus"] = 1;
    CHECK_THROWS_AS(model::sefa_config_from_json(j), ConfigError);
  }

  TEST_CASE("predictions are distributions") {
    Fixture f;
    Rng rng(1);
    for (std::size_t n = 0; n < 10; ++n) {
      const auto p = f.model.predict(f.ds.test.instances[n], 8, rng);
      CHECK(std::accumulate(p.begin(), p.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }

  TEST_CASE("encode gives positive sigma and one group per feature") {
    auto m = mixed_model();
    const auto latent = m.encode(data::empty_instance(m.schema()));
    CHECK(latent.mu.size() == m.latent_width());
    for (float s : latent.sigma) CHECK(s >= model::kSigmaFloor);
  }

  TEST_CASE("invalid instances are rejected") {
    Fixture f;
    auto inst = f.ds.test.instances[0];
    inst.values[0] = 5.0f;
    CHECK_THROWS_AS(f.model.prepare(inst), ConfigError);
    inst.values.pop_back();
    CHECK_THROWS_AS(f.model.prepare(inst), ConfigError);
  }

  TEST_CASE("save and load round trip") {
    Fixture f;
    f.model.class_names = {"neg", "pos"};
    const auto path = temp_path("model.sefa");
    f.model.save(path);
    const auto loaded = model::SefaModel::load(path);
    CHECK(loaded.class_names == f.model.class_names);
    CHECK(loaded.export_arrays() == f.model.export_arrays());
    Rng a(3), b(3);
    CHECK(loaded.predict(f.ds.test.instances[1], 8, a) == f.model.predict(f.ds.test.instances[1], 8, b));
  }

  TEST_CASE("load detects corruption, truncation, bad magic and version") {
    const auto m = mixed_model();
    const auto path = temp_path("corrupt.sefa");
    m.save(path);
    const std::string good = read_bytes(path);

    std::string flipped = good;
    flipped[flipped.size() - 20] ^= 0x40;
    write_bytes(path, flipped);
    CHECK_THROWS_AS(model::SefaModel::load(path), ChecksumError);

    write_bytes(path, good.substr(0, good.size() / 2));
    CHECK_THROWS_AS(model::SefaModel::load(path), ChecksumError);

    write_bytes(path, "hello world, not a model");
    CHECK_THROWS_AS(model::SefaModel::load(path), FormatError);

    std::string versioned = good;
    const auto pos = versioned.find("\"version\":1");
    REQUIRE(pos != std::string::npos);
    versioned[pos + 10] = '7';
    write_bytes(path, versioned);
    CHECK_THROWS_AS(model::SefaModel::load(path), VersionError);

    CHECK_THROWS_AS(model::SefaModel::load(temp_path("does_not_exist.sefa")), FormatError);
  }

  TEST_CASE("double-precision loss agrees with the float loss") {
    auto m = mixed_model();
    const auto syn = data::gen_syn(2, {64, 1, 1}, 0.0, 3);
    std::vector<data::MaskedInstance> prepared;
    for (const auto& inst : syn.train.instances) prepared.push_back(m.prepare(inst));
    auto net = m.to_double();
    Rng a(5), b(5);
    const auto lf = model::loss_and_grads(m, prepared, syn.train.labels, a, nullptr);
    const auto ld = model::loss_and_grads(net, prepared, syn.train.labels, b, nullptr);
    CHECK(lf.loss == doctest::Approx(ld.loss).epsilon(1e-4));
    CHECK(a == b);
  }

  TEST_CASE("gradients line up with parameters") {
    auto m = mixed_model();
    const auto syn = data::gen_syn(2, {32, 1, 1}, 0.0, 3);
    std::vector<data::MaskedInstance> prepared;
    for (const auto& inst : syn.train.instances) prepared.push_back(m.prepare(inst));
    model::SefaGrads grads;
    Rng rng(2);
    const auto lb = model::loss_and_grads(m, prepared, syn.train.labels, rng, &grads);
    CHECK(std::isfinite(lb.loss));
    CHECK(lb.loss == doctest::Approx(lb.nll + m.config().beta * lb.kl));
    const auto ps = m.parameters();
    const auto gs = model::SefaModel::gradients(grads);
    REQUIRE(ps.size() == gs.size());
    for (std::size_t t = 0; t < ps.size(); ++t) CHECK(ps[t].size() == gs[t].size());
  }

  TEST_CASE("gaussian kl") {
    const std::vector<float> mu{0.0f, 1.0f}, sigma{1.0f, 1.0f};
    CHECK(model::gaussian_kl(mu, sigma, false) == doctest::Approx(0.5));
    CHECK(model::gaussian_kl(mu, sigma, true) == doctest::Approx(0.5));
    const std::vector<float> short_sigma{1.0f};
    CHECK_THROWS_AS(model::gaussian_kl(mu, short_sigma, false), ConfigError);
  }
}

TEST_SUITE("acquisition") {
  TEST_CASE("sample feature scores normalize and fall back to uniform") {
    const std::vector<double> norms{1.0, 3.0, 0.0, 4.0};
    const auto r = acq::sample_feature_scores(norms, true);
    CHECK(std::accumulate(r.begin(), r.end(), 0.0) == doctest::Approx(1.0));
    CHECK(r[3] == doctest::Approx(0.5));
    const std::vector<double> zeros(5, 0.0);
    for (double v : acq::sample_feature_scores(zeros, true)) CHECK(v == doctest::Approx(0.2));
    const auto raw = acq::sample_feature_scores(norms, false);
    CHECK(raw[1] == doctest::Approx(3.0));
  }

  TEST_CASE("scores sum to one and vanish on observed and unavailable features") {
    Fixture f;
    acq::AcqConfig cfg;
    cfg.predict_samples = 16;
    cfg.score_samples = 16;
    auto inst = data::empty_instance(f.ds.schema);
    inst.values[3] = 1.0f;
    inst.mask[3] = 1;
    const std::vector<std::uint8_t> available{1, 0, 1, 1};
    Rng rng(9);
    const auto s = acq::score_features(f.model, inst, cfg, rng, available);
    CHECK(std::accumulate(s.unmasked.begin(), s.unmasked.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(s.scores[3] == 0.0);
    CHECK(s.scores[1] == 0.0);
    CHECK(s.eligible == std::vector<std::uint8_t>{1, 0, 1, 0});
    const auto pick = acq::select_next(s);
    CHECK((pick == 0 || pick == 2));
  }

  TEST_CASE("select_next throws when nothing is eligible") {
    acq::FeatureScores s;
    s.scores = {0.0, 0.0};
    s.eligible = {0, 0};
    CHECK_THROWS_AS(acq::select_next(s), ExhaustedError);
  }

  TEST_CASE("fixed policy validates its ordering") {
    CHECK_THROWS_AS(acq::Policy::fixed({0, 0, 1}), ConfigError);
    CHECK_NOTHROW(acq::Policy::fixed({2, 0, 1}));
  }

  TEST_CASE("random permutation") {
    Rng rng(1);
    auto p = acq::random_permutation(10, rng);
    std::sort(p.begin(), p.end());
    for (std::size_t i = 0; i < 10; ++i) CHECK(p[i] == i);
  }

  TEST_CASE("trajectories never repeat a feature and respect the budget") {
    Fixture f;
    acq::AcqConfig cfg;
    cfg.predict_samples = 8;
    cfg.score_samples = 8;
    for (const auto& policy : {acq::Policy::sefa(), acq::Policy::random(), acq::Policy::fixed({3, 2, 1, 0})}) {
      Rng rng(4);
      const auto t = acq::run_trajectory(policy, f.model, f.ds.test.instances[2], 3, cfg, rng);
      CHECK(t.steps.size() == 3);
      const auto got = t.acquired();
      CHECK(std::set<std::size_t>(got.begin(), got.end()).size() == got.size());
      if (policy.kind == acq::Policy::Kind::fixed) CHECK(got == std::vector<std::size_t>{3, 2, 1});
    }
  }

  TEST_CASE("trajectories are reproducible from the seed") {
    Fixture f;
    acq::AcqConfig cfg;
    cfg.predict_samples = 8;
    cfg.score_samples = 8;
    Rng a(12), b(12);
    const auto x = acq::run_trajectory(acq::Policy::sefa(), f.model, f.ds.test.instances[0], 4, cfg, a);
    const auto y = acq::run_trajectory(acq::Policy::sefa(), f.model, f.ds.test.instances[0], 4, cfg, b);
    CHECK(x.acquired() == y.acquired());
    CHECK(x.steps.back().class_probs == y.steps.back().class_probs);
  }

  TEST_CASE("acquisition config json is strict") {
    auto j = acq::to_json(acq::AcqConfig{});
    CHECK(acq::to_json(acq::acq_config_from_json(j)) == j);
    j["nope"] = true;
    CHECK_THROWS_AS(acq::acq_config_from_json(j), ConfigError);
  }
}

TEST_SUITE("baseline_mlp") {
  TEST_CASE("mlp classifier predicts distributions and trains") {
    const auto ds = data::gen_indicator(3, {300, 50, 50}, 2);
    baseline::MlpConfig cfg;
    cfg.width = 16;
    cfg.depth = 1;
    cfg.epochs = 3;
    cfg.batch_size = 32;
    cfg.val_instances = 50;
    Rng rng(1);
    auto mlp = baseline::MlpClassifier::create(ds.schema, ds.num_classes,
                                               data::CopulaTransform::fit(ds.schema, ds.train), cfg, rng);
    // Three binary features and a 3-way indicator, each one-hot with a missing slot, plus masks.
    CHECK(mlp.input_width() > 0);
    const auto history = baseline::train_mlp(mlp, ds, rng);
    CHECK(history.size() == 3);
    std::vector<data::MaskedInstance> prepared;
    for (const auto& inst : ds.test.instances) prepared.push_back(mlp.prepare(inst));
    std::vector<Rng> rngs(prepared.size());
    const auto p = mlp.predict(prepared, rngs);
    for (Eigen::Index r = 0; r < p.rows(); ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
  }

  TEST_CASE("mlp config json is strict") {
    auto j = baseline::to_json(baseline::MlpConfig{});
    j["extra"] = 0;
    CHECK_THROWS_AS(baseline::mlp_config_from_json(j), ConfigError);
  }
}
