#include "sefa/cli.hpp"
#include "sefa/datasets.hpp"
#include "sefa/errors.hpp"
#include "sefa/sefa_model.hpp"
#include "sefa/service.hpp"

#include "doctest.h"
#include "httplib.h"

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

using namespace sefa;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

model::SefaModel small_model() {
  data::Dataset ds = data::gen_indicator(3, {200, 20, 20}, 1);
  ds.schema.features[0].levels = {"off", "on"};
  model::SefaConfig cfg;
  cfg.latent_dim = 2;
  cfg.encoder_width = 8;
  cfg.predictor_width = 16;
  cfg.train_samples = 4;
  cfg.epochs = 1;
  cfg.batch_size = 32;
  cfg.val_instances = 10;
  cfg.val_predict_samples = 4;
  cfg.val_score_samples = 4;
  Rng rng(2);
  auto m = model::SefaModel::create(ds.schema, ds.num_classes, data::CopulaTransform::fit(ds.schema, ds.train), cfg, rng);
  model::train(m, ds, rng, [](const model::SefaModel&) { return 0.0; });
  m.class_names = {"zero", "one"};
  return m;
}

service::ServiceOptions fast_options() {
  service::ServiceOptions opt;
  opt.acquisition.predict_samples = 8;
  opt.acquisition.score_samples = 8;
  return opt;
}

const model::SefaModel& shared_model() {
  static const model::SefaModel m = small_model();
  return m;
}

std::string model_file() {
  static const std::string path = [] {
    const auto dir = fs::temp_directory_path() / "sefa_unit";
    fs::create_directories(dir);
    const auto p = (dir / "service_model.sefa").string();
    shared_model().save(p);
    return p;
  }();
  return path;
}

int status_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const service::ApiError& e) {
    return e.status();
  }
  return 200;
}

int run_cli(const std::vector<std::string>& args, std::string* out_text = nullptr, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (out_text) *out_text = out.str();
  if (err_text) *err_text = err.str();
  return code;
}

}  // namespace

TEST_SUITE("service") {
  TEST_CASE("session lifecycle") {
    service::AcquireService svc(fast_options());
    svc.add_model("m", shared_model());
    CHECK_THROWS_AS(svc.add_model("m", shared_model()), ConfigError);
    CHECK(svc.list_models()["models"].size() == 1);

    const auto created = svc.create_session("m", json{{"seed", 3}});
    const auto sid = created.at("session_id").get<std::string>();
    CHECK(created.at("step") == 0);
    CHECK(created.at("prediction").at("probs").size() == 2);
    CHECK(created.at("scores").size() == 4);
    REQUIRE(created.at("suggestion").is_number_integer());

    const auto next = svc.observe(sid, json{{"feature", created.at("suggestion")}, {"value", 1}});
    CHECK(next.at("step") == 1);
    CHECK(next.at("observed").at(created.at("suggestion").get<std::size_t>()) == true);

    const auto full = svc.get_session(sid);
    CHECK(full.at("history").size() == 1);
    CHECK(full.at("current").at("prediction") == next.at("prediction"));
    CHECK(full.at("history")[0].at("prediction") == next.at("prediction"));

    svc.delete_session(sid);
    CHECK(status_of([&] { svc.get_session(sid); }) == 404);
    CHECK(status_of([&] { svc.delete_session(sid); }) == 404);
  }

  TEST_CASE("observations are validated") {
    service::AcquireService svc(fast_options());
    svc.add_model("m", shared_model());
    const auto sid = svc.create_session("m", json::object()).at("session_id").get<std::string>();
    CHECK(status_of([&] { svc.observe(sid, json{{"feature", 9}, {"value", 1}}); }) == 400);
    CHECK(status_of([&] { svc.observe(sid, json{{"feature", "nope"}, {"value", 1}}); }) == 400);
    CHECK(status_of([&] { svc.observe(sid, json{{"feature", 1}, {"value", 5}}); }) == 400);
    CHECK(status_of([&] { svc.observe(sid, json{{"feature", 1}}); }) == 400);
    CHECK(status_of([&] { svc.observe(sid, json{{"feature", 1}, {"value", 1}, {"x", 0}}); }) == 400);
    try {
      svc.observe(sid, json{{"feature", 0}, {"value", "maybe"}});
      FAIL("expected a validation error");
    } catch (const service::ApiError& e) {
      CHECK(e.code() == "validation_error");
      CHECK(e.details().at("allowed") == json{"off", "on"});
    }
    CHECK_NOTHROW(svc.observe(sid, json{{"feature", 0}, {"value", "on"}}));
    CHECK(status_of([&] { svc.observe(sid, json{{"feature", 0}, {"value", "off"}}); }) == 409);
    CHECK(status_of([&] { svc.create_session("missing", json::object()); }) == 404);
    CHECK(status_of([&] { svc.create_session("m", json{{"seed", -1}}); }) == 400);
  }

  TEST_CASE("unavailable features are never suggested") {
    service::AcquireService svc(fast_options());
    svc.add_model("m", shared_model());
    const auto s = svc.create_session("m", json{{"available", {true, false, false, false}}});
    CHECK(s.at("suggestion") == 0);
    CHECK(s.at("scores")[1] == 0.0);
    const auto sid = s.at("session_id").get<std::string>();
    CHECK(status_of([&] { svc.observe(sid, json{{"feature", 2}, {"value", 1}}); }) == 409);
    const auto done = svc.observe(sid, json{{"feature", 0}, {"value", 1}});
    CHECK(done.at("suggestion").is_null());
  }

  TEST_CASE("sessions replay deterministically from seed and observations") {
    service::AcquireService a(fast_options()), b(fast_options());
    a.add_model("m", shared_model());
    b.add_model("m", shared_model());
    const json body{{"seed", 17}, {"observations", {{{"feature", 3}, {"value", 2}}}}};
    auto x = a.create_session("m", body);
    auto y = b.create_session("m", body);
    x.erase("session_id");
    y.erase("session_id");
    CHECK(x == y);
  }

  TEST_CASE("idle sessions expire") {
    auto opt = fast_options();
    opt.session_ttl = std::chrono::seconds(60);
    service::AcquireService svc(opt);
    svc.add_model("m", shared_model());
    svc.create_session("m", json::object());
    svc.create_session("m", json::object());
    CHECK(svc.purge_expired() == 0);
    CHECK(svc.purge_expired(service::AcquireService::Clock::now() + std::chrono::minutes(2)) == 2);
    CHECK(svc.session_count() == 0);
  }

  TEST_CASE("concurrent sessions do not interfere") {
    service::AcquireService svc(fast_options());
    svc.add_model("m", shared_model());
    service::AcquireService reference(fast_options());
    reference.add_model("m", shared_model());
    auto expected = reference.create_session("m", json{{"seed", 1}});
    const auto ref_id = expected.at("session_id").get<std::string>();
    expected = reference.observe(ref_id, json{{"feature", 3}, {"value", 0}});

    std::atomic<int> mismatches{0};
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
      threads.emplace_back([&] {
        for (int k = 0; k < 5; ++k) {
          const auto sid = svc.create_session("m", json{{"seed", 1}}).at("session_id").get<std::string>();
          auto got = svc.observe(sid, json{{"feature", 3}, {"value", 0}});
          if (got.at("prediction") != expected.at("prediction") || got.at("scores") != expected.at("scores")) ++mismatches;
          svc.get_session(sid);
          svc.delete_session(sid);
        }
      });
    }
    for (auto& th : threads) th.join();
    CHECK(mismatches == 0);
    CHECK(svc.session_count() == 0);
  }

  TEST_CASE("request routing and error bodies") {
    service::AcquireService svc(fast_options());
    svc.add_model("m", shared_model());
    CHECK(svc.handle("GET", "/models", "").status == 200);
    const auto created = svc.handle("POST", "/models/m/sessions", "{}");
    CHECK(created.status == 201);
    const auto sid = created.body.at("session_id").get<std::string>();
    CHECK(svc.handle("GET", "/sessions/" + sid, "").status == 200);
    CHECK(svc.handle("POST", "/sessions/" + sid + "/observe", "{bad").status == 400);
    const auto bad = svc.handle("POST", "/sessions/" + sid + "/observe", R"({"feature": 0, "value": 9})");
    CHECK(bad.status == 400);
    CHECK(bad.body.at("error").at("code") == "validation_error");
    CHECK(svc.handle("PUT", "/models", "").status == 405);
    CHECK(svc.handle("GET", "/nowhere", "").status == 404);
    CHECK(svc.handle("DELETE", "/sessions/" + sid, "").status == 200);
    CHECK(svc.handle("GET", "/sessions/" + sid, "").status == 404);
  }

  TEST_CASE("http server end to end") {
    service::AcquireService svc(fast_options());
    svc.add_model("m", shared_model());
    httplib::Server server;
    svc.mount(server);
    const int port = server.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread worker([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    httplib::Client client("127.0.0.1", port);
    const auto models = client.Get("/models");
    REQUIRE(models);
    CHECK(models->status == 200);
    const auto created = client.Post("/models/m/sessions", R"({"seed": 4})", "application/json");
    REQUIRE(created);
    CHECK(created->status == 201);
    const auto sid = json::parse(created->body).at("session_id").get<std::string>();
    const auto observed = client.Post("/sessions/" + sid + "/observe", R"({"feature": 3, "value": 1})", "application/json");
    REQUIRE(observed);
    CHECK(observed->status == 200);
    const auto conflict = client.Post("/sessions/" + sid + "/observe", R"({"feature": 3, "value": 1})", "application/json");
    REQUIRE(conflict);
    CHECK(conflict->status == 409);
    const auto ui = client.Get("/ui/");
    REQUIRE(ui);
    CHECK(ui->status == 200);

    server.stop();
    worker.join();
  }
}

TEST_SUITE("cli") {
  TEST_CASE("version and help exit cleanly") {
    std::string out;
    CHECK(run_cli({"--version"}, &out) == cli::kExitOk);
    CHECK(out.find(cli::version_string()) != std::string::npos);
    CHECK(run_cli({"--help"}) == cli::kExitOk);
  }

  TEST_CASE("usage errors exit with code 1") {
    CHECK(run_cli({"frobnicate"}) == cli::kExitConfig);
    CHECK(run_cli({"train", "--preset", "nope", "--out", "x"}) == cli::kExitConfig);
    CHECK(run_cli({"run", "--preset", "syn1", "--ablation", "bogus", "--print-config"}) == cli::kExitConfig);
  }

  TEST_CASE("run prints the resolved config") {
    std::string out;
    CHECK(run_cli({"run", "--preset", "syn3", "--ablation", "deterministic", "--print-config"}, &out) == cli::kExitOk);
    const auto j = json::parse(out);
    CHECK(j.at("ablation") == "deterministic");
  }

  TEST_CASE("missing model files are usage errors and corrupt ones runtime errors") {
    CHECK(run_cli({"acquire", "--model", "/nonexistent/model.sefa"}) == cli::kExitConfig);
    const auto path = (fs::temp_directory_path() / "sefa_unit" / "garbage.sefa").string();
    std::ofstream(path) << "not a model";
    CHECK(run_cli({"acquire", "--model", path}) == cli::kExitRuntime);
  }

  TEST_CASE("acquire walks through the service") {
    std::string out, err;
    CHECK(run_cli({"acquire", "--model", model_file(), "--observe", "x3=1", "--seed", "2"}, &out, &err) == cli::kExitOk);
    const auto state = json::parse(out);
    CHECK(state.at("step") == 0);
    CHECK(state.at("observed")[2] == true);
    CHECK(run_cli({"acquire", "--model", model_file(), "--observe", "x1=maybe"}, &out, &err) == cli::kExitConfig);
  }

  TEST_CASE("oracle tables print") {
    std::string out;
    CHECK(run_cli({"oracle"}, &out) == cli::kExitOk);
    CHECK(out.find("Indicator") != std::string::npos);
  }

  TEST_CASE("gen-data writes a csv") {
    const auto path = (fs::temp_directory_path() / "sefa_unit" / "gen.csv").string();
    CHECK(run_cli({"gen-data", "--dataset", "syn1", "--train", "20", "--val", "5", "--test", "5", "--out", path}) ==
          cli::kExitOk);
    CHECK(fs::exists(path));
  }
}
