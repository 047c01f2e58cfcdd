#include "sefa/service.hpp"

#include "sefa/errors.hpp"

#include "httplib.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

namespace sefa::service {

using nlohmann::json;

namespace {

constexpr const char* kPlaceholderPage = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>SEFA acquire service</title></head>
<body>
<h1>SEFA acquire service</h1>
<p>The web console bundle is not installed. Start the service with <code>--ui-dir</code> pointing at the built console.</p>
<ul>
<li><code>GET /models</code></li>
<li><code>POST /models/{id}/sessions</code></li>
<li><code>POST /sessions/{sid}/observe</code></li>
<li><code>GET /sessions/{sid}</code></li>
<li><code>DELETE /sessions/{sid}</code></li>
</ul>
</body></html>
)";

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start <= path.size()) {
    const auto end = path.find('/', start);
    const auto part = path.substr(start, end == std::string::npos ? std::string::npos : end - start);
    if (!part.empty()) parts.push_back(part);
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return parts;
}

json value_echo(const data::FeatureSpec& spec, float value) {
  if (spec.kind == data::FeatureKind::categorical) {
    const auto k = static_cast<std::size_t>(value);
    return spec.levels.size() == spec.cardinality ? json(spec.levels[k]) : json(k);
  }
  return value;
}

std::vector<std::string> allowed_levels(const data::FeatureSpec& spec) {
  if (spec.levels.size() == spec.cardinality) return spec.levels;
  std::vector<std::string> out;
  for (std::size_t k = 0; k < spec.cardinality; ++k) out.push_back(std::to_string(k));
  return out;
}

std::size_t parse_feature_index(const model::SefaModel& model, const json& feature) {
  if (feature.is_string()) {
    const auto& features = model.schema().features;
    for (std::size_t i = 0; i < features.size(); ++i) {
      if (features[i].name == feature.get<std::string>()) return i;
    }
    throw ApiError(400, "validation_error", "unknown feature '" + feature.get<std::string>() + "'");
  }
  if (!feature.is_number_integer()) {
    throw ApiError(400, "validation_error", "'feature' must be a feature index or name");
  }
  const auto i = feature.get<long long>();
  if (i < 0 || static_cast<std::size_t>(i) >= model.num_features()) {
    throw ApiError(400, "validation_error",
                   "feature index " + std::to_string(i) + " is out of range [0, " +
                       std::to_string(model.num_features()) + ")");
  }
  return static_cast<std::size_t>(i);
}

std::string new_session_id(std::uint64_t counter) {
  std::random_device device;
  std::uint64_t state = (static_cast<std::uint64_t>(device()) << 32) ^ device() ^ counter;
  char buf[40];
  std::snprintf(buf, sizeof buf, "s%llu-%016llx", static_cast<unsigned long long>(counter),
                static_cast<unsigned long long>(splitmix64(state)));
  return buf;
}

}  // namespace

json ApiError::to_json() const {
  json error{{"code", code_}, {"message", what()}};
  if (details_.is_object()) {
    for (const auto& [key, value] : details_.items()) error[key] = value;
  }
  return json{{"error", error}};
}

float parse_feature_value(const data::FeatureSpec& spec, const json& value) {
  if (spec.kind == data::FeatureKind::continuous) {
    double v = 0.0;
    if (value.is_number()) {
      v = value.get<double>();
    } else if (value.is_string()) {
      const auto& s = value.get_ref<const std::string&>();
      const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw ApiError(400, "validation_error", "feature '" + spec.name + "' expects a number, got '" + s + "'",
                       {{"feature", spec.name}, {"expected", "number"}});
      }
    } else {
      throw ApiError(400, "validation_error", "feature '" + spec.name + "' expects a number",
                     {{"feature", spec.name}, {"expected", "number"}});
    }
    if (!std::isfinite(v)) {
      throw ApiError(400, "validation_error", "feature '" + spec.name + "' expects a finite number",
                     {{"feature", spec.name}, {"expected", "number"}});
    }
    return static_cast<float>(v);
  }
  const auto allowed = allowed_levels(spec);
  std::string joined;
  for (const auto& a : allowed) joined += (joined.empty() ? "" : ", ") + a;
  const json details{{"feature", spec.name}, {"allowed", allowed}};
  if (value.is_string()) {
    const auto it = std::find(allowed.begin(), allowed.end(), value.get<std::string>());
    if (it != allowed.end()) return static_cast<float>(it - allowed.begin());
  } else if (value.is_number_integer()) {
    const auto k = value.get<long long>();
    if (k >= 0 && static_cast<std::size_t>(k) < spec.cardinality) return static_cast<float>(k);
  }
  throw ApiError(400, "validation_error",
                 "feature '" + spec.name + "' expects one of: " + joined + " (got " + value.dump() + ")", details);
}

AcquireService::AcquireService(ServiceOptions options) : options_(std::move(options)) { options_.acquisition.validate(); }

void AcquireService::add_model(const std::string& id, model::SefaModel model) {
  if (id.empty() || id.find('/') != std::string::npos) throw ConfigError("model id must be non-empty without '/'");
  std::lock_guard lock(mutex_);
  if (models_.count(id)) throw ConfigError("duplicate model id '" + id + "'");
  models_.emplace(id, std::make_shared<const model::SefaModel>(std::move(model)));
}

json AcquireService::list_models() const {
  std::lock_guard lock(mutex_);
  json out = json::array();
  for (const auto& [id, m] : models_) {
    out.push_back({{"id", id},
                   {"num_features", m->num_features()},
                   {"num_classes", m->num_classes()},
                   {"class_names", m->class_names},
                   {"features", model::schema_to_json(m->schema())}});
  }
  return json{{"models", out}};
}

std::shared_ptr<AcquireService::Session> AcquireService::find_session(const std::string& id) {
  purge_expired();
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ApiError(404, "not_found", "unknown session '" + id + "'");
  return it->second;
}

json AcquireService::current_state(Session& s) {
  const auto& m = *s.model;
  const auto scores = acq::score_features(m, s.raw, options_.acquisition, s.rng, s.available);
  std::optional<std::size_t> suggestion;
  try {
    suggestion = acq::select_next(scores);
  } catch (const ExhaustedError&) {
  }
  json observed = json::array();
  json values = json::array();
  for (std::size_t i = 0; i < m.num_features(); ++i) {
    observed.push_back(s.raw.mask[i] != 0);
    values.push_back(s.raw.mask[i] ? value_echo(m.schema().features[i], s.raw.values[i]) : json(nullptr));
  }
  json state{{"step", s.history.size()},
             {"observed", observed},
             {"values", values},
             {"available", s.available},
             {"prediction", {{"class_names", m.class_names}, {"probs", scores.class_probs}}},
             {"scores", scores.scores},
             {"eligible", scores.eligible}};
  if (suggestion) {
    state["suggestion"] = *suggestion;
    state["suggestion_name"] = m.schema().features[*suggestion].name;
  } else {
    state["suggestion"] = nullptr;
    state["suggestion_name"] = nullptr;
  }
  return state;
}

void AcquireService::apply_observation(Session& s, const json& entry) {
  if (!entry.is_object() || !entry.contains("feature") || !entry.contains("value")) {
    throw ApiError(400, "validation_error", "an observation needs 'feature' and 'value'");
  }
  for (const auto& [key, v] : entry.items()) {
    if (key != "feature" && key != "value") throw ApiError(400, "validation_error", "unknown key '" + key + "'");
  }
  const auto i = parse_feature_index(*s.model, entry.at("feature"));
  const auto& spec = s.model->schema().features[i];
  if (s.raw.mask[i]) throw ApiError(409, "conflict", "feature '" + spec.name + "' is already observed", {{"feature", i}});
  if (!s.available[i]) throw ApiError(409, "conflict", "feature '" + spec.name + "' is not available", {{"feature", i}});
  s.raw.values[i] = parse_feature_value(spec, entry.at("value"));
  s.raw.mask[i] = 1;
}

json AcquireService::create_session(const std::string& model_id, const json& body) {
  purge_expired();
  if (!body.is_object()) throw ApiError(400, "bad_request", "request body must be a JSON object");
  for (const auto& [key, v] : body.items()) {
    if (key != "seed" && key != "observations" && key != "available") {
      throw ApiError(400, "validation_error", "unknown key '" + key + "'");
    }
  }
  auto s = std::make_shared<Session>();
  {
    std::lock_guard lock(mutex_);
    const auto it = models_.find(model_id);
    if (it == models_.end()) throw ApiError(404, "not_found", "unknown model '" + model_id + "'");
    s->model = it->second;
    s->id = new_session_id(next_session_++);
  }
  s->model_id = model_id;
  const auto d = s->model->num_features();
  if (body.contains("seed")) {
    const auto& seed = body["seed"];
    if (!seed.is_number_integer() || (!seed.is_number_unsigned() && seed.get<std::int64_t>() < 0)) {
      throw ApiError(400, "validation_error", "'seed' must be a nonnegative integer");
    }
    s->seed = seed.get<std::uint64_t>();
  } else {
    std::random_device device;
    s->seed = (static_cast<std::uint64_t>(device()) << 32) | device();
  }
  s->rng = Rng(s->seed);
  s->raw = data::empty_instance(s->model->schema());
  s->available.assign(d, 1);
  if (body.contains("available")) {
    const auto& a = body["available"];
    if (!a.is_array() || a.size() != d) {
      throw ApiError(400, "validation_error", "'available' must be an array of " + std::to_string(d) + " booleans");
    }
    for (std::size_t i = 0; i < d; ++i) {
      if (!a[i].is_boolean()) throw ApiError(400, "validation_error", "'available' entries must be booleans");
      s->available[i] = a[i].get<bool>() ? 1 : 0;
    }
  }
  if (body.contains("observations")) {
    if (!body["observations"].is_array()) throw ApiError(400, "validation_error", "'observations' must be an array");
    for (const auto& entry : body["observations"]) {
      apply_observation(*s, entry);
      const auto i = parse_feature_index(*s->model, entry.at("feature"));
      s->initial.push_back({i, value_echo(s->model->schema().features[i], s->raw.values[i])});
    }
  }
  s->initial_state = current_state(*s);
  s->last_used = Clock::now();
  json out = s->initial_state;
  out["session_id"] = s->id;
  out["model_id"] = model_id;
  out["seed"] = s->seed;
  std::lock_guard lock(mutex_);
  sessions_.emplace(s->id, s);
  return out;
}

json AcquireService::observe(const std::string& session_id, const json& body) {
  const auto s = find_session(session_id);
  std::lock_guard lock(s->mutex);
  if (s->deleted) throw ApiError(404, "not_found", "unknown session '" + session_id + "'");
  apply_observation(*s, body);
  const auto i = parse_feature_index(*s->model, body.at("feature"));
  Step step{i, value_echo(s->model->schema().features[i], s->raw.values[i]), nullptr};
  s->history.push_back(step);
  s->history.back().state = current_state(*s);
  s->last_used = Clock::now();
  json out = s->history.back().state;
  out["session_id"] = s->id;
  out["feature"] = i;
  out["value"] = step.value;
  return out;
}

json AcquireService::get_session(const std::string& session_id) {
  const auto s = find_session(session_id);
  std::lock_guard lock(s->mutex);
  if (s->deleted) throw ApiError(404, "not_found", "unknown session '" + session_id + "'");
  s->last_used = Clock::now();
  json initial = json::array();
  for (const auto& o : s->initial) initial.push_back({{"feature", o.feature}, {"value", o.value}});
  json history = json::array();
  for (std::size_t k = 0; k < s->history.size(); ++k) {
    const auto& h = s->history[k];
    history.push_back({{"step", k + 1},
                       {"feature", h.feature},
                       {"feature_name", s->model->schema().features[h.feature].name},
                       {"value", h.value},
                       {"prediction", h.state.at("prediction")},
                       {"scores", h.state.at("scores")},
                       {"suggestion", h.state.at("suggestion")}});
  }
  const auto& latest = s->history.empty() ? s->initial_state : s->history.back().state;
  json out{{"session_id", s->id},
           {"model_id", s->model_id},
           {"seed", s->seed},
           {"initial_observations", initial},
           {"initial", s->initial_state},
           {"history", history},
           {"current", latest}};
  return out;
}

void AcquireService::delete_session(const std::string& session_id) {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw ApiError(404, "not_found", "unknown session '" + session_id + "'");
    s = it->second;
    sessions_.erase(it);
  }
  std::lock_guard lock(s->mutex);
  s->deleted = true;
}

std::size_t AcquireService::purge_expired(Clock::time_point now) {
  std::vector<std::shared_ptr<Session>> candidates;
  {
    std::lock_guard lock(mutex_);
    for (const auto& [id, s] : sessions_) candidates.push_back(s);
  }
  std::vector<std::string> expired;
  for (const auto& s : candidates) {
    std::unique_lock lock(s->mutex, std::try_to_lock);
    if (lock.owns_lock() && now - s->last_used > options_.session_ttl) expired.push_back(s->id);
  }
  std::lock_guard lock(mutex_);
  std::size_t removed = 0;
  for (const auto& id : expired) removed += sessions_.erase(id);
  return removed;
}

std::size_t AcquireService::session_count() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

Reply AcquireService::handle(const std::string& method, const std::string& path, const std::string& body) {
  try {
    const auto parts = split_path(path);
    json request = json::object();
    if (method == "POST" && !body.empty()) {
      try {
        request = json::parse(body);
      } catch (const json::parse_error& e) {
        throw ApiError(400, "bad_request", std::string("request body is not valid JSON: ") + e.what());
      }
    }
    const auto allow = [&](const char* expected) {
      if (method != expected) throw ApiError(405, "method_not_allowed", method + " is not allowed on " + path);
    };
    if (parts.size() == 1 && parts[0] == "models") {
      allow("GET");
      return {200, list_models()};
    }
    if (parts.size() == 3 && parts[0] == "models" && parts[2] == "sessions") {
      allow("POST");
      return {201, create_session(parts[1], request)};
    }
    if (parts.size() == 3 && parts[0] == "sessions" && parts[2] == "observe") {
      allow("POST");
      return {200, observe(parts[1], request)};
    }
    if (parts.size() == 2 && parts[0] == "sessions") {
      if (method == "GET") return {200, get_session(parts[1])};
      allow("DELETE");
      delete_session(parts[1]);
      return {200, json{{"deleted", parts[1]}}};
    }
    throw ApiError(404, "not_found", "no route for " + method + " " + path);
  } catch (const ApiError& e) {
    return {e.status(), e.to_json()};
  } catch (const std::exception& e) {
    return {500, ApiError(500, "internal_error", e.what()).to_json()};
  }
}

void AcquireService::mount(httplib::Server& server) {
  const auto route = [this](const httplib::Request& req, httplib::Response& res) {
    const auto reply = handle(req.method, req.path, req.body);
    res.status = reply.status;
    res.set_content(reply.body.dump(), "application/json");
  };
  const char* api = R"((/models.*|/sessions.*))";
  server.Get(api, route);
  server.Post(api, route);
  server.Delete(api, route);
  server.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/ui/"); });
  if (!options_.ui_dir.empty() && std::filesystem::is_directory(options_.ui_dir)) {
    server.set_mount_point("/ui", options_.ui_dir);
  } else {
    server.Get(R"(/ui(/.*)?)", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(kPlaceholderPage, "text/html");
    });
  }
}

}  // namespace sefa::service
