#pragma once

#include "sefa/acquisition.hpp"
#include "sefa/sefa_model.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace httplib {
class Server;
}

namespace sefa::service {

/// Error surfaced to clients as {"error": {"code", "message", ...}} with an HTTP status.
class ApiError : public std::runtime_error {
 public:
  ApiError(int status, std::string code, const std::string& message, nlohmann::json details = nullptr)
      : std::runtime_error(message), status_(status), code_(std::move(code)), details_(std::move(details)) {}

  int status() const { return status_; }
  const std::string& code() const { return code_; }
  const nlohmann::json& details() const { return details_; }
  nlohmann::json to_json() const;

 private:
  int status_;
  std::string code_;
  nlohmann::json details_;
};

struct ServiceOptions {
  acq::AcqConfig acquisition;
  std::chrono::seconds session_ttl{3600};
  /// Directory served under /ui; empty serves a placeholder page.
  std::string ui_dir;
};

struct Reply {
  int status = 200;
  nlohmann::json body;
};

class AcquireService {
 public:
  using Clock = std::chrono::steady_clock;

  explicit AcquireService(ServiceOptions options = {});

  /// Registers a model under `id`; throws ConfigError on a duplicate id.
  void add_model(const std::string& id, model::SefaModel model);

  nlohmann::json list_models() const;
  /// Body: {"seed"?: uint, "observations"?: [{"feature", "value"}], "available"?: [bool]}.
  nlohmann::json create_session(const std::string& model_id, const nlohmann::json& body);
  /// Body: {"feature": int, "value": number | string}.
  nlohmann::json observe(const std::string& session_id, const nlohmann::json& body);
  nlohmann::json get_session(const std::string& session_id);
  void delete_session(const std::string& session_id);

  /// Drops sessions idle for longer than the TTL; returns how many were removed.
  std::size_t purge_expired(Clock::time_point now = Clock::now());
  std::size_t session_count() const;

  /// Routes one request; ApiError and malformed JSON become error replies.
  Reply handle(const std::string& method, const std::string& path, const std::string& body);

  /// Installs the JSON routes and the /ui mount on `server`.
  void mount(httplib::Server& server);

 private:
  struct Observation {
    std::size_t feature = 0;
    nlohmann::json value;
  };
  struct Step {
    std::size_t feature = 0;
    nlohmann::json value;
    nlohmann::json state;
  };
  struct Session {
    std::mutex mutex;
    std::string id;
    std::string model_id;
    std::shared_ptr<const model::SefaModel> model;
    std::uint64_t seed = 0;
    Rng rng;
    data::MaskedInstance raw;
    std::vector<std::uint8_t> available;
    std::vector<Observation> initial;
    nlohmann::json initial_state;
    std::vector<Step> history;
    Clock::time_point last_used;
    bool deleted = false;
  };

  std::shared_ptr<Session> find_session(const std::string& id);
  nlohmann::json current_state(Session& session);
  void apply_observation(Session& session, const nlohmann::json& entry);

  ServiceOptions options_;
  std::map<std::string, std::shared_ptr<const model::SefaModel>> models_;
  mutable std::mutex mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t next_session_ = 1;
};

/// Parses a feature value from JSON: a number for continuous features, a level name
/// or index for categorical ones. Throws ApiError (400, "validation_error").
float parse_feature_value(const data::FeatureSpec& spec, const nlohmann::json& value);

}  // namespace sefa::service
