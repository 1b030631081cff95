#pragma once

#include <memory>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "sessionbert/checkpoint.hpp"
#include "sessionbert/persona.hpp"
#include "sessionbert/recommender.hpp"

namespace sessionbert {

inline constexpr std::size_t kMaxBodyBytes = 1 << 20;

// Model artifacts are read-only after construction; only the store mutates.
struct ServiceState {
  ModelState<float> model;
  Vocabulary vocab;
  ServiceCatalog catalog;
  ClusterModel clusters;
  PersonaMapping mapping;
  HistoryStore store;
  std::string model_version;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

inline Response error_response(int status, const std::string& message, const std::string& field = {}) {
  nlohmann::json b{{"error", message}};
  if (!field.empty()) b["field"] = field;
  return {status, std::move(b)};
}

inline Response handle_ingest(ServiceState& s, const std::string& body) {
  if (body.size() > kMaxBodyBytes) return error_response(413, "body exceeds " + std::to_string(kMaxBodyBytes) + " bytes");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception&) {
    return error_response(400, "body is not a JSON object", "body");
  }
  SessionRecord r;
  try {
    r = record_from_json(j);
    validate_record(r);
  } catch (const ValidationError& e) {
    return error_response(400, e.what(), e.field());
  }
  s.store.record_session(r);
  const auto h = s.store.snapshot(r.user_id);
  return {200, {{"user_id", r.user_id}, {"stored_sessions", h ? h->window.size() : 0}}};
}

inline Response handle_recommendations(const ServiceState& s, const std::string& user_id, const std::string& k_param,
                                       const std::string& strategy_param) {
  RecommendConfig cfg;
  if (!strategy_param.empty()) {
    const auto st = parse_strategy(strategy_param);
    if (!st) return error_response(400, "unknown strategy " + strategy_param, "strategy");
    cfg.strategy = *st;
  }
  if (!k_param.empty()) {
    std::size_t used = 0;
    long k = 0;
    try {
      k = std::stol(k_param, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used != k_param.size() || k < 1) return error_response(400, "k must be a positive integer", "k");
    cfg.n = static_cast<std::size_t>(k);
  }
  const auto h = s.store.snapshot(user_id);
  if (!h) return error_response(404, "unknown user " + user_id);
  Recommendation rec;
  try {
    rec = recommend_for_history(*h, s.model, s.vocab, s.catalog, cfg);
  } catch (const ValidationError& e) {
    return error_response(400, e.what(), e.field());
  }
  nlohmann::json items = nlohmann::json::array();
  for (const auto& x : rec.services) items.push_back({{"service", x.service}, {"score", x.score}});
  return {200, {{"user_id", user_id}, {"strategy", std::string(to_string(rec.strategy))}, {"services", items}}};
}

inline Response handle_persona(const ServiceState& s, const std::string& user_id) {
  const auto h = s.store.snapshot(user_id);
  if (!h) return error_response(404, "unknown user " + user_id);
  const std::vector<SessionRecord> sessions(h->window.begin(), h->window.end());
  const auto p = assign_user_persona(sessions, s.model, s.vocab, s.clusters, s.mapping);
  return {200, {{"user_id", user_id}, {"personas", p.personas}, {"cluster", p.cluster}, {"confidence", p.confidence}}};
}

inline Response handle_health(const ServiceState& s) {
  return {200, {{"status", "ok"}, {"model_version", s.model_version}}};
}

namespace detail {

inline void reply(httplib::Response& res, const Response& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

}  // namespace detail

// Routes onto `server`; the state must outlive it.
inline void install_routes(httplib::Server& server, ServiceState& s) {
  server.set_payload_max_length(kMaxBodyBytes);
  server.Post("/v1/sessions", [&s](const httplib::Request& req, httplib::Response& res) {
    detail::reply(res, handle_ingest(s, req.body));
  });
  server.Get(R"(/v1/users/([^/]+)/recommendations)", [&s](const httplib::Request& req, httplib::Response& res) {
    detail::reply(res, handle_recommendations(s, req.matches[1], req.get_param_value("k"), req.get_param_value("strategy")));
  });
  server.Get(R"(/v1/users/([^/]+)/persona)", [&s](const httplib::Request& req, httplib::Response& res) {
    detail::reply(res, handle_persona(s, req.matches[1]));
  });
  server.Get("/health", [&s](const httplib::Request&, httplib::Response& res) { detail::reply(res, handle_health(s)); });
  server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    detail::reply(res, error_response(500, what));
  });
}

}  // namespace sessionbert
