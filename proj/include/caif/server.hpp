#pragma once

#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "caif/core.hpp"
#include "caif/models.hpp"

namespace caif {

namespace detail {

inline void respond_error(httplib::Response& res, int status, const std::string& msg) {
  nlohmann::json j;
  j["error"] = msg;
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

inline bool parse_id_matrix(const nlohmann::json& j, const std::string& field,
                            const Vocabulary& vocab, std::vector<TokenSeq>& out,
                            std::string& err) {
  if (!j.is_object() || !j.contains(field) || !j[field].is_array()) {
    err = "body must be a JSON object with a \"" + field + "\" array";
    return false;
  }
  out.clear();
  for (const auto& row : j[field]) {
    if (!row.is_array()) {
      err = "\"" + field + "\" entries must be arrays of token ids";
      return false;
    }
    TokenSeq seq;
    seq.reserve(row.size());
    for (const auto& v : row) {
      if (!v.is_number_integer()) {
        err = "\"" + field + "\" entries must contain integer token ids";
        return false;
      }
      seq.push_back(v.get<TokenId>());
    }
    if (!vocab.contains_ids(seq)) {
      err = "token id out of range in \"" + field + "\"";
      return false;
    }
    out.push_back(std::move(seq));
  }
  return true;
}

}  // namespace detail

/// Serves a logit model and/or an attribute scorer over HTTP on a loopback
/// (or other) interface. Handlers run on httplib's worker threads; the
/// wrapped models are used read-only.
class LoopbackServer {
 public:
  LoopbackServer(const Vocabulary& vocab, const LogitSource* lm,
                 const AttributeScorer* scorer, const std::string& host = "127.0.0.1",
                 int port = 0)
      : vocab_(vocab), host_(host) {
    server_.Get("/v1/vocab", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json j;
      j["tokens"] = nlohmann::json::array();
      for (std::size_t i = 0; i < vocab_.size(); ++i) {
        j["tokens"].push_back(vocab_.token(static_cast<TokenId>(i)));
      }
      j["bos_id"] = vocab_.bos_id();
      j["eos_id"] = vocab_.eos_id();
      j["fingerprint"] = vocab_.fingerprint_hex();
      res.set_content(j.dump(), "application/json");
    });

    server_.Post("/v1/logits", [this, lm](const httplib::Request& req,
                                          httplib::Response& res) {
      if (lm == nullptr) {
        detail::respond_error(res, 404, "this endpoint serves no logit model");
        return;
      }
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception& e) {
        detail::respond_error(res, 400, std::string("invalid JSON: ") + e.what());
        return;
      }
      std::vector<TokenSeq> prefixes;
      std::string err;
      if (!detail::parse_id_matrix(j, "prefixes", vocab_, prefixes, err)) {
        detail::respond_error(res, 400, err);
        return;
      }
      nlohmann::json resp;
      resp["logits"] = nlohmann::json::array();
      for (const auto& row : lm->next_logits(prefixes)) {
        resp["logits"].push_back(row);
      }
      res.set_content(resp.dump(), "application/json");
    });

    server_.Post("/v1/score", [this, scorer](const httplib::Request& req,
                                             httplib::Response& res) {
      if (scorer == nullptr) {
        detail::respond_error(res, 404, "this endpoint serves no attribute scorer");
        return;
      }
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception& e) {
        detail::respond_error(res, 400, std::string("invalid JSON: ") + e.what());
        return;
      }
      std::vector<TokenSeq> sequences;
      std::string err;
      if (!detail::parse_id_matrix(j, "sequences", vocab_, sequences, err)) {
        detail::respond_error(res, 400, err);
        return;
      }
      if (!j.contains("class_label") || !j["class_label"].is_string()) {
        detail::respond_error(res, 400, "body must carry a \"class_label\" string");
        return;
      }
      const AttributeTarget target{j["class_label"].get<std::string>(),
                                   Polarity::kAvoid};
      nlohmann::json resp;
      resp["probs"] = scorer->score_batch(sequences, target);
      res.set_content(resp.dump(), "application/json");
    });

    if (port == 0) {
      port_ = server_.bind_to_any_port(host_);
    } else {
      port_ = server_.bind_to_port(host_, port) ? port : -1;
    }
    if (port_ <= 0) {
      throw std::runtime_error("failed to bind " + host_ + ":" + std::to_string(port));
    }
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  LoopbackServer(const LoopbackServer&) = delete;
  LoopbackServer& operator=(const LoopbackServer&) = delete;

  ~LoopbackServer() {
    server_.stop();
    if (thread_.joinable()) {
      thread_.join();
    }
  }

  int port() const { return port_; }
  std::string base_url() const { return "http://" + host_ + ":" + std::to_string(port_); }

 private:
  Vocabulary vocab_;
  std::string host_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace caif
