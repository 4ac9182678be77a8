#pragma once

#include <chrono>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "caif/core.hpp"
#include "caif/models.hpp"

namespace caif {

struct RemoteEndpoint {
  std::string base_url;     // e.g. "http://127.0.0.1:8412"
  int timeout_ms = 5000;    // connect/read/write timeout per attempt
  int max_retries = 2;      // extra attempts after a timeout
};

struct TransportError : std::runtime_error {
  enum class Kind {
    kTimeout,              // connect/read/write timed out, retries exhausted
    kHttp,                 // transport failure or non-200 status
    kMalformed,            // 200 but the body does not match the protocol
    kFingerprintMismatch,  // remote vocabulary differs from expectation
  };
  TransportError(Kind k, const std::string& what)
      : std::runtime_error(what), kind(k) {}
  Kind kind;
};

namespace detail {

inline bool is_timeout(httplib::Error e) {
  return e == httplib::Error::ConnectionTimeout || e == httplib::Error::Read ||
         e == httplib::Error::Write;
}

/// One logical request with the retry policy: timeouts are retried up to
/// max_retries extra times, every other failure is surfaced immediately.
/// A fresh connection per attempt keeps this safe to call from any thread.
inline std::string request_json(const RemoteEndpoint& ep, const std::string& path,
                                const std::string* post_body) {
  for (int attempt = 0;; ++attempt) {
    httplib::Client http(ep.base_url);
    const auto timeout = std::chrono::milliseconds(ep.timeout_ms);
    http.set_connection_timeout(timeout);
    http.set_read_timeout(timeout);
    http.set_write_timeout(timeout);
    httplib::Result res = post_body
                              ? http.Post(path, *post_body, "application/json")
                              : http.Get(path);
    if (!res) {
      if (is_timeout(res.error()) && attempt < ep.max_retries) {
        continue;
      }
      const std::string what = "request to " + ep.base_url + path + " failed: " +
                               httplib::to_string(res.error());
      throw TransportError(is_timeout(res.error()) ? TransportError::Kind::kTimeout
                                                   : TransportError::Kind::kHttp,
                           what);
    }
    if (res->status != 200) {
      std::string detail = res->body;
      try {
        const auto j = nlohmann::json::parse(res->body);
        if (j.contains("error")) {
          detail = j["error"].get<std::string>();
        }
      } catch (const nlohmann::json::exception&) {
      }
      throw TransportError(TransportError::Kind::kHttp,
                           "HTTP " + std::to_string(res->status) + " from " + path +
                               ": " + detail);
    }
    return res->body;
  }
}

inline nlohmann::json parse_body(const std::string& body, const std::string& path) {
  try {
    return nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(TransportError::Kind::kMalformed,
                         "response from " + path + " is not valid JSON: " + e.what());
  }
}

inline Vocabulary fetch_vocabulary(const RemoteEndpoint& ep) {
  const nlohmann::json j =
      parse_body(request_json(ep, "/v1/vocab", nullptr), "/v1/vocab");
  if (!j.is_object() || !j.contains("tokens") || !j.contains("bos_id") ||
      !j.contains("eos_id") || !j.contains("fingerprint")) {
    throw TransportError(TransportError::Kind::kMalformed,
                         "/v1/vocab response missing required fields");
  }
  std::vector<std::string> tokens;
  try {
    tokens = j["tokens"].get<std::vector<std::string>>();
    const Vocabulary vocab(std::move(tokens), j["bos_id"].get<TokenId>(),
                           j["eos_id"].get<TokenId>());
    const std::string claimed = j["fingerprint"].get<std::string>();
    if (claimed != vocab.fingerprint_hex()) {
      throw TransportError(TransportError::Kind::kFingerprintMismatch,
                           "remote fingerprint " + claimed +
                               " does not match its own token list (" +
                               vocab.fingerprint_hex() + ")");
    }
    return vocab;
  } catch (const nlohmann::json::exception& e) {
    throw TransportError(TransportError::Kind::kMalformed,
                         std::string("/v1/vocab response malformed: ") + e.what());
  } catch (const InvalidInputError& e) {
    throw TransportError(TransportError::Kind::kMalformed,
                         std::string("/v1/vocab response invalid: ") + e.what());
  }
}

}  // namespace detail

/// Logit model served over HTTP. The constructor performs the vocabulary
/// handshake; generation never starts against a server whose fingerprint
/// does not check out.
class RemoteLogitSource final : public LogitSource {
 public:
  explicit RemoteLogitSource(RemoteEndpoint endpoint)
      : endpoint_(std::move(endpoint)), vocab_(detail::fetch_vocabulary(endpoint_)) {}

  const Vocabulary& vocabulary() const override { return vocab_; }

  std::vector<std::vector<double>> next_logits(
      std::span<const TokenSeq> prefixes) const override {
    nlohmann::json req;
    req["prefixes"] = nlohmann::json::array();
    for (const TokenSeq& p : prefixes) {
      req["prefixes"].push_back(p);
    }
    const std::string req_body = req.dump();
    const std::string body = detail::request_json(endpoint_, "/v1/logits", &req_body);
    const nlohmann::json j = detail::parse_body(body, "/v1/logits");
    if (!j.is_object() || !j.contains("logits") || !j["logits"].is_array()) {
      throw TransportError(TransportError::Kind::kMalformed,
                           "/v1/logits response missing \"logits\" array");
    }
    std::vector<std::vector<double>> rows;
    try {
      rows = j["logits"].get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(TransportError::Kind::kMalformed,
                           std::string("/v1/logits rows malformed: ") + e.what());
    }
    if (rows.size() != prefixes.size()) {
      throw TransportError(TransportError::Kind::kMalformed,
                           "/v1/logits returned " + std::to_string(rows.size()) +
                               " rows for " + std::to_string(prefixes.size()) +
                               " prefixes");
    }
    for (const auto& row : rows) {
      if (row.size() != vocab_.size()) {
        throw TransportError(TransportError::Kind::kMalformed,
                             "/v1/logits row has " + std::to_string(row.size()) +
                                 " entries, expected " + std::to_string(vocab_.size()));
      }
      for (double v : row) {
        if (!std::isfinite(v)) {
          throw TransportError(TransportError::Kind::kMalformed,
                               "/v1/logits row contains a non-finite value");
        }
      }
    }
    return rows;
  }

 private:
  RemoteEndpoint endpoint_;
  Vocabulary vocab_;
};

/// Attribute classifier served over HTTP. The remote advertises the
/// vocabulary it scores against; pass the generator's fingerprint so a
/// mismatched pairing fails up front instead of producing garbage scores.
class RemoteAttributeScorer final : public AttributeScorer {
 public:
  RemoteAttributeScorer(RemoteEndpoint endpoint,
                        const std::string& expected_fingerprint_hex = {})
      : endpoint_(std::move(endpoint)), vocab_(detail::fetch_vocabulary(endpoint_)) {
    if (!expected_fingerprint_hex.empty() &&
        vocab_.fingerprint_hex() != expected_fingerprint_hex) {
      throw TransportError(TransportError::Kind::kFingerprintMismatch,
                           "scorer vocabulary fingerprint " + vocab_.fingerprint_hex() +
                               " does not match the generator's " +
                               expected_fingerprint_hex);
    }
  }

  const Vocabulary& vocabulary() const { return vocab_; }

  std::vector<double> score_batch(std::span<const TokenSeq> sequences,
                                  const AttributeTarget& target) const override {
    nlohmann::json req;
    req["sequences"] = nlohmann::json::array();
    for (const TokenSeq& s : sequences) {
      req["sequences"].push_back(s);
    }
    req["class_label"] = target.class_label;
    const std::string req_body = req.dump();
    const std::string body = detail::request_json(endpoint_, "/v1/score", &req_body);
    const nlohmann::json j = detail::parse_body(body, "/v1/score");
    if (!j.is_object() || !j.contains("probs") || !j["probs"].is_array()) {
      throw TransportError(TransportError::Kind::kMalformed,
                           "/v1/score response missing \"probs\" array");
    }
    std::vector<double> probs;
    try {
      probs = j["probs"].get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw TransportError(TransportError::Kind::kMalformed,
                           std::string("/v1/score probs malformed: ") + e.what());
    }
    if (probs.size() != sequences.size()) {
      throw TransportError(TransportError::Kind::kMalformed,
                           "/v1/score returned " + std::to_string(probs.size()) +
                               " probs for " + std::to_string(sequences.size()) +
                               " sequences");
    }
    for (double p : probs) {
      if (!(p >= 0.0 && p <= 1.0)) {
        throw TransportError(TransportError::Kind::kMalformed,
                             "/v1/score prob outside [0,1]");
      }
    }
    return probs;
  }

 private:
  RemoteEndpoint endpoint_;
  Vocabulary vocab_;
};

}  // namespace caif
