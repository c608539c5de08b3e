// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0
//
// Chat-completion client: an OpenAI-compatible HTTP transport, a canned
// offline mock, and the retry/parse loop shared by interpretation, scoring
// and judging.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace saeinterp {

struct ChatMessage {
  std::string role;  // "system", "user" or "assistant"
  std::string content;
};

struct ChatRequest {
  std::string model;
  double temperature = 0.0;
  std::vector<ChatMessage> messages;
  /// Not sent; lets the mock pick per-stage defaults ("interpret", "score", "judge").
  std::string kind;
};

/// Wire body: {"model", "temperature", "messages": [{"role", "content"}]}.
nlohmann::json to_json(const ChatRequest& r);

/// FNV-1a 64 of the compact wire body, as 16 lowercase hex digits.
std::string request_hash(const ChatRequest& r);

struct TransportResponse {
  int status = 0;  // 0: the request never completed (connect/timeout)
  std::string body;
};

class ChatTransport {
 public:
  virtual ~ChatTransport() = default;
  /// Must be safe to call concurrently.
  virtual TransportResponse send(const ChatRequest& request) = 0;
};

struct LlmClientConfig {
  std::string endpoint = "https://api.openai.com/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string api_key_env = "OPENAI_API_KEY";
  double timeout_s = 60.0;
  unsigned max_retries = 5;        // transport failures, 429 and 5xx
  unsigned max_parse_retries = 2;  // re-asks after an unparseable reply
  double backoff_initial_s = 1.0;
  double backoff_factor = 2.0;
  double backoff_max_s = 30.0;
  unsigned max_in_flight = 4;

  void validate() const;
};

LlmClientConfig llm_config_from_json(const nlohmann::json& j, LlmClientConfig base = {});
nlohmann::json to_json(const LlmClientConfig& cfg);

/// POSTs to an OpenAI-compatible endpoint with a bearer key read from the
/// configured environment variable. A missing key is a ConfigError.
class HttpTransport final : public ChatTransport {
 public:
  explicit HttpTransport(const LlmClientConfig& cfg);
  TransportResponse send(const ChatRequest& request) override;

 private:
  std::string base_url_;
  std::string path_;
  std::string api_key_;
  double timeout_s_;
};

/// Offline transport. The map file is
///   {"responses": {"<request hash>": reply, ...},
///    "rules": [{"kind"?: k, "contains": s, "response": reply}, ...],
///    "defaults": {"<kind>": reply, ...}}
/// where a reply is a string (sent verbatim) or any JSON value (sent
/// serialised). Lookup order: exact hash, first matching rule (substring of
/// the final user message), per-kind default; otherwise HTTP 404.
class MockTransport final : public ChatTransport {
 public:
  explicit MockTransport(nlohmann::json map);
  static std::shared_ptr<MockTransport> load(const std::filesystem::path& path);

  TransportResponse send(const ChatRequest& request) override;
  std::uint64_t calls() const { return calls_.load(); }

 private:
  nlohmann::json map_;
  std::atomic<std::uint64_t> calls_{0};
};

/// Wraps an assistant message in an OpenAI-style completion body.
std::string completion_body(const std::string& content);

/// Removes a surrounding ``` / ```json fence and whitespace.
std::string strip_code_fences(const std::string& text);

struct LlmResult {
  std::optional<nlohmann::json> value;
  unsigned attempts = 0;
  unsigned retries = 0;  // transport/429/5xx retries
  unsigned parse_failures = 0;
  std::string error;  // set iff !value
};

class LlmClient {
 public:
  using Sleeper = std::function<void(std::chrono::duration<double>)>;

  LlmClient(std::shared_ptr<ChatTransport> transport, LlmClientConfig cfg, Sleeper sleeper = {});

  const LlmClientConfig& config() const { return cfg_; }
  ChatRequest make_request(std::string kind, std::vector<ChatMessage> messages) const;

  /// Sends, retries with exponential backoff on transport failure/429/5xx,
  /// strips fences and parses the reply as JSON (re-asking on parse failure).
  /// 401/403 throw ConfigError; other failures are returned in `error`.
  LlmResult complete(const ChatRequest& request) const;

 private:
  std::shared_ptr<ChatTransport> transport_;
  LlmClientConfig cfg_;
  Sleeper sleeper_;
};

inline LlmResult llm_complete(const LlmClient& client, const ChatRequest& request) {
  return client.complete(request);
}

/// Runs fn(0..count-1) on at most `max_in_flight` threads. Exceptions are
/// rethrown (the first by index) after all workers finish.
void parallel_for(std::size_t count, unsigned max_in_flight, const std::function<void(std::size_t)>& fn);

}  // namespace saeinterp
