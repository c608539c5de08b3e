// Copyright (c) 2026 The saeinterp Authors
// SPDX-License-Identifier: Apache-2.0

#include "saeinterp/llm_client.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "saeinterp/errors.hpp"

namespace saeinterp {

namespace {

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = kHex[h & 0xF];
  return out;
}

std::string reply_text(const nlohmann::json& reply) { return reply.is_string() ? reply.get<std::string>() : reply.dump(); }

bool retryable(int status) { return status == 0 || status == 429 || status >= 500; }

}  // namespace

nlohmann::json to_json(const ChatRequest& r) {
  nlohmann::json messages = nlohmann::json::array();
  for (const auto& m : r.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  return nlohmann::json{{"model", r.model}, {"temperature", r.temperature}, {"messages", messages}};
}

std::string request_hash(const ChatRequest& r) { return fnv1a_hex(to_json(r).dump()); }

void LlmClientConfig::validate() const {
  if (endpoint.rfind("http://", 0) != 0 && endpoint.rfind("https://", 0) != 0) {
    throw ConfigError("llm endpoint must start with http:// or https:// (got '" + endpoint + "')");
  }
  if (model.empty()) throw ConfigError("llm model must not be empty");
  if (!(timeout_s > 0.0)) throw ConfigError("llm timeout must be positive");
  if (!(backoff_initial_s >= 0.0) || !(backoff_factor >= 1.0) || !(backoff_max_s >= 0.0)) {
    throw ConfigError("llm backoff settings out of range");
  }
  if (max_in_flight == 0) throw ConfigError("llm max_in_flight must be at least 1");
}

LlmClientConfig llm_config_from_json(const nlohmann::json& j, LlmClientConfig cfg) {
  if (!j.is_object()) throw ConfigError("llm config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "endpoint") cfg.endpoint = v.get<std::string>();
      else if (key == "model") cfg.model = v.get<std::string>();
      else if (key == "api_key_env") cfg.api_key_env = v.get<std::string>();
      else if (key == "timeout_s") cfg.timeout_s = v.get<double>();
      else if (key == "max_retries") cfg.max_retries = v.get<unsigned>();
      else if (key == "max_parse_retries") cfg.max_parse_retries = v.get<unsigned>();
      else if (key == "backoff_initial_s") cfg.backoff_initial_s = v.get<double>();
      else if (key == "backoff_factor") cfg.backoff_factor = v.get<double>();
      else if (key == "backoff_max_s") cfg.backoff_max_s = v.get<double>();
      else if (key == "max_in_flight") cfg.max_in_flight = v.get<unsigned>();
      else throw ConfigError("unknown llm config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("llm config key '" + key + "': " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const LlmClientConfig& c) {
  return nlohmann::json{{"endpoint", c.endpoint},
                        {"model", c.model},
                        {"api_key_env", c.api_key_env},
                        {"timeout_s", c.timeout_s},
                        {"max_retries", c.max_retries},
                        {"max_parse_retries", c.max_parse_retries},
                        {"backoff_initial_s", c.backoff_initial_s},
                        {"backoff_factor", c.backoff_factor},
                        {"backoff_max_s", c.backoff_max_s},
                        {"max_in_flight", c.max_in_flight}};
}

HttpTransport::HttpTransport(const LlmClientConfig& cfg) : timeout_s_(cfg.timeout_s) {
  cfg.validate();
  const auto scheme_end = cfg.endpoint.find("://") + 3;
  const auto slash = cfg.endpoint.find('/', scheme_end);
  base_url_ = cfg.endpoint.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : cfg.endpoint.substr(slash);
  if (!cfg.api_key_env.empty()) {
    const char* key = std::getenv(cfg.api_key_env.c_str());
    if (!key || !*key) throw ConfigError("environment variable " + cfg.api_key_env + " (llm api key) is not set");
    api_key_ = key;
  }
}

TransportResponse HttpTransport::send(const ChatRequest& request) {
  httplib::Client client(base_url_);
  const auto secs = static_cast<time_t>(std::ceil(timeout_s_));
  client.set_connection_timeout(secs, 0);
  client.set_read_timeout(secs, 0);
  client.set_write_timeout(secs, 0);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  auto res = client.Post(path_, headers, to_json(request).dump(), "application/json");
  if (!res) return {0, httplib::to_string(res.error())};
  return {res->status, res->body};
}

MockTransport::MockTransport(nlohmann::json map) : map_(std::move(map)) {
  if (!map_.is_object()) throw ConfigError("mock llm map must be a JSON object");
  for (const auto* key : {"responses", "defaults"}) {
    if (map_.contains(key) && !map_[key].is_object()) throw ConfigError(std::string("mock llm '") + key + "' must be an object");
  }
  if (map_.contains("rules") && !map_["rules"].is_array()) throw ConfigError("mock llm 'rules' must be an array");
}

std::shared_ptr<MockTransport> MockTransport::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open mock llm map " + path.string());
  try {
    return std::make_shared<MockTransport>(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("mock llm map " + path.string() + ": " + e.what());
  }
}

TransportResponse MockTransport::send(const ChatRequest& request) {
  ++calls_;
  if (const auto it = map_.find("responses"); it != map_.end()) {
    if (const auto hit = it->find(request_hash(request)); hit != it->end()) return {200, completion_body(reply_text(*hit))};
  }
  const std::string last_user = [&] {
    for (auto m = request.messages.rbegin(); m != request.messages.rend(); ++m)
      if (m->role == "user") return m->content;
    return std::string();
  }();
  if (const auto it = map_.find("rules"); it != map_.end()) {
    for (const auto& rule : *it) {
      if (rule.contains("kind") && rule["kind"].get<std::string>() != request.kind) continue;
      if (last_user.find(rule.at("contains").get<std::string>()) == std::string::npos) continue;
      return {200, completion_body(reply_text(rule.at("response")))};
    }
  }
  if (const auto it = map_.find("defaults"); it != map_.end()) {
    if (const auto hit = it->find(request.kind); hit != it->end()) return {200, completion_body(reply_text(*hit))};
  }
  return {404, R"({"error": "no canned response for request )" + request_hash(request) + "\"}"};
}

std::string completion_body(const std::string& content) {
  nlohmann::json choice;
  choice["index"] = 0;
  choice["message"] = {{"role", "assistant"}, {"content", content}};
  nlohmann::json body;
  body["object"] = "chat.completion";
  body["choices"] = nlohmann::json::array({choice});
  return body.dump();
}

std::string strip_code_fences(const std::string& text) {
  const auto ws = " \t\r\n";
  const auto b = text.find_first_not_of(ws);
  if (b == std::string::npos) return {};
  std::string s = text.substr(b, text.find_last_not_of(ws) - b + 1);
  if (s.rfind("```", 0) != 0) return s;
  const auto nl = s.find('\n');
  s = nl == std::string::npos ? s.substr(3) : s.substr(nl + 1);
  if (const auto close = s.rfind("```"); close != std::string::npos) s.resize(close);
  const auto b2 = s.find_first_not_of(ws);
  if (b2 == std::string::npos) return {};
  return s.substr(b2, s.find_last_not_of(ws) - b2 + 1);
}

LlmClient::LlmClient(std::shared_ptr<ChatTransport> transport, LlmClientConfig cfg, Sleeper sleeper)
    : transport_(std::move(transport)), cfg_(std::move(cfg)), sleeper_(std::move(sleeper)) {
  if (!transport_) throw ConfigError("llm client needs a transport");
  cfg_.validate();
  if (!sleeper_) sleeper_ = [](std::chrono::duration<double> d) { std::this_thread::sleep_for(d); };
}

ChatRequest LlmClient::make_request(std::string kind, std::vector<ChatMessage> messages) const {
  return ChatRequest{cfg_.model, 0.0, std::move(messages), std::move(kind)};
}

LlmResult LlmClient::complete(const ChatRequest& request) const {
  LlmResult out;
  double delay = cfg_.backoff_initial_s;
  while (true) {
    ++out.attempts;
    TransportResponse resp;
    try {
      resp = transport_->send(request);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      resp = {0, e.what()};
    }
    if (resp.status == 401 || resp.status == 403) {
      throw ConfigError("llm endpoint rejected credentials (HTTP " + std::to_string(resp.status) + ")");
    }
    if (retryable(resp.status)) {
      if (out.retries >= cfg_.max_retries) {
        out.error = "giving up after " + std::to_string(out.retries) + " retries: HTTP " + std::to_string(resp.status) +
                    " " + resp.body.substr(0, 200);
        return out;
      }
      ++out.retries;
      spdlog::warn("llm {} request: HTTP {} (retry {}/{} in {:.2f}s)", request.kind, resp.status, out.retries,
                   cfg_.max_retries, delay);
      sleeper_(std::chrono::duration<double>(delay));
      delay = std::min(delay * cfg_.backoff_factor, cfg_.backoff_max_s);
      continue;
    }
    if (resp.status < 200 || resp.status >= 300) {
      out.error = "HTTP " + std::to_string(resp.status) + ": " + resp.body.substr(0, 200);
      return out;
    }
    try {
      const auto body = nlohmann::json::parse(resp.body);
      const auto content = body.at("choices").at(0).at("message").at("content").get<std::string>();
      out.value = nlohmann::json::parse(strip_code_fences(content));
      return out;
    } catch (const nlohmann::json::exception& e) {
      if (++out.parse_failures > cfg_.max_parse_retries) {
        out.error = std::string("unparseable reply: ") + e.what();
        return out;
      }
      spdlog::warn("llm {} request: unparseable reply, asking again", request.kind);
    }
  }
}

void parallel_for(std::size_t count, unsigned max_in_flight, const std::function<void(std::size_t)>& fn) {
  const auto workers = std::min<std::size_t>(std::max(1u, max_in_flight), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_at = count;
  std::exception_ptr failure;
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < count;) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (i < failed_at) {
              failed_at = i;
              failure = std::current_exception();
            }
          }
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace saeinterp
