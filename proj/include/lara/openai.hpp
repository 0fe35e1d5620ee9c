#pragma once

// Completion-style HTTP backend speaking the OpenAI /completions wire shape.
// Local inference servers exposing the same route work with an endpoint swap.

#include <algorithm>
#include <chrono>
#include <string>
#include <string_view>
#include <thread>

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "lara/core.hpp"
#include "lara/error.hpp"
#include "lara/provider.hpp"

namespace lara {

/// Extracts `logprobs.top_logprobs[0]` (under `choices[0]`, or at the top
/// level for servers that flatten it) and keeps the best `top_k` entries.
inline SparseLogits parse_completion_logprobs(std::string_view body, std::size_t top_k) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("completion response is not JSON: ") + e.what());
  }
  if (!j.is_object()) throw ProtocolError("completion response is not a JSON object");

  const nlohmann::json* logprobs = nullptr;
  if (auto c = j.find("choices"); c != j.end()) {
    if (!c->is_array() || c->empty() || !(*c)[0].is_object()) throw ProtocolError("completion response has no choices");
    if (auto lp = (*c)[0].find("logprobs"); lp != (*c)[0].end()) logprobs = &*lp;
  } else if (auto lp = j.find("logprobs"); lp != j.end()) {
    logprobs = &*lp;
  } else {
    throw ProtocolError("completion response has neither choices nor logprobs");
  }
  if (logprobs == nullptr || logprobs->is_null())
    throw ConfigError("backend returned no logprobs; top-K log-scores are unavailable for this model/endpoint");

  auto top = logprobs->find("top_logprobs");
  if (top == logprobs->end() || top->is_null() || (top->is_array() && top->empty()) ||
      (top->is_array() && (*top)[0].is_null()))
    throw ConfigError("backend returned no top_logprobs; top-K log-scores are unavailable");
  if (!top->is_array() || !(*top)[0].is_object()) throw ProtocolError("top_logprobs is not an array of objects");

  SparseLogits::Map entries;
  for (const auto& [token, score] : (*top)[0].items()) {
    if (!score.is_number()) throw ProtocolError("top_logprobs entry for '" + token + "' is not a number");
    entries.emplace(token, score.get<double>());
  }
  if (entries.empty()) throw ConfigError("backend returned an empty top_logprobs slice");
  return SparseLogits(std::move(entries)).top(top_k);
}

class OpenAICompatibleProvider final : public LogitProvider {
 public:
  explicit OpenAICompatibleProvider(ProviderConfig config,
                                    std::chrono::milliseconds backoff_base = std::chrono::milliseconds(250))
      : config_(std::move(config)), backoff_base_(backoff_base) {
    config_.validate();
    split_endpoint(config_.endpoint, base_, path_);
  }

  SparseLogits next_token_logits(std::string_view prefix) const override {
    if (prefix.empty()) throw InvariantError("next_token_logits: empty prefix");
    const std::string body = nlohmann::json{{"model", config_.model_id},
                                            {"prompt", std::string(prefix)},
                                            {"max_tokens", 1},
                                            {"temperature", 0},
                                            {"logprobs", config_.top_k}}
                                 .dump();
    const std::string route = path_ + "/completions";
    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_retries; ++attempt) {
      if (attempt > 1) std::this_thread::sleep_for(backoff(attempt - 1));

      httplib::Client client(base_);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
      const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
      client.set_connection_timeout(secs.count(), usecs.count());
      client.set_read_timeout(secs.count(), usecs.count());
      client.set_write_timeout(secs.count(), usecs.count());
      httplib::Headers headers;
      if (config_.auth_token && !config_.auth_token->empty())
        headers.emplace("Authorization", "Bearer " + *config_.auth_token);

      auto res = client.Post(route, headers, body, "application/json");
      if (!res) {
        last_error = "connection failed (" + httplib::to_string(res.error()) + ")";
        continue;
      }
      if (res->status == 200) return parse_completion_logprobs(res->body, config_.top_k);
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status != 429 && res->status < 500)
        throw ProviderError(config_.endpoint + "/completions: " + last_error + " " + res->body.substr(0, 200));
    }
    throw ProviderError(config_.endpoint + "/completions: " + last_error + " after " +
                        std::to_string(config_.max_retries) + " attempt(s)");
  }

  std::string model_id() const override { return config_.model_id; }
  std::size_t top_k() const override { return config_.top_k; }

  const ProviderConfig& config() const { return config_; }

 private:
  std::chrono::milliseconds backoff(int retry) const {
    const auto capped = std::min(retry - 1, 5);
    return std::min(backoff_base_ * (1 << capped), std::chrono::milliseconds(8000));
  }

  static void split_endpoint(const std::string& endpoint, std::string& base, std::string& path) {
    const auto scheme_end = endpoint.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("endpoint must start with http:// or https://");
    const auto scheme = endpoint.substr(0, scheme_end);
    if (scheme != "http" && scheme != "https") throw ConfigError("endpoint scheme must be http or https");
    const auto path_start = endpoint.find('/', scheme_end + 3);
    base = endpoint.substr(0, path_start);
    path = path_start == std::string::npos ? "" : endpoint.substr(path_start);
    while (!path.empty() && path.back() == '/') path.pop_back();
    if (base.size() <= scheme_end + 3) throw ConfigError("endpoint has no host");
  }

  ProviderConfig config_;
  std::chrono::milliseconds backoff_base_;
  std::string base_;
  std::string path_;
};

}  // namespace lara
