#pragma once

#include <chrono>
#include <cstddef>
#include <filesystem>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lara/core.hpp"
#include "lara/error.hpp"

namespace lara {

/// Default top-K, the largest slice hosted completion APIs hand out.
inline constexpr std::size_t kDefaultTopK = 20;

/// A source of next-token log-scores. Implementations must be safe for
/// concurrent calls.
class LogitProvider {
 public:
  virtual ~LogitProvider() = default;

  /// Top-K next-token log-scores after `prefix`.
  virtual SparseLogits next_token_logits(std::string_view prefix) const = 0;

  virtual std::string model_id() const = 0;
  virtual std::size_t top_k() const = 0;

  /// Known token strings, if the backend exposes a closed vocabulary.
  /// Empty for remote backends.
  virtual std::vector<std::string> vocabulary() const { return {}; }
};

struct ProviderConfig {
  std::string endpoint;  // e.g. https://api.openai.com/v1
  std::string model_id;
  std::size_t top_k = kDefaultTopK;
  std::optional<std::string> auth_token;
  std::chrono::milliseconds timeout{30000};
  int max_retries = 4;  // total backend attempts per logical request

  void validate() const {
    if (endpoint.empty()) throw ConfigError("provider endpoint is empty");
    if (model_id.empty()) throw ConfigError("provider model id is empty");
    if (top_k < 1 || top_k > 100) throw ConfigError("top_k must be in [1, 100]");
    if (timeout.count() <= 0) throw ConfigError("timeout must be positive");
    if (max_retries < 1) throw ConfigError("max_retries must be at least 1");
  }
};

// ---------------------------------------------------------------------------
// TableLM: deterministic in-process mock
// ---------------------------------------------------------------------------

/// Rule-table language model. A rule matches when the prefix ends with
/// `suffix` and (if set) contains `contains`; the first matching rule wins,
/// otherwise the default logits are returned.
class TableLM final : public LogitProvider {
 public:
  struct Rule {
    std::string suffix;
    std::string contains;
    SparseLogits logits;
  };

  explicit TableLM(SparseLogits default_logits, std::vector<Rule> rules = {}, std::size_t top_k = kDefaultTopK,
                   std::string model_id = "table-lm")
      : default_(std::move(default_logits)), rules_(std::move(rules)), top_k_(top_k), model_id_(std::move(model_id)) {
    if (top_k_ < 1) throw ConfigError("top_k must be at least 1");
    if (default_.empty()) throw ConfigError("table LM default logits are empty");
    for (const auto& r : rules_)
      if (r.logits.empty()) throw ConfigError("table LM rule has empty logits");
  }

  SparseLogits next_token_logits(std::string_view prefix) const override {
    if (prefix.empty()) throw InvariantError("next_token_logits: empty prefix");
    return match(prefix).top(top_k_);
  }

  std::string model_id() const override { return model_id_; }
  std::size_t top_k() const override { return top_k_; }

  std::vector<std::string> vocabulary() const override {
    std::set<std::string> keys;
    for (const auto& [k, _] : default_.entries()) keys.insert(k);
    for (const auto& r : rules_)
      for (const auto& [k, _] : r.logits.entries()) keys.insert(k);
    return {keys.begin(), keys.end()};
  }

  const SparseLogits& default_logits() const { return default_; }
  const std::vector<Rule>& rules() const { return rules_; }

  /// {"model_id"?, "top_k"?, "default": {...}, "rules": [{"suffix", "contains"?, "logits"}]}
  static TableLM from_json(const nlohmann::json& j, const std::string& where = "table") {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    try {
      auto def = SparseLogits::from_json(j.at("default"));
      std::vector<Rule> rules;
      if (auto it = j.find("rules"); it != j.end()) {
        if (!it->is_array()) throw ConfigError("\"rules\" must be an array");
        for (const auto& r : *it)
          rules.push_back({r.value("suffix", std::string{}), r.value("contains", std::string{}),
                           SparseLogits::from_json(r.at("logits"))});
      }
      return TableLM(std::move(def), std::move(rules), j.value("top_k", kDefaultTopK),
                     j.value("model_id", std::string("table-lm")));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const ProtocolError& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }

  static TableLM load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": malformed JSON (" + e.what() + ")");
    }
    return from_json(j, path.string());
  }

  nlohmann::json to_json() const {
    nlohmann::json rules = nlohmann::json::array();
    for (const auto& r : rules_) {
      nlohmann::json jr = {{"suffix", r.suffix}, {"logits", r.logits.to_json()}};
      if (!r.contains.empty()) jr["contains"] = r.contains;
      rules.push_back(std::move(jr));
    }
    return {{"model_id", model_id_}, {"top_k", top_k_}, {"default", default_.to_json()}, {"rules", rules}};
  }

 private:
  const SparseLogits& match(std::string_view prefix) const {
    for (const auto& r : rules_) {
      const bool suffix_ok = prefix.size() >= r.suffix.size() &&
                             prefix.compare(prefix.size() - r.suffix.size(), r.suffix.size(), r.suffix) == 0;
      if (suffix_ok && (r.contains.empty() || prefix.find(r.contains) != std::string_view::npos)) return r.logits;
    }
    return default_;
  }

  SparseLogits default_;
  std::vector<Rule> rules_;
  std::size_t top_k_;
  std::string model_id_;
};

// ---------------------------------------------------------------------------
// RecordingProvider: request recorder for tests and cost accounting
// ---------------------------------------------------------------------------

/// Pass-through decorator that logs every prefix it forwards.
class RecordingProvider final : public LogitProvider {
 public:
  explicit RecordingProvider(const LogitProvider& inner) : inner_(inner) {}

  SparseLogits next_token_logits(std::string_view prefix) const override {
    {
      std::lock_guard lock(mu_);
      prefixes_.emplace_back(prefix);
    }
    return inner_.next_token_logits(prefix);
  }

  std::string model_id() const override { return inner_.model_id(); }
  std::size_t top_k() const override { return inner_.top_k(); }
  std::vector<std::string> vocabulary() const override { return inner_.vocabulary(); }

  std::vector<std::string> prefixes() const {
    std::lock_guard lock(mu_);
    return prefixes_;
  }
  std::size_t count() const {
    std::lock_guard lock(mu_);
    return prefixes_.size();
  }
  void clear() {
    std::lock_guard lock(mu_);
    prefixes_.clear();
  }

 private:
  const LogitProvider& inner_;
  mutable std::mutex mu_;
  mutable std::vector<std::string> prefixes_;
};

}  // namespace lara
