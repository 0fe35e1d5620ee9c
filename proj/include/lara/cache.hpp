#pragma once

// Content-addressed response cache: one JSON file per entry, named by the
// SHA-256 of the canonical request, written via temp file + atomic rename.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "lara/core.hpp"
#include "lara/error.hpp"
#include "lara/provider.hpp"

namespace lara {

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw InvariantError("EVP_Digest(sha256) failed");
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

/// Canonical request bytes: model_id NUL decimal(top_k) NUL prefix.
inline std::string canonical_request(std::string_view model_id, std::string_view prefix, std::size_t top_k) {
  std::string s;
  s.reserve(model_id.size() + prefix.size() + 24);
  s.append(model_id);
  s.push_back('\0');
  s.append(std::to_string(top_k));
  s.push_back('\0');
  s.append(prefix);
  return s;
}

inline std::string cache_key(std::string_view model_id, std::string_view prefix, std::size_t top_k) {
  return sha256_hex(canonical_request(model_id, prefix, top_k));
}

inline bool is_cache_key(std::string_view key) {
  if (key.size() != 64) return false;
  for (char c : key)
    if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
  return true;
}

struct CacheStats {
  std::size_t entries = 0;
  std::uintmax_t bytes = 0;
};

/// Directory-backed cache. I/O failures degrade to pass-through with a
/// single warning; they never change returned values.
class DiskCache {
 public:
  explicit DiskCache(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) degrade("cannot create cache directory " + dir_.string() + ": " + ec.message());
  }

  const std::filesystem::path& dir() const { return dir_; }

  std::optional<SparseLogits> get(const std::string& key) const {
    if (!is_cache_key(key)) throw InvariantError("malformed cache key '" + key + "'");
    std::ifstream in(path_for(key), std::ios::binary);
    if (!in) return std::nullopt;
    try {
      auto j = nlohmann::json::parse(in);
      if (j.at("key").get<std::string>() != key) throw ConfigError("key mismatch");
      return SparseLogits::from_json(j.at("logits"));
    } catch (const std::exception& e) {
      degrade("unreadable cache entry " + key + " (" + e.what() + ")");
      return std::nullopt;
    }
  }

  /// Idempotent: an existing entry is never rewritten.
  void put(const std::string& key, const SparseLogits& value) const {
    if (!is_cache_key(key)) throw InvariantError("malformed cache key '" + key + "'");
    const auto target = path_for(key);
    std::error_code ec;
    if (std::filesystem::exists(target, ec)) return;

    std::string payload;
    try {
      payload = nlohmann::json{{"key", key}, {"created_at", utc_now()}, {"logits", value.to_json()}}.dump();
    } catch (const nlohmann::json::exception& e) {
      degrade(std::string("cannot serialize cache entry: ") + e.what());
      return;
    }
    const auto tmp = dir_ / (".tmp-" + key + "-" + unique_suffix());
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << payload;
      if (!out) {
        degrade("cannot write cache entry in " + dir_.string());
        std::filesystem::remove(tmp, ec);
        return;
      }
    }
    std::filesystem::rename(tmp, target, ec);
    if (ec) {
      degrade("cannot publish cache entry: " + ec.message());
      std::filesystem::remove(tmp, ec);
    }
  }

  static CacheStats stats(const std::filesystem::path& dir) {
    CacheStats s;
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) return s;
    for (const auto& e : std::filesystem::directory_iterator(dir, ec)) {
      if (!is_entry(e.path())) continue;
      ++s.entries;
      s.bytes += e.file_size(ec);
    }
    return s;
  }

  /// Removes every entry (and stale temp files). No-op for a missing dir.
  static std::size_t clear(const std::filesystem::path& dir) {
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) return 0;
    std::vector<std::filesystem::path> doomed;
    for (const auto& e : std::filesystem::directory_iterator(dir, ec))
      if (is_entry(e.path()) || e.path().filename().string().rfind(".tmp-", 0) == 0) doomed.push_back(e.path());
    std::size_t removed = 0;
    for (const auto& p : doomed) removed += std::filesystem::remove(p, ec) && is_entry(p) ? 1 : 0;
    return removed;
  }

 private:
  static bool is_entry(const std::filesystem::path& p) {
    return p.extension() == ".json" && is_cache_key(p.stem().string());
  }

  std::filesystem::path path_for(const std::string& key) const { return dir_ / (key + ".json"); }

  static std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  static std::string unique_suffix() {
    thread_local std::mt19937_64 gen{std::random_device{}()};
    return std::to_string(gen());
  }

  void degrade(const std::string& why) const {
    if (!warned_.exchange(true)) warn("cache degraded to pass-through: " + why);
  }

  std::filesystem::path dir_;
  mutable std::atomic<bool> warned_{false};
};

struct CacheCounters {
  std::size_t memory_hits = 0;
  std::size_t disk_hits = 0;
  std::size_t backend_requests = 0;
};

/// Memoizing decorator: in-process map first, then the optional disk cache,
/// then the wrapped backend. Concurrent identical requests share one
/// in-flight backend call.
class CachingProvider final : public LogitProvider {
 public:
  explicit CachingProvider(const LogitProvider& inner, const DiskCache* disk = nullptr) : inner_(inner), disk_(disk) {}

  SparseLogits next_token_logits(std::string_view prefix) const override {
    const std::string key = cache_key(inner_.model_id(), prefix, inner_.top_k());
    std::promise<SparseLogits> promise;
    std::shared_future<SparseLogits> pending;
    {
      std::lock_guard lock(mu_);
      if (auto it = memo_.find(key); it != memo_.end()) {
        ++memory_hits_;
        pending = it->second;
      } else {
        memo_.emplace(key, promise.get_future().share());
      }
    }
    if (pending.valid()) return pending.get();

    try {
      if (disk_) {
        if (auto hit = disk_->get(key)) {
          ++disk_hits_;
          promise.set_value(*hit);
          return *hit;
        }
      }
      auto value = inner_.next_token_logits(prefix);
      ++backend_requests_;
      if (disk_) disk_->put(key, value);
      promise.set_value(value);
      return value;
    } catch (...) {
      promise.set_exception(std::current_exception());
      std::lock_guard lock(mu_);
      memo_.erase(key);
      throw;
    }
  }

  std::string model_id() const override { return inner_.model_id(); }
  std::size_t top_k() const override { return inner_.top_k(); }
  std::vector<std::string> vocabulary() const override { return inner_.vocabulary(); }

  CacheCounters counters() const { return {memory_hits_.load(), disk_hits_.load(), backend_requests_.load()}; }

 private:
  const LogitProvider& inner_;
  const DiskCache* disk_;
  mutable std::mutex mu_;
  mutable std::unordered_map<std::string, std::shared_future<SparseLogits>> memo_;
  mutable std::atomic<std::size_t> memory_hits_{0}, disk_hits_{0}, backend_requests_{0};
};

}  // namespace lara
