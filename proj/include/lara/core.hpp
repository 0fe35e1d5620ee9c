#pragma once

// Domain types shared by every module: demonstrations, prompt templates,
// partitions of the demonstration pool, weight vectors and sparse logits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "lara/error.hpp"
#include "lara/random.hpp"

namespace lara {

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

struct Demonstration {
  std::string input;
  std::string output;

  Demonstration() = default;
  Demonstration(std::string in, std::string out) : input(std::move(in)), output(std::move(out)) {
    if (input.empty()) throw ConfigError("demonstration input is empty");
    if (output.empty()) throw ConfigError("demonstration output is empty");
  }

  friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

using DemoSet = std::vector<Demonstration>;

namespace detail {

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::string required_string(const nlohmann::json& obj, const char* field,
                                   const std::string& where) {
  auto it = obj.find(field);
  if (it == obj.end()) throw ConfigError(where + ": missing \"" + field + "\"");
  if (!it->is_string()) throw ConfigError(where + ": \"" + field + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace detail

/// Reads one {"input", "output"} object per line; blank lines are skipped.
/// Errors name the file and the 1-based line number.
inline DemoSet load_demos_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  DemoSet demos;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + " line " + std::to_string(lineno);
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(where + ": malformed JSON (" + e.what() + ")");
    }
    if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
    try {
      demos.emplace_back(detail::required_string(obj, "input", where),
                         detail::required_string(obj, "output", where));
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.rfind(where, 0) == 0 ? msg : where + ": " + msg);
    }
  }
  return demos;
}

// ---------------------------------------------------------------------------
// Templates
// ---------------------------------------------------------------------------

/// Prompt template. `{question}` and `{answer}` are accepted as aliases of
/// `{input}` and `{output}` so dataset-style templates load unchanged.
class Template {
 public:
  Template(std::string demo_pattern, std::string query_pattern, std::string separator)
      : demo_(std::move(demo_pattern)), query_(std::move(query_pattern)), sep_(std::move(separator)) {
    if (count_slot(demo_, kInputNames) != 1)
      throw ConfigError("template demo pattern must contain {input} exactly once");
    if (count_slot(demo_, kOutputNames) != 1)
      throw ConfigError("template demo pattern must contain {output} exactly once");
    if (count_slot(query_, kInputNames) != 1)
      throw ConfigError("template query pattern must contain {input} exactly once");
  }

  const std::string& demo_pattern() const { return demo_; }
  const std::string& query_pattern() const { return query_; }
  const std::string& separator() const { return sep_; }

  std::string render_demo(const Demonstration& d) const { return substitute(demo_, d.input, &d.output); }
  std::string render_query(std::string_view input) const { return substitute(query_, input, nullptr); }

  /// Text the model should produce after render_query(d.input) to reproduce
  /// render_demo(d). Falls back to the bare output when the query rendering
  /// is not a prefix of the demo rendering.
  std::string target_continuation(const Demonstration& d) const {
    const std::string full = render_demo(d);
    const std::string query = render_query(d.input);
    if (full.size() > query.size() && full.compare(0, query.size(), query) == 0)
      return full.substr(query.size());
    return d.output;
  }

  static Template from_json(const nlohmann::json& j, const std::string& where = "template") {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    std::string sep = "\n\n";
    if (auto it = j.find("separator"); it != j.end()) {
      if (!it->is_string()) throw ConfigError(where + ": \"separator\" must be a string");
      sep = it->get<std::string>();
    }
    try {
      return Template(detail::required_string(j, "demo", where), detail::required_string(j, "query", where),
                      std::move(sep));
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      throw ConfigError(msg.rfind(where, 0) == 0 ? msg : where + ": " + msg);
    }
  }

  static Template load(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError(path.string() + ": malformed JSON (" + e.what() + ")");
    }
    return from_json(j, path.string());
  }

  nlohmann::json to_json() const { return {{"demo", demo_}, {"query", query_}, {"separator", sep_}}; }

 private:
  static constexpr std::string_view kInputNames[] = {"{input}", "{question}"};
  static constexpr std::string_view kOutputNames[] = {"{output}", "{answer}"};

  static std::size_t count_slot(std::string_view pattern, std::span<const std::string_view> names) {
    std::size_t n = 0;
    for (auto name : names)
      for (auto pos = pattern.find(name); pos != std::string_view::npos; pos = pattern.find(name, pos + 1)) ++n;
    return n;
  }

  // Single left-to-right pass, so substituted text is never re-scanned.
  static std::string substitute(std::string_view pattern, std::string_view input, const std::string* output) {
    std::string out;
    out.reserve(pattern.size() + input.size() + (output ? output->size() : 0));
    std::size_t i = 0;
    while (i < pattern.size()) {
      bool replaced = false;
      if (pattern[i] == '{') {
        for (auto name : kInputNames)
          if (pattern.substr(i, name.size()) == name) {
            out.append(input);
            i += name.size();
            replaced = true;
            break;
          }
        if (!replaced && output)
          for (auto name : kOutputNames)
            if (pattern.substr(i, name.size()) == name) {
              out.append(*output);
              i += name.size();
              replaced = true;
              break;
            }
      }
      if (!replaced) out.push_back(pattern[i++]);
    }
    return out;
  }

  std::string demo_;
  std::string query_;
  std::string sep_;
};

/// Separator-joined rendering of a demonstration group.
inline std::string render_context(std::span<const Demonstration> group, const Template& tpl) {
  if (group.empty()) throw InvariantError("render_context: empty group");
  std::string out = tpl.render_demo(group.front());
  for (const auto& d : group.subspan(1)) {
    out += tpl.separator();
    out += tpl.render_demo(d);
  }
  return out;
}

/// Full request text for one group: context, separator, query. An empty
/// context (zero-shot) yields the query alone.
inline std::string join_prompt(std::string_view context, std::string_view separator, std::string_view query) {
  std::string out;
  if (!context.empty()) {
    out.reserve(context.size() + separator.size() + query.size());
    out.append(context);
    out.append(separator);
  }
  out.append(query);
  return out;
}

// ---------------------------------------------------------------------------
// Partitions
// ---------------------------------------------------------------------------

struct Partition {
  std::size_t L = 0;
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> dropped;

  std::size_t k() const { return groups.size(); }

  /// Demonstrations of group `g`, in group order.
  DemoSet group_demos(std::size_t g, std::span<const Demonstration> demos) const {
    DemoSet out;
    out.reserve(groups.at(g).size());
    for (auto i : groups[g]) out.push_back(demos[i]);
    return out;
  }

  /// Rendered context C_g for every group.
  std::vector<std::string> contexts(std::span<const Demonstration> demos, const Template& tpl) const {
    std::vector<std::string> out;
    out.reserve(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) out.push_back(render_context(group_demos(g, demos), tpl));
    return out;
  }
};

/// Splits indices 0..n-1 into floor(n/L) consecutive groups of size L; the
/// trailing n mod L indices are reported in `dropped`. With a shuffle seed
/// the indices are permuted first (Fisher-Yates on lara::Rng).
inline Partition partition_demos(std::size_t n, std::size_t L, std::optional<std::uint64_t> shuffle_seed = {}) {
  if (L == 0) throw ConfigError("group size L must be at least 1");
  if (L > n)
    throw ConfigError("insufficient demonstrations: L=" + std::to_string(L) + " but only " + std::to_string(n) +
                      " available");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (shuffle_seed) {
    Rng rng(*shuffle_seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  }
  Partition p;
  p.L = L;
  const std::size_t k = n / L;
  p.groups.reserve(k);
  for (std::size_t g = 0; g < k; ++g)
    p.groups.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(g * L),
                          order.begin() + static_cast<std::ptrdiff_t>((g + 1) * L));
  p.dropped.assign(order.begin() + static_cast<std::ptrdiff_t>(k * L), order.end());
  return p;
}

inline Partition partition_demos(std::span<const Demonstration> demos, std::size_t L,
                                 std::optional<std::uint64_t> shuffle_seed = {}) {
  return partition_demos(demos.size(), L, shuffle_seed);
}

/// Cross-validation halves over group indices: A = [0, floor(k/2)), B = rest.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_halves(std::size_t k) {
  if (k < 2) throw ConfigError("cross-validation requires at least two groups");
  std::vector<std::size_t> a(k / 2), b(k - k / 2);
  std::iota(a.begin(), a.end(), std::size_t{0});
  std::iota(b.begin(), b.end(), k / 2);
  return {std::move(a), std::move(b)};
}

inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_halves(const Partition& p) {
  return split_halves(p.k());
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

enum class WeightMode { continuous, binary };

inline std::string_view to_string(WeightMode m) { return m == WeightMode::binary ? "binary" : "continuous"; }

inline WeightMode parse_weight_mode(std::string_view s) {
  if (s == "binary") return WeightMode::binary;
  if (s == "continuous") return WeightMode::continuous;
  throw ConfigError("unknown weight mode '" + std::string(s) + "' (expected continuous or binary)");
}

class WeightVector {
 public:
  static constexpr double kSumTolerance = 1e-9;

  WeightVector(WeightMode mode, std::vector<double> values) : mode_(mode), values_(std::move(values)) {
    if (values_.empty()) throw ConfigError("weight vector is empty");
    if (mode_ == WeightMode::binary) {
      for (double v : values_)
        if (v != 0.0 && v != 1.0) throw ConfigError("binary weights must be 0 or 1");
    } else {
      double sum = 0.0;
      for (double v : values_) {
        if (!std::isfinite(v) || v < 0.0) throw ConfigError("continuous weights must be finite and non-negative");
        sum += v;
      }
      if (std::abs(sum - 1.0) > kSumTolerance) throw ConfigError("continuous weights must sum to 1");
    }
  }

  static WeightVector uniform(std::size_t k) {
    if (k == 0) throw ConfigError("weight vector is empty");
    return {WeightMode::continuous, std::vector<double>(k, 1.0 / static_cast<double>(k))};
  }
  static WeightVector one_hot(std::size_t k, std::size_t i) {
    std::vector<double> v(k, 0.0);
    v.at(i) = 1.0;
    return {WeightMode::continuous, std::move(v)};
  }
  static WeightVector ones(std::size_t k) { return {WeightMode::binary, std::vector<double>(k, 1.0)}; }

  WeightMode mode() const { return mode_; }
  const std::vector<double>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

  std::vector<std::size_t> active() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < values_.size(); ++i)
      if (values_[i] != 0.0) out.push_back(i);
    return out;
  }
  std::size_t active_count() const { return active().size(); }

  friend bool operator==(const WeightVector&, const WeightVector&) = default;

 private:
  WeightMode mode_;
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Sparse logits
// ---------------------------------------------------------------------------

/// Top-K slice of a next-token distribution: token byte string -> log-score.
/// Keys are ordered bytewise, which is also the tie-break order for argmax.
class SparseLogits {
 public:
  using Map = std::map<std::string, double>;

  SparseLogits() = default;  // empty placeholder; never returned by providers
  explicit SparseLogits(Map entries) : entries_(std::move(entries)) { validate(); }
  SparseLogits(std::initializer_list<Map::value_type> init) : entries_(init) { validate(); }

  const Map& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(const std::string& key) const { return entries_.count(key) != 0; }
  double at(const std::string& key) const { return entries_.at(key); }

  double min_score() const {
    double m = entries_.begin()->second;
    for (const auto& [_, v] : entries_) m = std::min(m, v);
    return m;
  }

  /// Highest-scoring key; ties go to the bytewise-smallest key.
  const std::string& argmax() const {
    auto best = entries_.begin();
    for (auto it = entries_.begin(); it != entries_.end(); ++it)
      if (it->second > best->second) best = it;
    return best->first;
  }

  /// Keeps the `k` highest scores (ties resolved toward smaller keys).
  SparseLogits top(std::size_t k) const {
    if (entries_.size() <= k) return *this;
    std::vector<const Map::value_type*> items;
    items.reserve(entries_.size());
    for (const auto& e : entries_) items.push_back(&e);
    std::stable_sort(items.begin(), items.end(), [](auto* a, auto* b) { return a->second > b->second; });
    Map kept;
    for (std::size_t i = 0; i < k; ++i) kept.insert(*items[i]);
    return SparseLogits(std::move(kept));
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : entries_) j[k] = v;
    return j;
  }

  static SparseLogits from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("logits must be a JSON object of token -> number");
    Map m;
    for (const auto& [k, v] : j.items()) {
      if (!v.is_number()) throw ConfigError("logit for token '" + k + "' is not a number");
      m.emplace(k, v.get<double>());
    }
    return SparseLogits(std::move(m));
  }

  friend bool operator==(const SparseLogits&, const SparseLogits&) = default;

 private:
  void validate() const {
    if (entries_.empty()) throw ProtocolError("sparse logits are empty");
    for (const auto& [k, v] : entries_)
      if (!std::isfinite(v)) throw ProtocolError("non-finite log-score for token '" + k + "'");
  }

  Map entries_;
};

}  // namespace lara
