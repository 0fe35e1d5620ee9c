#pragma once

// Logit-arithmetic ensemble decoding over per-group sparse logits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lara/core.hpp"
#include "lara/error.hpp"
#include "lara/parallel.hpp"
#include "lara/provider.hpp"

namespace lara {

struct DecodeParams {
  std::size_t max_tokens = 16;
  std::vector<std::string> stop_sequences{"\n"};
  double impute_margin = 0.0;   // delta: missing keys get (group min - delta)
  bool normalize_binary = false;  // divide binary sums by the selected count

  void validate() const {
    if (max_tokens < 1) throw ConfigError("max_tokens must be at least 1");
    if (!(impute_margin >= 0.0) || !std::isfinite(impute_margin))
      throw ConfigError("impute margin must be finite and non-negative");
    for (const auto& s : stop_sequences)
      if (s.empty()) throw ConfigError("stop sequences must be non-empty");
  }
};

/// Group contexts C_i, their weights, and the rendered query. An empty
/// context string stands for the zero-shot prompt (query alone).
struct EnsembleContext {
  std::vector<std::string> contexts;
  WeightVector weights;
  std::string query;
  std::string separator = "\n\n";

  void validate() const {
    if (contexts.size() != weights.size())
      throw InvariantError("ensemble has " + std::to_string(contexts.size()) + " contexts but " +
                           std::to_string(weights.size()) + " weights");
    if (weights.active_count() == 0) throw ConfigError("empty ensemble: all weights are zero");
  }

  std::string prompt(std::size_t group) const { return join_prompt(contexts.at(group), separator, query); }
};

// ---------------------------------------------------------------------------
// Logit arithmetic
// ---------------------------------------------------------------------------

namespace detail {

inline std::set<std::string> key_union(std::span<const SparseLogits* const> sets, const std::string* extra) {
  std::set<std::string> keys;
  for (const auto* s : sets)
    for (const auto& [k, _] : s->entries()) keys.insert(k);
  if (extra) keys.insert(*extra);
  return keys;
}

// Weighted sum over the aligned union. `weights` parallels `sets`.
inline SparseLogits::Map weighted_sum(std::span<const SparseLogits* const> sets, std::span<const double> weights,
                                      double delta, const std::string* extra_key) {
  const auto keys = key_union(sets, extra_key);
  SparseLogits::Map out;
  for (const auto& k : keys) out.emplace_hint(out.end(), k, 0.0);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    const auto& entries = sets[i]->entries();
    const double fill = sets[i]->min_score() - delta;
    auto src = entries.begin();
    for (auto& [k, acc] : out) {
      while (src != entries.end() && src->first < k) ++src;
      const double z = (src != entries.end() && src->first == k) ? src->second : fill;
      acc += weights[i] * z;
    }
  }
  return out;
}

inline double log_sum_exp(const SparseLogits::Map& m) {
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& [_, v] : m) hi = std::max(hi, v);
  double sum = 0.0;
  for (const auto& [_, v] : m) sum += std::exp(v - hi);
  return hi + std::log(sum);
}

}  // namespace detail

/// Pads every set to the union key set. A group's missing keys are imputed
/// with that group's minimum observed log-score minus delta.
inline std::vector<SparseLogits> union_align(std::span<const SparseLogits> sets, double delta = 0.0) {
  std::vector<const SparseLogits*> ptrs;
  for (const auto& s : sets) {
    if (s.empty()) throw InvariantError("union_align: empty logit set");
    ptrs.push_back(&s);
  }
  const auto keys = detail::key_union(ptrs, nullptr);
  std::vector<SparseLogits> out;
  out.reserve(sets.size());
  for (const auto& s : sets) {
    const double fill = s.min_score() - delta;
    SparseLogits::Map m;
    for (const auto& k : keys) {
      auto it = s.entries().find(k);
      m.emplace_hint(m.end(), k, it != s.entries().end() ? it->second : fill);
    }
    out.emplace_back(std::move(m));
  }
  return out;
}

/// Per-key sum of w_i * z_i over the aligned union of nonzero-weight groups.
/// Zero-weight groups are ignored and may be passed as empty placeholders.
/// Binary weights sum raw; `normalize_binary` divides by the selected count.
inline SparseLogits combine_logits(std::span<const SparseLogits> sets, const WeightVector& w, double delta = 0.0,
                                   bool normalize_binary = false) {
  if (sets.size() != w.size())
    throw InvariantError("combine_logits: " + std::to_string(sets.size()) + " logit sets for " +
                         std::to_string(w.size()) + " weights");
  std::vector<const SparseLogits*> active;
  std::vector<double> weights;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    if (w[i] == 0.0) continue;
    if (sets[i].empty()) throw InvariantError("combine_logits: missing logits for active group " + std::to_string(i));
    active.push_back(&sets[i]);
    weights.push_back(w[i]);
  }
  if (active.empty()) throw ConfigError("empty ensemble: all weights are zero");
  if (w.mode() == WeightMode::binary && normalize_binary)
    for (auto& x : weights) x /= static_cast<double>(active.size());
  return SparseLogits(detail::weighted_sum(active, weights, delta, nullptr));
}

/// Max-shifted softmax over the entries.
inline std::map<std::string, double> softmax(const SparseLogits& logits) {
  if (logits.empty()) throw InvariantError("softmax: empty logits");
  const double lse = detail::log_sum_exp(logits.entries());
  std::map<std::string, double> p;
  for (const auto& [k, v] : logits.entries()) p.emplace_hint(p.end(), k, std::exp(v - lse));
  return p;
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Prompt-length accounting for the requests a decode issued.
struct RequestTally {
  std::size_t requests = 0;
  std::size_t total_prompt_chars = 0;
  std::size_t max_prompt_chars = 0;

  void add(std::size_t chars) {
    ++requests;
    total_prompt_chars += chars;
    max_prompt_chars = std::max(max_prompt_chars, chars);
  }
  void merge(const RequestTally& o) {
    requests += o.requests;
    total_prompt_chars += o.total_prompt_chars;
    max_prompt_chars = std::max(max_prompt_chars, o.max_prompt_chars);
  }
};

struct DecodeResult {
  std::string text;
  std::vector<std::string> tokens;
  RequestTally tally;
};

namespace detail {

struct ActiveGroups {
  std::vector<std::size_t> index;
  std::vector<double> weight;
};

inline ActiveGroups active_groups(const WeightVector& w, bool normalize_binary) {
  ActiveGroups a;
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] != 0.0) {
      a.index.push_back(i);
      a.weight.push_back(w[i]);
    }
  if (w.mode() == WeightMode::binary && normalize_binary)
    for (auto& x : a.weight) x /= static_cast<double>(a.index.size());
  return a;
}

// Fetches logits for every active group at prompt(i) + continuation.
inline std::vector<SparseLogits> fetch_step(const EnsembleContext& ens, const ActiveGroups& active,
                                            std::string_view continuation, const LogitProvider& provider,
                                            ThreadPool* pool, RequestTally* tally) {
  std::vector<SparseLogits> out(active.index.size());
  std::vector<std::size_t> lengths(active.index.size());
  parallel_for(pool, active.index.size(), [&](std::size_t j) {
    const std::size_t g = active.index[j];
    std::string prefix = ens.prompt(g);
    prefix.append(continuation);
    lengths[j] = prefix.size();
    try {
      out[j] = provider.next_token_logits(prefix);
    } catch (...) {
      rethrow_with_context("group " + std::to_string(g));
    }
  });
  if (tally)
    for (auto n : lengths) tally->add(n);
  return out;
}

// Position of the earliest stop-sequence occurrence, or npos.
inline std::size_t find_stop(std::string_view text, std::span<const std::string> stops) {
  std::size_t best = std::string_view::npos;
  for (const auto& s : stops) best = std::min(best, text.find(s));
  return best;
}

}  // namespace detail

/// Greedy logit-arithmetic decoding. Each step fetches every nonzero-weight
/// group concurrently, combines, and appends the argmax token (ties: the
/// bytewise-smallest token). Stops at the first stop sequence (excluded
/// from the result) or after max_tokens.
inline DecodeResult greedy_decode(const EnsembleContext& ens, const LogitProvider& provider,
                                  const DecodeParams& params, ThreadPool* pool = nullptr) {
  ens.validate();
  params.validate();
  const auto active = detail::active_groups(ens.weights, params.normalize_binary);
  std::vector<const SparseLogits*> ptrs(active.index.size());

  DecodeResult result;
  for (std::size_t step = 0; step < params.max_tokens; ++step) {
    auto logits = detail::fetch_step(ens, active, result.text, provider, pool, &result.tally);
    for (std::size_t j = 0; j < logits.size(); ++j) ptrs[j] = &logits[j];
    const SparseLogits combined(detail::weighted_sum(ptrs, active.weight, params.impute_margin, nullptr));
    const std::string& token = combined.argmax();
    result.tokens.push_back(token);
    result.text += token;
    if (auto pos = detail::find_stop(result.text, params.stop_sequences); pos != std::string::npos) {
      result.text.resize(pos);
      break;
    }
  }
  return result;
}

/// Greedy decoding of a single context with no ensemble arithmetic: the
/// plain in-context-learning reference.
inline DecodeResult single_context_decode(std::string_view context, std::string_view separator,
                                          std::string_view query, const LogitProvider& provider,
                                          const DecodeParams& params) {
  params.validate();
  const std::string prompt = join_prompt(context, separator, query);
  DecodeResult result;
  for (std::size_t step = 0; step < params.max_tokens; ++step) {
    const std::string prefix = prompt + result.text;
    result.tally.add(prefix.size());
    const auto logits = provider.next_token_logits(prefix);
    const std::string& token = logits.argmax();
    result.tokens.push_back(token);
    result.text += token;
    if (auto pos = detail::find_stop(result.text, params.stop_sequences); pos != std::string::npos) {
      result.text.resize(pos);
      break;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Teacher-forced scoring
// ---------------------------------------------------------------------------

/// Per-step logits of every group: [step][group].
using StepLogits = std::vector<std::vector<SparseLogits>>;

/// Teacher-forced fetch: at step t every listed group sees
/// prompt(g) + target[0..t). `groups` selects which contexts to query.
inline StepLogits collect_step_logits(const EnsembleContext& ens, std::span<const std::size_t> groups,
                                      std::span<const std::string> target, const LogitProvider& provider,
                                      ThreadPool* pool = nullptr) {
  if (target.empty()) throw InvariantError("collect_step_logits: empty target");
  detail::ActiveGroups sel;
  sel.index.assign(groups.begin(), groups.end());
  sel.weight.assign(groups.size(), 1.0);
  StepLogits steps(target.size());
  std::vector<std::string> continuation(target.size());
  for (std::size_t t = 1; t < target.size(); ++t) continuation[t] = continuation[t - 1] + target[t - 1];
  parallel_for(pool, target.size(), [&](std::size_t t) {
    steps[t] = detail::fetch_step(ens, sel, continuation[t], provider, pool, nullptr);
  });
  return steps;
}

/// -sum_t log softmax(sum_i w_i z_i)[y_t] from pre-fetched step logits.
/// `weights` parallels the inner (group) dimension of `steps`; groups with
/// weight 0 are skipped. A target key missing from every group is imputed
/// per group like any other missing key.
inline double nll_from_step_logits(const StepLogits& steps, std::span<const double> weights,
                                   std::span<const std::string> target, double delta) {
  if (steps.size() != target.size()) throw InvariantError("nll: step/target length mismatch");
  double nll = 0.0;
  std::vector<const SparseLogits*> ptrs;
  std::vector<double> ws;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    if (steps[t].size() != weights.size()) throw InvariantError("nll: group/weight count mismatch");
    ptrs.clear();
    ws.clear();
    for (std::size_t g = 0; g < weights.size(); ++g)
      if (weights[g] != 0.0) {
        ptrs.push_back(&steps[t][g]);
        ws.push_back(weights[g]);
      }
    if (ptrs.empty()) throw ConfigError("empty ensemble: all weights are zero");
    const auto combined = detail::weighted_sum(ptrs, ws, delta, &target[t]);
    nll += detail::log_sum_exp(combined) - combined.at(target[t]);
  }
  return std::max(nll, 0.0);
}

/// Teacher-forced cross-entropy of `target` (pre-split tokens) under the
/// ensemble.
inline double sequence_nll(const EnsembleContext& ens, std::span<const std::string> target,
                           const LogitProvider& provider, double delta = 0.0, bool normalize_binary = false,
                           ThreadPool* pool = nullptr) {
  ens.validate();
  if (target.empty()) throw ConfigError("sequence_nll: empty target");
  const auto active = detail::active_groups(ens.weights, normalize_binary);
  const auto steps = collect_step_logits(ens, active.index, target, provider, pool);
  return nll_from_step_logits(steps, active.weight, target, delta);
}

// ---------------------------------------------------------------------------
// Target tokenization
// ---------------------------------------------------------------------------

namespace detail {

inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

}  // namespace detail

/// Greedy longest-match split of `text` against `vocab`; positions no
/// vocabulary entry covers fall back to one UTF-8 code point.
inline std::vector<std::string> split_target(std::string_view text, std::span<const std::string> vocab) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t best = 0;
    for (const auto& v : vocab)
      if (v.size() > best && text.compare(pos, v.size(), v) == 0) best = v.size();
    if (best == 0) best = std::min(detail::utf8_length(static_cast<unsigned char>(text[pos])), text.size() - pos);
    out.emplace_back(text.substr(pos, best));
    pos += best;
  }
  return out;
}

/// Split for backends without a closed vocabulary: at each position the
/// longest token observed in any listed group's top-K that prefixes the
/// remaining text is taken. Fetches go through `provider`, so a caching
/// provider makes the later teacher-forced pass free.
inline std::vector<std::string> split_target_observed(const EnsembleContext& ens, std::span<const std::size_t> groups,
                                                      std::string_view text, const LogitProvider& provider,
                                                      ThreadPool* pool = nullptr) {
  detail::ActiveGroups sel;
  sel.index.assign(groups.begin(), groups.end());
  sel.weight.assign(groups.size(), 1.0);
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto logits = detail::fetch_step(ens, sel, text.substr(0, pos), provider, pool, nullptr);
    std::size_t best = 0;
    for (const auto& l : logits)
      for (const auto& [k, _] : l.entries())
        if (k.size() > best && text.compare(pos, k.size(), k) == 0) best = k.size();
    if (best == 0) best = std::min(detail::utf8_length(static_cast<unsigned char>(text[pos])), text.size() - pos);
    out.emplace_back(text.substr(pos, best));
    pos += best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Majority vote baseline
// ---------------------------------------------------------------------------

struct MajorityResult {
  std::string answer;
  std::vector<std::string> votes;  // per group
  std::size_t tokens = 0;
  RequestTally tally;
};

/// Most frequent answer among per-group greedy decodes; ties go to the
/// answer produced by the smallest group index.
inline std::string majority_answer(std::span<const std::string> votes) {
  if (votes.empty()) throw InvariantError("majority_answer: no votes");
  std::map<std::string, std::size_t> counts;
  for (const auto& v : votes) ++counts[v];
  const std::string* best = &votes.front();
  for (const auto& v : votes)
    if (counts[v] > counts[*best]) best = &v;
  return *best;
}

inline MajorityResult majority_vote_decode(std::span<const std::string> contexts, std::string_view separator,
                                           std::string_view query, const LogitProvider& provider,
                                           const DecodeParams& params, ThreadPool* pool = nullptr) {
  if (contexts.empty()) throw ConfigError("majority vote needs at least one context");
  params.validate();
  std::vector<DecodeResult> per_group(contexts.size());
  parallel_for(pool, contexts.size(), [&](std::size_t g) {
    try {
      per_group[g] = single_context_decode(contexts[g], separator, query, provider, params);
    } catch (...) {
      detail::rethrow_with_context("group " + std::to_string(g));
    }
  });
  MajorityResult r;
  for (auto& d : per_group) {
    r.votes.push_back(d.text);
    r.tokens += d.tokens.size();
    r.tally.merge(d.tally);
  }
  r.answer = majority_answer(r.votes);
  return r;
}

}  // namespace lara
