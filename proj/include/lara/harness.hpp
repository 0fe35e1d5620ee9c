#pragma once

// Task loading, method execution (ICL, uniform ensemble, majority vote,
// fitted continuous/binary ensembles), exact-match scoring and request-length
// cost accounting.

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "lara/core.hpp"
#include "lara/decoder.hpp"
#include "lara/error.hpp"
#include "lara/fit.hpp"
#include "lara/parallel.hpp"
#include "lara/provider.hpp"

namespace lara {

struct Task {
  std::string name;
  Template tpl;
  DemoSet train;  // in-context pool
  DemoSet test;   // (input, gold output)
};

/// Loads <dir>/train.jsonl, <dir>/test.jsonl and <dir>/template.json.
inline Task load_task(const std::filesystem::path& dir) {
  for (const char* f : {"train.jsonl", "test.jsonl", "template.json"})
    if (!std::filesystem::is_regular_file(dir / f)) throw ConfigError("task directory " + dir.string() + " lacks " + f);
  auto tpl = Template::load(dir / "template.json");
  auto train = load_demos_jsonl(dir / "train.jsonl");
  auto test = load_demos_jsonl(dir / "test.jsonl");
  if (train.empty()) throw ConfigError((dir / "train.jsonl").string() + ": empty split");
  if (test.empty()) throw ConfigError((dir / "test.jsonl").string() + ": empty split");
  std::set<std::string> train_inputs;
  for (const auto& d : train) train_inputs.insert(d.input);
  for (std::size_t i = 0; i < test.size(); ++i)
    if (train_inputs.count(test[i].input))
      throw ConfigError("test example " + std::to_string(i) + " also appears in train: '" + test[i].input + "'");
  auto name = std::filesystem::absolute(dir).lexically_normal().filename().string();
  if (name.empty()) name = std::filesystem::absolute(dir).lexically_normal().parent_path().filename().string();
  return {std::move(name), std::move(tpl), std::move(train), std::move(test)};
}

namespace detail {

inline std::string_view trim(std::string_view s) {
  constexpr std::string_view ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

}  // namespace detail

/// Byte-exact match after trimming outer whitespace.
inline bool exact_match(std::string_view pred, std::string_view gold) { return detail::trim(pred) == detail::trim(gold); }

enum class Method { icl, lag_uniform, majority_vote, lara, blara };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::icl: return "icl";
    case Method::lag_uniform: return "lag_uniform";
    case Method::majority_vote: return "majority_vote";
    case Method::lara: return "lara";
    case Method::blara: return "blara";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (auto m : {Method::icl, Method::lag_uniform, Method::majority_vote, Method::lara, Method::blara})
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method '" + std::string(s) + "' (icl, lag_uniform, majority_vote, lara, blara)");
}

struct MethodConfig {
  Method method = Method::icl;
  std::optional<std::size_t> L;
  std::optional<FitResult> weights;  // required for lara/blara
  DecodeParams decode;
  bool fail_fast = false;
  std::optional<std::uint64_t> shuffle_seed;
};

/// Resolved contexts and weights for a method on a task's training pool.
struct InferencePlan {
  Method method = Method::icl;
  std::vector<std::string> contexts;
  WeightVector weights = WeightVector::ones(1);
  std::size_t L = 0;
  std::string separator;
};

inline InferencePlan make_plan(const Task& task, const MethodConfig& mc) {
  mc.decode.validate();
  InferencePlan plan;
  plan.method = mc.method;
  plan.separator = task.tpl.separator();
  switch (mc.method) {
    case Method::icl:
      plan.contexts = {render_context(task.train, task.tpl)};
      plan.weights = WeightVector::uniform(1);
      plan.L = task.train.size();
      break;
    case Method::lag_uniform:
    case Method::majority_vote: {
      if (!mc.L) throw ConfigError(std::string(to_string(mc.method)) + " requires a group size L");
      const auto p = partition_demos(task.train, *mc.L, mc.shuffle_seed);
      if (!p.dropped.empty())
        warn(std::to_string(p.dropped.size()) + " demonstration(s) dropped: " + std::to_string(task.train.size()) +
             " is not a multiple of L=" + std::to_string(*mc.L));
      plan.contexts = p.contexts(task.train, task.tpl);
      plan.weights = WeightVector::uniform(p.k());
      plan.L = p.L;
      break;
    }
    case Method::lara:
    case Method::blara: {
      if (!mc.weights) throw ConfigError(std::string(to_string(mc.method)) + " requires a weights file or a fit");
      const auto& fit = *mc.weights;
      const auto want = mc.method == Method::lara ? WeightMode::continuous : WeightMode::binary;
      if (fit.weights.mode() != want)
        throw ConfigError(std::string(to_string(mc.method)) + " expects " + std::string(to_string(want)) +
                          " weights, got " + std::string(to_string(fit.weights.mode())));
      for (const auto& g : fit.partition.groups)
        for (auto i : g)
          if (i >= task.train.size())
            throw ConfigError("weights reference demonstration " + std::to_string(i) + " but the task has " +
                              std::to_string(task.train.size()));
      plan.contexts = fit.partition.contexts(task.train, task.tpl);
      plan.weights = fit.weights;
      plan.L = fit.L;
      break;
    }
  }
  if (plan.weights.active_count() == 0) throw ConfigError("empty ensemble: all weights are zero");
  return plan;
}

struct Prediction {
  std::string text;
  std::size_t tokens = 0;
  RequestTally tally;
};

inline Prediction predict(const InferencePlan& plan, const Template& tpl, std::string_view input,
                          const LogitProvider& provider, const DecodeParams& params, ThreadPool* pool = nullptr) {
  const std::string query = tpl.render_query(input);
  if (plan.method == Method::majority_vote) {
    auto r = majority_vote_decode(plan.contexts, plan.separator, query, provider, params, pool);
    return {r.answer, r.tokens, r.tally};
  }
  EnsembleContext ens{plan.contexts, plan.weights, query, plan.separator};
  auto r = greedy_decode(ens, provider, params, pool);
  return {std::move(r.text), r.tokens.size(), r.tally};
}

struct CostReport {
  std::size_t max_prompt_chars = 0;
  std::size_t total_request_count = 0;
  std::size_t total_prompt_chars = 0;
  std::size_t decoded_tokens = 0;
  std::size_t groups_active = 0;  // m: nonzero-weight groups
  std::size_t groups_total = 0;   // k

  nlohmann::json to_json() const {
    return {{"max_prompt_chars", max_prompt_chars}, {"total_request_count", total_request_count},
            {"total_prompt_chars", total_prompt_chars}, {"decoded_tokens", decoded_tokens},
            {"groups_active", groups_active}, {"groups_total", groups_total}};
  }
};

/// Aggregates exactly the requests recorded in `tallies`.
inline CostReport cost_report(std::span<const RequestTally> tallies, std::size_t decoded_tokens,
                              const WeightVector& weights) {
  CostReport c;
  RequestTally all;
  for (const auto& t : tallies) all.merge(t);
  c.max_prompt_chars = all.max_prompt_chars;
  c.total_request_count = all.requests;
  c.total_prompt_chars = all.total_prompt_chars;
  c.decoded_tokens = decoded_tokens;
  c.groups_active = weights.active_count();
  c.groups_total = weights.size();
  return c;
}

struct ExampleRecord {
  std::size_t index = 0;
  std::string input;
  std::string gold;
  std::string prediction;
  bool correct = false;
  std::string error;  // empty on success
};

struct EvalReport {
  std::string task;
  Method method = Method::icl;
  std::size_t L = 0;
  std::size_t k = 0;
  double accuracy = 0.0;
  std::size_t n_correct = 0;
  std::size_t n_total = 0;
  std::vector<ExampleRecord> per_example;
  CostReport cost;

  nlohmann::json to_json() const {
    nlohmann::json ex = nlohmann::json::array();
    for (const auto& r : per_example) {
      nlohmann::json e = {{"index", r.index}, {"input", r.input}, {"gold", r.gold}, {"prediction", r.prediction},
                          {"correct", r.correct}};
      if (!r.error.empty()) e["error"] = r.error;
      ex.push_back(std::move(e));
    }
    return {{"task", task}, {"method", std::string(to_string(method))},
            {"L", L}, {"k", k},
            {"accuracy", accuracy}, {"n_correct", n_correct},
            {"n_total", n_total}, {"per_example", ex},
            {"cost", cost.to_json()}};
  }

  std::string to_table() const {
    std::ostringstream os;
    os << "task      " << task << '\n'
       << "method    " << to_string(method) << "  (L=" << L << ", k=" << k << ")\n"
       << "accuracy  " << std::fixed << std::setprecision(4) << accuracy << "  (" << n_correct << '/' << n_total
       << ")\n"
       << "cost      groups_active=" << cost.groups_active << '/' << cost.groups_total
       << "  requests=" << cost.total_request_count << "  max_prompt_chars=" << cost.max_prompt_chars
       << "  total_prompt_chars=" << cost.total_prompt_chars << '\n';
    std::size_t errors = 0;
    for (const auto& r : per_example) errors += r.error.empty() ? 0 : 1;
    if (errors) os << "errors    " << errors << " example(s) failed; see report\n";
    return os.str();
  }
};

/// Decodes every test input with the configured method and scores it.
/// Provider failures on one example are recorded as incorrect (with the
/// error) unless fail_fast is set.
inline EvalReport run_eval(const Task& task, const MethodConfig& mc, const LogitProvider& provider,
                           ThreadPool* pool = nullptr) {
  const auto plan = make_plan(task, mc);
  EvalReport report;
  report.task = task.name;
  report.method = mc.method;
  report.L = plan.L;
  report.k = plan.contexts.size();
  report.n_total = task.test.size();
  report.per_example.resize(task.test.size());

  std::vector<RequestTally> tallies(task.test.size());
  std::vector<std::size_t> tokens(task.test.size());
  parallel_for(pool, task.test.size(), [&](std::size_t i) {
    auto& rec = report.per_example[i];
    rec.index = i;
    rec.input = task.test[i].input;
    rec.gold = task.test[i].output;
    try {
      auto pred = predict(plan, task.tpl, rec.input, provider, mc.decode, pool);
      rec.prediction = std::move(pred.text);
      rec.correct = exact_match(rec.prediction, rec.gold);
      tallies[i] = pred.tally;
      tokens[i] = pred.tokens;
    } catch (const InvariantError&) {
      throw;
    } catch (const Error& e) {
      if (mc.fail_fast) detail::rethrow_with_context("test example " + std::to_string(i));
      rec.error = e.what();
    }
  });

  for (const auto& r : report.per_example) report.n_correct += r.correct ? 1 : 0;
  report.accuracy = report.n_total ? static_cast<double>(report.n_correct) / static_cast<double>(report.n_total) : 0.0;
  std::size_t total_tokens = 0;
  for (auto t : tokens) total_tokens += t;
  report.cost = cost_report(tallies, total_tokens, plan.weights);
  if (mc.method == Method::majority_vote) report.cost.groups_active = plan.contexts.size();
  return report;
}

}  // namespace lara
