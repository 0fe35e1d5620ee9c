#pragma once

// Cross-validated weight fitting: each half of the groups is optimized
// against the demonstrations of the other half as validation data.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lara/core.hpp"
#include "lara/decoder.hpp"
#include "lara/error.hpp"
#include "lara/optimizer.hpp"
#include "lara/parallel.hpp"
#include "lara/provider.hpp"

namespace lara {

struct FitConfig {
  WeightMode mode = WeightMode::binary;
  std::size_t iterations = 20;  // J: ES iterations / CMA-ES generations
  std::vector<std::size_t> candidate_Ls{2, 4, 8};
  std::uint64_t seed = 0;
  std::size_t population = 0;  // CMA-ES lambda; 0 -> 4 + floor(3 ln d)
  double impute_margin = 0.0;
  bool normalize_binary = false;
  std::optional<std::uint64_t> shuffle_seed;

  void validate() const {
    if (iterations < 1) throw ConfigError("iterations (J) must be at least 1");
    if (candidate_Ls.empty()) throw ConfigError("candidate L list is empty");
    for (auto L : candidate_Ls)
      if (L < 1) throw ConfigError("candidate L values must be at least 1");
    if (!(impute_margin >= 0.0)) throw ConfigError("impute margin must be non-negative");
  }
};

struct HalfTrace {
  std::string half;  // "A" or "B"
  LossTrace trace;
};

struct CandidateLoss {
  std::size_t L = 0;
  double validation_loss = 0.0;
};

struct FitResult {
  WeightVector weights = WeightVector::ones(1);
  std::size_t L = 0;
  double validation_loss = std::numeric_limits<double>::quiet_NaN();
  std::vector<HalfTrace> loss_trace;
  std::uint64_t seed = 0;
  Partition partition;
  std::vector<CandidateLoss> candidates;  // filled by select_L

  nlohmann::json to_json() const;
  static FitResult from_json(const nlohmann::json& j, const std::string& where = "weights");
  static FitResult load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

/// One loss evaluation during fitting, reported to FitHooks::on_loss.
struct LossEvaluation {
  std::string half;
  std::vector<std::size_t> optimized_groups;
  std::vector<std::size_t> validation_demos;
};

struct FitHooks {
  ThreadPool* pool = nullptr;
  std::function<void(const LossEvaluation&)> on_loss;
};

namespace detail {

inline nlohmann::json finite_or_null(double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(); }

inline double number_or_nan(const nlohmann::json& j) {
  return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN();
}

/// Validation problem for one half: pre-fetched teacher-forced logits of the
/// half's groups (plus a trailing zero-shot slot in binary mode), per
/// validation demo.
class HalfProblem {
 public:
  HalfProblem(std::string name, std::vector<std::size_t> groups, const Partition& partition,
              std::span<const Demonstration> demos, const std::vector<std::string>& contexts, const Template& tpl,
              const LogitProvider& provider, const FitConfig& config, const FitHooks& hooks)
      : name_(std::move(name)),
        groups_(std::move(groups)),
        config_(config),
        hooks_(hooks),
        zero_shot_(config.mode == WeightMode::binary) {
    const std::set<std::size_t> own(groups_.begin(), groups_.end());
    for (std::size_t g = 0; g < partition.k(); ++g)
      if (!own.count(g))
        for (auto i : partition.groups[g]) validation_.push_back(i);

    std::vector<std::string> ctx;
    for (auto g : groups_) ctx.push_back(contexts[g]);
    if (zero_shot_) ctx.emplace_back();  // binary mode may select no group
    std::vector<std::size_t> slots(ctx.size());
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    const auto vocab = provider.vocabulary();

    targets_.resize(validation_.size());
    steps_.resize(validation_.size());
    parallel_for(hooks_.pool, validation_.size(), [&](std::size_t v) {
      const auto& demo = demos[validation_[v]];
      EnsembleContext ens{ctx, WeightVector::uniform(ctx.size()), tpl.render_query(demo.input), tpl.separator()};
      const std::string text = tpl.target_continuation(demo);
      targets_[v] = vocab.empty() ? split_target_observed(ens, slots, text, provider, hooks_.pool)
                                  : split_target(text, vocab);
      steps_[v] = collect_step_logits(ens, slots, targets_[v], provider, hooks_.pool);
    });
  }

  std::size_t dim() const { return groups_.size(); }
  const std::vector<std::size_t>& groups() const { return groups_; }
  const std::vector<std::size_t>& validation() const { return validation_; }

  /// Mean teacher-forced NLL over the validation demos. An all-zero vector
  /// selects no group and is scored as the zero-shot prompt.
  double loss(const std::vector<double>& w) {
    if (auto it = memo_.find(w); it != memo_.end()) return it->second;
    if (hooks_.on_loss) hooks_.on_loss({name_, groups_, validation_});

    std::vector<double> full(w);
    const bool any = std::any_of(w.begin(), w.end(), [](double x) { return x != 0.0; });
    if (zero_shot_) full.push_back(any ? 0.0 : 1.0);
    if (any && config_.mode == WeightMode::binary && config_.normalize_binary) {
      const double n = static_cast<double>(std::count_if(w.begin(), w.end(), [](double x) { return x != 0.0; }));
      for (auto& x : full) x /= n;
    }
    double total = 0.0;
    for (std::size_t v = 0; v < steps_.size(); ++v)
      total += nll_from_step_logits(steps_[v], full, targets_[v], config_.impute_margin);
    const double mean = steps_.empty() ? 0.0 : total / static_cast<double>(steps_.size());
    memo_.emplace(w, mean);
    return mean;
  }

  /// Lowest-loss nonzero vector evaluated so far, if any.
  std::optional<std::vector<double>> best_nonzero() const {
    std::optional<std::vector<double>> best;
    double best_loss = std::numeric_limits<double>::infinity();
    for (const auto& [w, l] : memo_) {
      const bool any = std::any_of(w.begin(), w.end(), [](double x) { return x != 0.0; });
      if (any && (!best || l < best_loss)) {
        best = w;
        best_loss = l;
      }
    }
    return best;
  }

 private:
  std::string name_;
  std::vector<std::size_t> groups_;
  std::vector<std::size_t> validation_;
  const FitConfig& config_;
  const FitHooks& hooks_;
  bool zero_shot_;
  std::vector<std::vector<std::string>> targets_;
  std::vector<StepLogits> steps_;
  std::map<std::vector<double>, double> memo_;
};

inline std::vector<double> to_doubles(const BitVector& b) { return {b.begin(), b.end()}; }

}  // namespace detail

/// Fits one weight vector for a fixed partition. With fewer than two groups
/// there is nothing to cross-validate: uniform (or all-ones) weights are
/// returned with a NaN validation loss.
inline FitResult fit_weights(const Partition& partition, std::span<const Demonstration> demos, const Template& tpl,
                             const LogitProvider& provider, const FitConfig& config, const FitHooks& hooks = {}) {
  config.validate();
  FitResult result;
  result.L = partition.L;
  result.seed = config.seed;
  result.partition = partition;
  const std::size_t k = partition.k();
  if (k == 0) throw ConfigError("partition has no groups");
  if (k < 2) {
    warn("fewer than two groups; skipping weight search and using " +
         std::string(config.mode == WeightMode::binary ? "all-ones" : "uniform") + " weights");
    result.weights = config.mode == WeightMode::binary ? WeightVector::ones(k) : WeightVector::uniform(k);
    return result;
  }

  const auto contexts = partition.contexts(demos, tpl);
  auto [half_a, half_b] = split_halves(k);
  std::vector<detail::HalfProblem> problems;
  problems.reserve(2);
  problems.emplace_back("A", half_a, partition, demos, contexts, tpl, provider, config, hooks);
  problems.emplace_back("B", half_b, partition, demos, contexts, tpl, provider, config, hooks);

  Rng rng(config.seed);
  std::vector<std::vector<double>> finals;
  for (std::size_t h = 0; h < problems.size(); ++h) {
    auto& prob = problems[h];
    LossTrace trace;
    if (config.mode == WeightMode::binary) {
      auto es = one_plus_one_es(
          prob.dim(), config.iterations, [&](const BitVector& b) { return prob.loss(detail::to_doubles(b)); }, rng);
      finals.push_back(detail::to_doubles(es.weights));
      trace = std::move(es.trace);
    } else {
      CmaOptions opts;
      opts.population = config.population;
      auto cma = cma_es(prob.dim(), config.iterations, [&](const std::vector<double>& w) { return prob.loss(w); },
                        rng, opts);
      finals.push_back(std::move(cma.weights));
      trace = std::move(cma.trace);
    }
    result.loss_trace.push_back({h == 0 ? "A" : "B", std::move(trace)});
  }

  auto all_zero = [](const std::vector<double>& w) {
    return std::all_of(w.begin(), w.end(), [](double x) { return x == 0.0; });
  };
  if (config.mode == WeightMode::binary && all_zero(finals[0]) && all_zero(finals[1])) {
    warn("weight search selected no group in either half; substituting the best nonzero candidates");
    for (std::size_t h = 0; h < 2; ++h)
      finals[h] = problems[h].best_nonzero().value_or(std::vector<double>(problems[h].dim(), 1.0));
  }

  result.validation_loss = 0.5 * (problems[0].loss(finals[0]) + problems[1].loss(finals[1]));

  std::vector<double> values(finals[0]);
  values.insert(values.end(), finals[1].begin(), finals[1].end());
  if (config.mode == WeightMode::continuous) {
    double sum = 0.0;
    for (double v : values) sum += v;
    for (auto& v : values) v /= sum;
  }
  result.weights = WeightVector(config.mode, std::move(values));
  return result;
}

/// Re-scores a fit on its own cross-validation construction: each half's
/// weights (rescaled to its own simplex in continuous mode) against the
/// other half's demonstrations.
inline double evaluate_validation_loss(const FitResult& fit, std::span<const Demonstration> demos,
                                       const Template& tpl, const LogitProvider& provider, const FitConfig& config,
                                       const FitHooks& hooks = {}) {
  const auto& p = fit.partition;
  if (p.k() < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto contexts = p.contexts(demos, tpl);
  auto [half_a, half_b] = split_halves(p.k());
  double total = 0.0;
  for (int h = 0; h < 2; ++h) {
    const auto& half = h == 0 ? half_a : half_b;
    std::vector<double> w;
    for (auto g : half) w.push_back(fit.weights[g]);
    if (fit.weights.mode() == WeightMode::continuous) {
      double s = 0.0;
      for (double x : w) s += x;
      if (s > 0.0)
        for (auto& x : w) x /= s;
    }
    detail::HalfProblem prob(h == 0 ? "A" : "B", half, p, demos, contexts, tpl, provider, config, hooks);
    total += prob.loss(w);
  }
  return 0.5 * total;
}

/// Fits every feasible candidate L (floor(N/L) >= 2) and keeps the lowest
/// validation loss; ties go to the smaller L.
inline FitResult select_L(std::span<const Demonstration> demos, const Template& tpl, const LogitProvider& provider,
                          const FitConfig& config, const FitHooks& hooks = {}) {
  config.validate();
  std::set<std::size_t> candidates(config.candidate_Ls.begin(), config.candidate_Ls.end());
  const std::size_t n = demos.size();
  std::vector<std::size_t> feasible;
  std::string infeasible;
  for (auto L : candidates) {
    if (L <= n && n / L >= 2) {
      feasible.push_back(L);
    } else {
      infeasible += (infeasible.empty() ? "" : ", ") + std::to_string(L);
    }
  }
  if (feasible.empty())
    throw ConfigError("no feasible group size for " + std::to_string(n) +
                      " demonstrations (each L needs at least two groups); infeasible: " + infeasible);
  if (!infeasible.empty()) warn("skipping infeasible group sizes: " + infeasible);

  std::optional<FitResult> best;
  std::vector<CandidateLoss> summary;
  for (auto L : feasible) {
    auto fit = fit_weights(partition_demos(n, L, config.shuffle_seed), demos, tpl, provider, config, hooks);
    summary.push_back({L, fit.validation_loss});
    if (!best || fit.validation_loss < best->validation_loss) best = std::move(fit);
  }
  best->candidates = std::move(summary);
  return *best;
}

// ---------------------------------------------------------------------------
// Weights file
// ---------------------------------------------------------------------------

inline nlohmann::json FitResult::to_json() const {
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& h : loss_trace)
    for (const auto& p : h.trace)
      trace.push_back({{"half", h.half}, {"iteration", p.iteration}, {"loss", detail::finite_or_null(p.loss)}});
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : candidates)
    cands.push_back({{"L", c.L}, {"validation_loss", detail::finite_or_null(c.validation_loss)}});
  return {{"mode", std::string(to_string(weights.mode()))},
          {"L", L},
          {"weights", weights.values()},
          {"validation_loss", detail::finite_or_null(validation_loss)},
          {"seed", seed},
          {"loss_trace", trace},
          {"group_demo_indices", partition.groups},
          {"dropped_demo_indices", partition.dropped},
          {"candidate_losses", cands}};
}

inline FitResult FitResult::from_json(const nlohmann::json& j, const std::string& where) {
  try {
    FitResult r;
    const auto mode = parse_weight_mode(j.at("mode").get<std::string>());
    r.weights = WeightVector(mode, j.at("weights").get<std::vector<double>>());
    r.L = j.at("L").get<std::size_t>();
    r.validation_loss = detail::number_or_nan(j.value("validation_loss", nlohmann::json()));
    r.seed = j.value("seed", std::uint64_t{0});
    r.partition.L = r.L;
    r.partition.groups = j.at("group_demo_indices").get<std::vector<std::vector<std::size_t>>>();
    r.partition.dropped = j.value("dropped_demo_indices", std::vector<std::size_t>{});
    if (r.partition.groups.size() != r.weights.size())
      throw ConfigError("weights has " + std::to_string(r.weights.size()) + " entries but " +
                        std::to_string(r.partition.groups.size()) + " groups");
    for (const auto& g : r.partition.groups)
      if (g.size() != r.L) throw ConfigError("group size differs from L=" + std::to_string(r.L));
    std::map<std::string, HalfTrace> halves;
    for (const auto& p : j.value("loss_trace", nlohmann::json::array())) {
      auto& h = halves[p.at("half").get<std::string>()];
      h.half = p.at("half").get<std::string>();
      h.trace.push_back({p.at("iteration").get<std::size_t>(), detail::number_or_nan(p.at("loss"))});
    }
    for (auto& [_, h] : halves) r.loss_trace.push_back(std::move(h));
    for (const auto& c : j.value("candidate_losses", nlohmann::json::array()))
      r.candidates.push_back({c.at("L").get<std::size_t>(), detail::number_or_nan(c.at("validation_loss"))});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

inline FitResult FitResult::load(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": malformed JSON (" + e.what() + ")");
  }
  return from_json(j, path.string());
}

inline void FitResult::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_json().dump(2) << '\n';
  if (!out) throw ConfigError("cannot write " + path.string());
}

}  // namespace lara
