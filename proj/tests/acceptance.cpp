// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Runs against the shipped fixtures and in-process mock backends.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>

#include "lara/lara.hpp"
#include "test_util.hpp"

using namespace lara;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  double budget_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

SparseLogits random_logits(Rng& rng, const std::vector<std::string>& vocab, std::size_t min_size) {
  SparseLogits::Map m;
  const std::size_t n = min_size + rng.below(vocab.size() - min_size + 1);
  std::vector<std::string> pool(vocab);
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = i + rng.below(pool.size() - i);
    std::swap(pool[i], pool[j]);
    m.emplace(pool[i], -8.0 * rng.uniform());
  }
  return SparseLogits(std::move(m));
}

// A random LM whose next-token scores depend on the last token and on which
// context marker the prefix contains.
TableLM random_lm(Rng& rng, const std::vector<std::string>& markers) {
  const std::vector<std::string> vocab{"a", "b", "c", " d", "\n"};
  std::vector<TableLM::Rule> rules;
  for (const auto& mk : markers)
    for (const auto& last : vocab) rules.push_back({last, mk, random_logits(rng, vocab, 2)});
  for (const auto& last : vocab) rules.push_back({last, "", random_logits(rng, vocab, 2)});
  return TableLM(random_logits(rng, vocab, 2), std::move(rules));
}

// ---------------------------------------------------------------------------

Outcome one_hot_equivalence() {
  std::size_t mismatches = 0, decodes = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(1000 + seed);
    const std::size_t k = 2 + rng.below(4);
    std::vector<std::string> contexts, markers;
    for (std::size_t i = 0; i < k; ++i) {
      markers.push_back("<ctx" + std::to_string(i) + ">");
      contexts.push_back("Q: " + markers.back() + "\nA: x");
    }
    const auto lm = random_lm(rng, markers);
    DecodeParams dp;
    dp.max_tokens = 12;
    for (int q = 0; q < 5; ++q) {
      const std::string query = "Q: item " + std::to_string(q) + "\nA:";
      for (std::size_t i = 0; i < k; ++i) {
        const auto ref = single_context_decode(contexts[i], "\n\n", query, lm, dp);
        EnsembleContext solo{{contexts[i]}, WeightVector::ones(1), query, "\n\n"};
        std::vector<double> e(k, 0.0);
        e[i] = 1.0;
        EnsembleContext bin{contexts, WeightVector(WeightMode::binary, e), query, "\n\n"};
        EnsembleContext cont{contexts, WeightVector(WeightMode::continuous, e), query, "\n\n"};
        for (const auto* ens : {&solo, &bin, &cont}) {
          ++decodes;
          if (greedy_decode(*ens, lm, dp).tokens != ref.tokens) ++mismatches;
        }
      }
    }
  }
  return {mismatches == 0, std::to_string(mismatches) + " mismatches in " + std::to_string(decodes) + " decodes"};
}

// Independent per-token re-implementation of the weighted logit sum.
std::map<std::string, double> oracle_probs(const std::vector<SparseLogits>& sets, const std::vector<double>& w,
                                           double delta, bool normalize) {
  std::set<std::string> keys;
  double scale = 1.0;
  if (normalize) {
    double n = 0;
    for (double x : w) n += x != 0.0;
    scale = 1.0 / n;
  }
  for (std::size_t i = 0; i < sets.size(); ++i)
    if (w[i] != 0.0)
      for (const auto& [key, _] : sets[i].entries()) keys.insert(key);
  std::map<std::string, double> z;
  for (const auto& key : keys) {
    double s = 0.0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      if (w[i] == 0.0) continue;
      double lo = INFINITY;
      for (const auto& [_, v] : sets[i].entries()) lo = std::min(lo, v);
      const double v = sets[i].contains(key) ? sets[i].at(key) : lo - delta;
      s += scale * w[i] * v;
    }
    z[key] = s;
  }
  double hi = -INFINITY;
  for (const auto& [_, v] : z) hi = std::max(hi, v);
  double norm = 0.0;
  for (const auto& [_, v] : z) norm += std::exp(v - hi);
  std::map<std::string, double> p;
  for (const auto& [key, v] : z) p[key] = std::exp(v - hi) / norm;
  return p;
}

Outcome combine_oracle() {
  Rng rng(7);
  const std::vector<std::string> vocab{"t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9"};
  double worst = 0.0;
  std::size_t bad = 0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t k = 1 + rng.below(8);
    std::vector<SparseLogits> sets;
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<std::string> sub(vocab.begin(), vocab.begin() + 6 + rng.below(5));
      SparseLogits::Map m;
      const std::size_t dims = 1 + rng.below(6);
      for (std::size_t d = 0; d < dims; ++d) m[sub[rng.below(sub.size())]] = -10.0 * rng.uniform();
      sets.emplace_back(std::move(m));
    }
    const bool binary = rng.uniform() < 0.5;
    std::vector<double> w(k);
    if (binary) {
      for (auto& x : w) x = rng.uniform() < 0.5 ? 1.0 : 0.0;
      w[rng.below(k)] = 1.0;
    } else {
      double s = 0.0;
      for (auto& x : w) s += (x = rng.uniform() < 0.2 ? 0.0 : rng.uniform());
      if (s == 0.0) w[0] = s = 1.0;
      for (auto& x : w) x /= s;
      double t = 0.0;
      for (std::size_t i = 0; i + 1 < k; ++i) t += w[i];
      w[k - 1] = std::max(0.0, 1.0 - t);
    }
    const double delta = rng.uniform() < 0.5 ? 0.0 : 2.0 * rng.uniform();
    const bool normalize = binary && rng.uniform() < 0.5;
    const auto got = softmax(combine_logits(sets, WeightVector(binary ? WeightMode::binary : WeightMode::continuous, w),
                                            delta, normalize));
    const auto want = oracle_probs(sets, w, delta, normalize);
    if (got.size() != want.size()) {
      ++bad;
      continue;
    }
    for (const auto& [key, p] : want) {
      const auto it = got.find(key);
      const double err = it == got.end() ? 1.0 : std::abs(it->second - p);
      worst = std::max(worst, err);
      if (err > 1e-9) ++bad;
    }
  }
  std::ostringstream d;
  d << "1000 instances, max |dp| = " << worst << ", " << bad << " violations";
  return {bad == 0, d.str()};
}

// Planted ensemble loss: informative groups score the gold token high,
// noise groups favour a wrong token. One validation step per demo.
struct PlantedLoss {
  std::size_t k;
  std::vector<StepLogits> steps;  // per demo: 1 step x (k + 1 zero-shot slot)
  std::vector<std::vector<std::string>> targets;

  PlantedLoss(Rng& rng, std::size_t k_) : k(k_) {
    const std::vector<std::string> vocab{" A", " B", " C", " D"};
    std::vector<bool> informative(k);
    for (std::size_t i = 0; i < k; ++i) informative[i] = rng.uniform() < 0.5;
    for (int v = 0; v < 6; ++v) {
      const auto gold = vocab[rng.below(vocab.size())];
      std::vector<SparseLogits> row;
      for (std::size_t i = 0; i <= k; ++i) {
        SparseLogits::Map m;
        for (const auto& t : vocab) m[t] = -3.0 - 2.0 * rng.uniform();
        if (i == k) {
          m[gold] = -1.5 - rng.uniform();  // zero-shot: weakly right
        } else if (informative[i]) {
          m[gold] = -0.5 * rng.uniform();
        } else {
          std::string wrong = gold;
          while (wrong == gold) wrong = vocab[rng.below(vocab.size())];
          m[wrong] = -0.5 * rng.uniform();
        }
        row.emplace_back(std::move(m));
      }
      steps.push_back({row});
      targets.push_back({gold});
    }
  }

  double operator()(const BitVector& b) const {
    std::vector<double> w(b.begin(), b.end());
    w.push_back(std::all_of(b.begin(), b.end(), [](auto x) { return x == 0; }) ? 1.0 : 0.0);
    double total = 0.0;
    for (std::size_t v = 0; v < steps.size(); ++v) total += nll_from_step_logits(steps[v], w, targets[v], 0.0);
    return total / static_cast<double>(steps.size());
  }

  double exhaustive_min() const {
    double best = INFINITY;
    for (std::uint32_t mask = 0; mask < (1u << k); ++mask) {
      BitVector b(k);
      for (std::size_t i = 0; i < k; ++i) b[i] = (mask >> i) & 1u;
      best = std::min(best, (*this)(b));
    }
    return best;
  }
};

Outcome es_fidelity() {
  // (a) monotone traces
  std::size_t non_monotone = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    Rng table_rng(seed + 5000);
    std::vector<double> table(256);
    for (auto& x : table) x = table_rng.uniform();
    auto loss = [&](const BitVector& b) {
      std::size_t idx = 0;
      for (std::size_t i = 0; i < b.size(); ++i) idx |= std::size_t(b[i]) << i;
      return table[idx];
    };
    const auto r = one_plus_one_es(8, 200, loss, rng);
    for (std::size_t j = 1; j < r.trace.size(); ++j)
      if (r.trace[j].loss > r.trace[j - 1].loss) ++non_monotone;
  }

  // (b) mutation rate
  Rng rng(99);
  BitVector w(8, 0);
  std::size_t flips = 0;
  const std::size_t calls = 100000;
  for (std::size_t c = 0; c < calls; ++c) {
    const auto child = mutate_bits(w, rng);
    for (std::size_t i = 0; i < 8; ++i) flips += child[i] != w[i];
  }
  const double mean_flips = double(flips) / double(calls);

  // (c) optimality on planted instances
  std::size_t optimal = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng inst_rng(20000 + seed);
    const std::size_t k = 2 + inst_rng.below(7);
    PlantedLoss loss(inst_rng, k);
    Rng es_rng(seed);
    const auto r = one_plus_one_es(k, 500, std::cref(loss), es_rng);
    if (std::abs(r.loss - loss.exhaustive_min()) <= 1e-9) ++optimal;
  }

  std::ostringstream d;
  d << "(a) " << non_monotone << " increases in 100 traces; (b) mean flips " << mean_flips << "; (c) " << optimal
    << "/100 optimal";
  return {non_monotone == 0 && std::abs(mean_flips - 1.0) <= 0.05 && optimal >= 95, d.str()};
}

Outcome cma_contract() {
  double worst_sum = 0.0, worst_w1 = 0.0;
  bool negative = false;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    auto loss = [](const std::vector<double>& w) { return (w[0] - 0.8) * (w[0] - 0.8); };
    const auto r = cma_es(2, 60, loss, rng);
    double s = 0.0;
    for (double x : r.weights) {
      negative |= x < 0.0;
      s += x;
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    worst_w1 = std::max(worst_w1, std::abs(r.weights[0] - 0.8));
  }
  std::ostringstream d;
  d << "20 seeds: max |sum-1| = " << worst_sum << ", max |w1-0.8| = " << worst_w1;
  return {!negative && worst_sum <= 1e-9 && worst_w1 <= 0.02, d.str()};
}

struct Planted {
  Task task = load_task(lara_test::fixture("planted"));
  TableLM lm = TableLM::load(lara_test::fixture("planted_table.json"));
};

Outcome no_leakage() {
  Planted p;
  std::size_t calls = 0, leaks = 0;
  std::mutex mu;
  FitHooks hooks;
  std::optional<Partition> part;
  hooks.on_loss = [&](const LossEvaluation& e) {
    std::set<std::size_t> optimized;
    for (auto g : e.optimized_groups)
      for (auto i : part->groups[g]) optimized.insert(i);
    std::lock_guard lock(mu);
    ++calls;
    for (auto v : e.validation_demos)
      if (optimized.count(v)) {
        ++leaks;
        break;
      }
  };
  for (auto L : {2u, 4u, 8u})
    for (auto mode : {WeightMode::binary, WeightMode::continuous}) {
      part = partition_demos(p.task.train, L);
      FitConfig fc;
      fc.mode = mode;
      fit_weights(*part, p.task.train, p.task.tpl, p.lm, fc, hooks);
    }
  return {calls > 0 && leaks == 0, std::to_string(leaks) + " leaking evaluations of " + std::to_string(calls)};
}

Outcome planted_end_to_end() {
  Planted p;
  MethodConfig lag;
  lag.method = Method::lag_uniform;
  lag.L = 4;
  const double lag_acc = run_eval(p.task, lag, p.lm).accuracy;

  std::size_t clean = 0, confirmed = 0;
  double min_gap = INFINITY, mean_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    FitConfig fc;
    fc.seed = seed;
    const auto fit = select_L(p.task.train, p.task.tpl, p.lm, fc);
    if (fit.L == 4 && fit.weights[1] == 0.0 && fit.weights[2] == 0.0 && fit.weights[3] == 0.0) ++clean;

    double best = INFINITY;
    const std::size_t k = fit.weights.size();
    for (std::uint32_t mask = 1; mask < (1u << k); ++mask) {
      FitResult alt = fit;
      std::vector<double> w(k);
      for (std::size_t i = 0; i < k; ++i) w[i] = (mask >> i) & 1u;
      alt.weights = WeightVector(WeightMode::binary, w);
      best = std::min(best, evaluate_validation_loss(alt, p.task.train, p.task.tpl, p.lm, fc));
    }
    if (std::abs(fit.validation_loss - best) <= 1e-9) ++confirmed;

    MethodConfig blara;
    blara.method = Method::blara;
    blara.weights = fit;
    const double gap = run_eval(p.task, blara, p.lm).accuracy - lag_acc;
    min_gap = std::min(min_gap, gap);
    mean_gap += gap / 20.0;
  }
  std::ostringstream d;
  d << "lag_uniform " << lag_acc << ", blara gap mean " << mean_gap << " (min " << min_gap << "), noise zeroed "
    << clean << "/20, exhaustive optimum " << confirmed << "/20";
  return {mean_gap >= 0.2 && clean >= 18 && confirmed == 20, d.str()};
}

Outcome complexity_proxy() {
  const auto task = load_task(lara_test::fixture("uniform"));
  const auto lm = TableLM::load(lara_test::fixture("uniform_table.json"));
  MethodConfig icl;
  icl.method = Method::icl;
  const auto ri = run_eval(task, icl, lm);

  FitResult fit;
  fit.L = 8;
  fit.partition = partition_demos(task.train, 8);
  fit.weights = WeightVector::uniform(4);
  MethodConfig lara;
  lara.method = Method::lara;
  lara.weights = fit;
  const auto rl = run_eval(task, lara, lm);
  const double ratio = double(rl.cost.max_prompt_chars) / (double(ri.cost.max_prompt_chars) / 4.0);

  // m of k groups active: zero-weight groups never queried, per-token
  // requests proportional to m.
  const auto contexts = fit.partition.contexts(task.train, task.tpl);
  const double per_token_full = double(rl.cost.total_request_count) / double(rl.cost.decoded_tokens);
  std::size_t stray = 0;
  double worst_scale = 0.0;
  for (std::uint32_t mask = 1; mask < 16; ++mask) {
    std::vector<double> w(4);
    for (int i = 0; i < 4; ++i) w[i] = (mask >> i) & 1u;
    FitResult b = fit;
    b.weights = WeightVector(WeightMode::binary, w);
    MethodConfig mc;
    mc.method = Method::blara;
    mc.weights = b;
    RecordingProvider rec(lm);
    const auto r = run_eval(task, mc, rec);
    for (const auto& prefix : rec.prefixes()) {
      bool ok = false;
      for (int i = 0; i < 4; ++i) ok |= w[i] != 0.0 && prefix.rfind(contexts[i], 0) == 0;
      stray += !ok;
    }
    const double m = double(b.weights.active_count());
    const double per_token = double(r.cost.total_request_count) / double(r.cost.decoded_tokens);
    worst_scale = std::max(worst_scale, std::abs(per_token / per_token_full - m / 4.0));
    if (rec.count() != r.cost.total_request_count) ++stray;
  }
  std::ostringstream d;
  d << "LARA/ (ICL/4) = " << ratio << ", requests to zero-weight groups " << stray
    << ", max |per-token ratio - m/k| = " << worst_scale;
  return {std::abs(ratio - 1.0) <= 0.10 && stray == 0 && worst_scale <= 1e-12, d.str()};
}

int run_cli(const lara_test::TempDir& dir, const std::string& args, std::string* err) {
  const auto err_path = dir / ".stderr";
  const std::string cmd = "cd '" + dir.path().string() + "' && env -u LARA_CACHE_DIR '" + LARA_CLI_PATH + "' " + args +
                          " >/dev/null 2>'" + err_path.string() + "'";
  const int status = std::system(cmd.c_str());
  *err = lara_test::read_file(err_path);
  std::filesystem::remove(err_path);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism_and_cache() {
  lara_test::TempDir dir;
  const std::string backend = " --task '" + lara_test::fixture("planted").string() + "' --mock '" +
                              lara_test::fixture("planted_table.json").string() + "' --cache-dir cache";
  std::string err;
  bool ok = true;
  std::string detail;
  std::string second_fit, second_eval;
  for (int run = 1; run <= 2; ++run) {
    const auto tag = std::to_string(run);
    ok &= run_cli(dir, "fit" + backend + " --seed 5 --output w" + tag + ".json", &err) == 0;
    if (run == 2) second_fit = err;
    ok &= run_cli(dir, "eval" + backend + " --method blara --weights w" + tag + ".json --output r" + tag + ".json",
                  &err) == 0;
    if (run == 2) second_eval = err;
  }
  const bool same_w = lara_test::read_file(dir / "w1.json") == lara_test::read_file(dir / "w2.json");
  const bool same_r = lara_test::read_file(dir / "r1.json") == lara_test::read_file(dir / "r2.json");
  const bool cached = second_fit.find("backend_requests=0") != std::string::npos &&
                      second_eval.find("backend_requests=0") != std::string::npos;
  detail = std::string("weights ") + (same_w ? "identical" : "differ") + ", report " + (same_r ? "identical" : "differ") +
           ", second run " + (cached ? "0 backend requests" : "hit the backend");
  if (!ok) detail += "; a CLI run failed: " + err;
  return {ok && same_w && same_r && cached, detail};
}

// Optional: LARA_LIVE_ENDPOINT and LARA_LIVE_MODEL select a real backend
// (LARA_API_KEY if it needs one).
std::optional<Outcome> live_smoke() {
  const char* endpoint = std::getenv("LARA_LIVE_ENDPOINT");
  const char* model = std::getenv("LARA_LIVE_MODEL");
  if (!endpoint || !model) return std::nullopt;
  ProviderConfig pc;
  pc.endpoint = endpoint;
  pc.model_id = model;
  if (const char* key = std::getenv("LARA_API_KEY")) pc.auth_token = key;
  OpenAICompatibleProvider provider(pc);

  auto task = load_task(lara_test::fixture("planted"));
  task.train.resize(10);
  task.test.resize(10);
  FitConfig fc;
  fc.candidate_Ls = {2};
  fc.iterations = 5;
  const auto fit = select_L(task.train, task.tpl, provider, fc);
  MethodConfig mc;
  mc.method = Method::blara;
  mc.weights = fit;
  mc.decode.max_tokens = 4;
  mc.fail_fast = true;
  const auto r = run_eval(task, mc, provider);
  return Outcome{true, "10 examples, accuracy " + std::to_string(r.accuracy)};
}

}  // namespace

int main() {
  std::vector<Criterion> criteria{
      {"1 one-hot / degenerate equivalence", 5, one_hot_equivalence},
      {"2 logit arithmetic oracle", 10, combine_oracle},
      {"3 (1+1)-ES fidelity", 60, es_fidelity},
      {"4 CMA-ES contract", 30, cma_contract},
      {"5 cross-validation integrity", 0, no_leakage},
      {"6 planted task end-to-end", 120, planted_end_to_end},
      {"7 complexity proxy", 0, complexity_proxy},
      {"8 determinism and cache", 0, determinism_and_cache},
  };

  int failures = 0;
  auto report = [&](const std::string& name, const char* status, double secs, const std::string& detail) {
    std::printf("%-4s %-38s %7.2fs  %s\n", status, name.c_str(), secs, detail.c_str());
    std::fflush(stdout);
  };
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && secs > c.budget_s) {
      o.pass = false;
      o.detail += " (over the " + std::to_string(int(c.budget_s)) + "s budget)";
    }
    failures += !o.pass;
    report(c.name, o.pass ? "PASS" : "FAIL", secs, o.detail);
  }

  const auto t0 = std::chrono::steady_clock::now();
  std::optional<Outcome> live;
  try {
    live = live_smoke();
  } catch (const std::exception& e) {
    live = Outcome{false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!live) {
    report("9 live smoke", "SKIP", secs, "set LARA_LIVE_ENDPOINT and LARA_LIVE_MODEL to run");
  } else {
    failures += !live->pass;
    report("9 live smoke", live->pass ? "PASS" : "FAIL", secs, live->detail);
  }

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
