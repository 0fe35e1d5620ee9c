// lara: fit ensemble weights, run inference and evaluation, inspect the
// response cache.
//
//   lara fit   --task DIR (--mock TABLE | --endpoint URL --model ID) [...]
//   lara infer --task DIR --method M --input TEXT [...]
//   lara eval  --task DIR --method M [...]
//   lara cache stats|clear [--cache-dir DIR]
//
// Exit codes: 0 ok, 2 configuration error, 3 provider error, 4 internal error.

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lara/lara.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitProvider = 3;
constexpr int kExitInternal = 4;

// JSON config files for CLI11. Top-level keys are option long names
// ("seed", "candidate-L", ...) of the subcommand being run; a nested object
// such as {"eval": {...}} addresses one subcommand explicitly. CLI11 fills
// an option from config only when the command line left it empty, so flags
// always win.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(const CLI::App* root) : root_(root) {}

  std::string to_config(const CLI::App* app, bool default_also, bool, std::string) const override {
    nlohmann::json j = nlohmann::json::object();
    for (const CLI::Option* opt : app->get_options({})) {
      if (opt->get_lnames().empty() || !opt->get_configurable()) continue;
      const auto& name = opt->get_lnames().front();
      if (opt->count() > 0) {
        const auto& r = opt->results();
        j[name] = r.size() == 1 ? nlohmann::json(r.front()) : nlohmann::json(r);
      } else if (default_also && !opt->get_default_str().empty()) {
        j[name] = opt->get_default_str();
      }
    }
    return j.dump(2) + "\n";
  }

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(input);
    } catch (const nlohmann::json::parse_error& e) {
      throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
    std::vector<std::string> active;
    if (const auto subs = root_->get_subcommands(); !subs.empty()) active.push_back(subs.front()->get_name());
    std::vector<CLI::ConfigItem> items;
    for (const auto& [key, value] : j.items()) {
      if (value.is_object()) {
        collect(value, {key}, items);
      } else {
        collect(nlohmann::json{{key, value}}, active, items);
      }
    }
    return items;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void collect(const nlohmann::json& obj, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, value] : obj.items()) {
      if (value.is_object()) {
        auto sub = parents;
        sub.push_back(key);
        collect(value, sub, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else if (!value.is_null()) {
        item.inputs.push_back(scalar(value));
      }
      out.push_back(std::move(item));
    }
  }

  const CLI::App* root_;
};

struct BackendOptions {
  std::string mock;
  std::string endpoint;
  std::string model;
  std::size_t top_k = lara::kDefaultTopK;
  double timeout_s = 30.0;
  int max_retries = 4;
  std::string cache_dir;
  std::size_t jobs = lara::default_jobs();
  CLI::Option* top_k_opt = nullptr;
};

struct Options {
  std::string task;
  std::string fit_output = "weights.json";
  std::string eval_output = "report.json";
  std::string infer_output;
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> shuffle_seed;

  // fit
  std::string mode = "binary";
  std::vector<std::size_t> candidate_Ls{2, 4, 8};
  std::size_t iterations = 20;
  std::size_t population = 0;

  // infer / eval
  std::string method = "icl";
  std::size_t L = 0;
  std::string weights;
  bool fail_fast = false;
  std::vector<std::string> inputs;
  std::string input_file;

  // shared decoding / loss knobs
  std::size_t max_tokens = 16;
  std::vector<std::string> stops{"\\n"};
  double delta = 0.0;
  bool normalize_binary = false;

  BackendOptions backend;
};

// "\n" and "\t" escapes so stop sequences can be typed on a shell line.
std::string unescape(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && i + 1 < s.size()) {
      const char c = s[++i];
      out.push_back(c == 'n' ? '\n' : c == 't' ? '\t' : c);
    } else {
      out.push_back(s[i]);
    }
  }
  return out;
}

void add_backend_options(CLI::App* cmd, BackendOptions& b) {
  auto* g = cmd->add_option_group("backend");
  g->add_option("--mock", b.mock, "Table LM JSON file (deterministic offline backend)");
  g->add_option("--endpoint", b.endpoint, "OpenAI-compatible base URL, e.g. http://localhost:8000/v1");
  g->add_option("--model", b.model, "Model id sent to the endpoint");
  b.top_k_opt = g->add_option("--top-k", b.top_k, "Logprobs requested per position")->capture_default_str();
  g->add_option("--timeout", b.timeout_s, "Per-request timeout in seconds")->capture_default_str();
  g->add_option("--max-retries", b.max_retries, "Total attempts per request")->capture_default_str();
  g->add_option("--cache-dir", b.cache_dir, "Response cache directory (env LARA_CACHE_DIR)");
  g->add_option("--jobs", b.jobs, "Concurrent requests (default: CPUs, at most 8)")->capture_default_str();
}

void add_decode_options(CLI::App* cmd, Options& o) {
  cmd->add_option("--max-tokens", o.max_tokens, "Decode at most this many tokens")->capture_default_str();
  cmd->add_option("--stop", o.stops, "Stop sequence (repeatable; \\n escapes allowed)")->capture_default_str();
  cmd->add_option("--delta", o.delta, "Imputation margin for missing top-k entries")->capture_default_str();
  cmd->add_flag("--normalize-binary", o.normalize_binary, "Divide binary logit sums by the selected count");
}

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--task", o.task, "Task directory (train.jsonl, test.jsonl, template.json)")->required();
  cmd->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  cmd->add_option("--shuffle-seed", o.shuffle_seed, "Shuffle demonstrations before grouping");
  add_backend_options(cmd, o.backend);
}

// Backend stack: raw backend -> caching decorator (memory + optional disk).
struct Backend {
  std::unique_ptr<lara::LogitProvider> raw;
  std::unique_ptr<lara::DiskCache> disk;
  std::unique_ptr<lara::CachingProvider> cached;
  std::unique_ptr<lara::ThreadPool> pool;

  const lara::LogitProvider& provider() const { return *cached; }

  void report() const {
    const auto c = cached->counters();
    std::cerr << "cache: memory_hits=" << c.memory_hits << " disk_hits=" << c.disk_hits
              << " backend_requests=" << c.backend_requests << '\n';
  }
};

std::string resolve_cache_dir(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("LARA_CACHE_DIR"); env && *env) return env;
  return {};
}

Backend make_backend(const BackendOptions& b) {
  const bool mock = !b.mock.empty();
  const bool live = !b.endpoint.empty();
  if (mock == live) throw lara::ConfigError("exactly one backend is required: --mock FILE or --endpoint URL");
  if (b.jobs < 1) throw lara::ConfigError("--jobs must be at least 1");

  Backend be;
  if (mock) {
    auto table = lara::TableLM::load(b.mock);
    if (b.top_k_opt->count() > 0)
      table = lara::TableLM(table.default_logits(), table.rules(), b.top_k, table.model_id());
    be.raw = std::make_unique<lara::TableLM>(std::move(table));
  } else {
    if (b.model.empty()) throw lara::ConfigError("--model is required with --endpoint");
    if (!(b.timeout_s > 0.0)) throw lara::ConfigError("--timeout must be positive");
    lara::ProviderConfig pc;
    pc.endpoint = b.endpoint;
    pc.model_id = b.model;
    pc.top_k = b.top_k;
    pc.timeout = std::chrono::milliseconds(static_cast<long long>(b.timeout_s * 1000.0));
    pc.max_retries = b.max_retries;
    if (const char* key = std::getenv("LARA_API_KEY"); key && *key) pc.auth_token = key;
    be.raw = std::make_unique<lara::OpenAICompatibleProvider>(std::move(pc));
  }
  if (auto dir = resolve_cache_dir(b.cache_dir); !dir.empty()) be.disk = std::make_unique<lara::DiskCache>(dir);
  be.cached = std::make_unique<lara::CachingProvider>(*be.raw, be.disk.get());
  if (b.jobs > 1) be.pool = std::make_unique<lara::ThreadPool>(b.jobs - 1);
  return be;
}

lara::DecodeParams decode_params(const Options& o) {
  lara::DecodeParams p;
  p.max_tokens = o.max_tokens;
  p.stop_sequences.clear();
  for (const auto& s : o.stops) p.stop_sequences.push_back(unescape(s));
  p.impute_margin = o.delta;
  p.normalize_binary = o.normalize_binary;
  p.validate();
  return p;
}

lara::MethodConfig method_config(const Options& o) {
  lara::MethodConfig mc;
  mc.method = lara::parse_method(o.method);
  if (o.L > 0) mc.L = o.L;
  if (!o.weights.empty()) mc.weights = lara::FitResult::load(o.weights);
  mc.decode = decode_params(o);
  mc.fail_fast = o.fail_fast;
  mc.shuffle_seed = o.shuffle_seed;
  return mc;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw lara::ConfigError("cannot write " + path);
}

// JSONL with an "input" field per non-blank line; other fields are ignored.
std::vector<std::string> read_inputs(const std::string& path) {
  std::istringstream in(lara::detail::read_file(path));
  std::vector<std::string> out;
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = path + " line " + std::to_string(lineno);
    try {
      out.push_back(lara::detail::required_string(nlohmann::json::parse(line), "input", where));
    } catch (const nlohmann::json::exception& e) {
      throw lara::ConfigError(where + ": " + e.what());
    }
  }
  return out;
}

std::string format_loss(double x) {
  if (!std::isfinite(x)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << x;
  return os.str();
}

int cmd_fit(const Options& o) {
  const auto task = lara::load_task(o.task);
  auto be = make_backend(o.backend);

  lara::FitConfig fc;
  fc.mode = lara::parse_weight_mode(o.mode);
  fc.iterations = o.iterations;
  fc.candidate_Ls = o.candidate_Ls;
  fc.seed = o.seed;
  fc.population = o.population;
  fc.impute_margin = o.delta;
  fc.normalize_binary = o.normalize_binary;
  fc.shuffle_seed = o.shuffle_seed;
  lara::FitHooks hooks;
  hooks.pool = be.pool.get();

  lara::FitResult fit;
  if (o.L > 0) {
    fit = lara::fit_weights(lara::partition_demos(task.train, o.L, o.shuffle_seed), task.train, task.tpl,
                            be.provider(), fc, hooks);
  } else {
    fit = lara::select_L(task.train, task.tpl, be.provider(), fc, hooks);
  }
  fit.save(o.fit_output);

  std::cout << "weights          " << o.fit_output << '\n'
            << "mode             " << lara::to_string(fit.weights.mode()) << '\n'
            << "L                " << fit.L << '\n'
            << "validation_loss  " << format_loss(fit.validation_loss) << '\n'
            << "nonzero_groups   " << fit.weights.active_count() << '/' << fit.weights.size() << '\n';
  for (const auto& c : fit.candidates)
    std::cout << "candidate        L=" << c.L << "  validation_loss=" << format_loss(c.validation_loss) << '\n';
  be.report();
  return kExitOk;
}

int cmd_infer(const Options& o) {
  const auto task = lara::load_task(o.task);
  auto be = make_backend(o.backend);
  const auto mc = method_config(o);
  const auto plan = lara::make_plan(task, mc);

  std::vector<std::string> inputs = o.inputs;
  if (!o.input_file.empty())
    for (auto& in : read_inputs(o.input_file)) inputs.push_back(std::move(in));
  if (inputs.empty()) throw lara::ConfigError("no inputs: pass --input TEXT or --input-file FILE");

  std::vector<lara::Prediction> preds(inputs.size());
  lara::parallel_for(be.pool.get(), inputs.size(), [&](std::size_t i) {
    try {
      preds[i] = lara::predict(plan, task.tpl, inputs[i], be.provider(), mc.decode, be.pool.get());
    } catch (...) {
      lara::detail::rethrow_with_context("input " + std::to_string(i));
    }
  });

  std::ostringstream os;
  for (std::size_t i = 0; i < inputs.size(); ++i)
    os << nlohmann::json{{"input", inputs[i]}, {"prediction", preds[i].text}}.dump() << '\n';
  if (o.infer_output.empty()) {
    std::cout << os.str();
  } else {
    write_text(o.infer_output, os.str());
  }
  be.report();
  return kExitOk;
}

int cmd_eval(const Options& o) {
  const auto task = lara::load_task(o.task);
  auto be = make_backend(o.backend);
  const auto report = lara::run_eval(task, method_config(o), be.provider(), be.pool.get());
  write_text(o.eval_output, report.to_json().dump(2) + "\n");
  std::cout << report.to_table() << "report    " << o.eval_output << '\n';
  be.report();
  return kExitOk;
}

int cmd_cache(const std::string& action, const std::string& flag_dir) {
  const auto dir = resolve_cache_dir(flag_dir);
  if (dir.empty()) throw lara::ConfigError("no cache directory: pass --cache-dir or set LARA_CACHE_DIR");
  if (action == "clear") {
    const auto removed = lara::DiskCache::clear(dir);
    std::cout << "removed " << removed << " entries\n";
  }
  const auto s = lara::DiskCache::stats(dir);
  std::cout << s.entries << " entries, " << s.bytes << " bytes\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weighted logit ensembles over in-context demonstration groups"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lara 0.1.0");
  app.set_config("--config", "", "JSON file with option defaults; command-line flags take precedence");
  app.config_formatter(std::make_shared<JsonConfig>(&app));
  app.fallthrough();

  Options o;
  auto* fit = app.add_subcommand("fit", "Fit group weights on the training pool and write a weights file");
  add_common(fit, o);
  fit->add_option("--mode", o.mode, "binary (subset selection) or continuous (simplex)")
      ->check(CLI::IsMember({"binary", "continuous"}))
      ->capture_default_str();
  fit->add_option("--candidate-L", o.candidate_Ls, "Group sizes to try")->delimiter(',')->capture_default_str();
  fit->add_option("--L", o.L, "Fixed group size (skips the candidate search)");
  fit->add_option("--iterations", o.iterations, "Optimizer iterations / generations")->capture_default_str();
  fit->add_option("--population", o.population, "CMA-ES population (default 4 + floor(3 ln d))");
  fit->add_option("--output", o.fit_output, "Weights file to write")->capture_default_str();
  fit->add_option("--delta", o.delta, "Imputation margin for missing top-k entries")->capture_default_str();
  fit->add_flag("--normalize-binary", o.normalize_binary, "Divide binary logit sums by the selected count");

  auto* infer = app.add_subcommand("infer", "Decode answers for new inputs");
  add_common(infer, o);
  infer->add_option("--method", o.method, "icl, lag_uniform, majority_vote, lara or blara")->capture_default_str();
  infer->add_option("--L", o.L, "Group size for lag_uniform / majority_vote");
  infer->add_option("--weights", o.weights, "Weights file for lara / blara");
  infer->add_option("--input", o.inputs, "Query input (repeatable)");
  infer->add_option("--input-file", o.input_file, "JSONL file of {\"input\": ...} records");
  infer->add_option("--output", o.infer_output, "Write predictions JSONL here instead of stdout");
  add_decode_options(infer, o);

  auto* eval = app.add_subcommand("eval", "Score a method on the task's test split");
  add_common(eval, o);
  eval->add_option("--method", o.method, "icl, lag_uniform, majority_vote, lara or blara")->capture_default_str();
  eval->add_option("--L", o.L, "Group size for lag_uniform / majority_vote");
  eval->add_option("--weights", o.weights, "Weights file for lara / blara");
  eval->add_flag("--fail-fast", o.fail_fast, "Abort on the first failing example");
  eval->add_option("--output", o.eval_output, "Report JSON to write")->capture_default_str();
  add_decode_options(eval, o);

  std::string cache_action;
  std::string cache_dir;
  auto* cache = app.add_subcommand("cache", "Inspect or clear the response cache");
  cache->add_option("action", cache_action, "stats or clear")->required()->check(CLI::IsMember({"stats", "clear"}));
  cache->add_option("--cache-dir", cache_dir, "Cache directory (env LARA_CACHE_DIR)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*fit) return cmd_fit(o);
    if (*infer) return cmd_infer(o);
    if (*eval) return cmd_eval(o);
    return cmd_cache(cache_action, cache_dir);
  } catch (const lara::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const lara::ProviderError& e) {
    std::cerr << "provider error: " << e.what() << '\n';
    return kExitProvider;
  } catch (const lara::InvariantError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}
