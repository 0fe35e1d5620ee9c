#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include "lara/fit.hpp"
#include "lara/harness.hpp"
#include "test_util.hpp"

using namespace lara;

namespace {

struct Planted {
  Task task = load_task(lara_test::fixture("planted"));
  TableLM lm = TableLM::load(lara_test::fixture("planted_table.json"));
};

const Planted& planted() {
  static const Planted p;
  return p;
}

}  // namespace

TEST(FitWeights, BinaryResultShape) {
  const auto& p = planted();
  FitConfig fc;
  auto fit = fit_weights(partition_demos(p.task.train, 4), p.task.train, p.task.tpl, p.lm, fc);
  EXPECT_EQ(fit.weights.size(), 4u);
  EXPECT_EQ(fit.weights.mode(), WeightMode::binary);
  ASSERT_EQ(fit.loss_trace.size(), 2u);
  EXPECT_EQ(fit.loss_trace[0].half, "A");
  EXPECT_EQ(fit.loss_trace[1].half, "B");
  EXPECT_EQ(fit.loss_trace[0].trace.size(), fc.iterations + 1);
  EXPECT_TRUE(std::isfinite(fit.validation_loss));
}

TEST(FitWeights, PlantedHalfAFindsInformativeGroup) {
  const auto& p = planted();
  const auto part = partition_demos(p.task.train, 4);
  const auto contexts = part.contexts(p.task.train, p.task.tpl);
  FitConfig fc;
  FitHooks hooks;
  detail::HalfProblem half("A", {0, 1}, part, p.task.train, contexts, p.task.tpl, p.lm, fc, hooks);
  std::vector<double> best;
  double best_loss = INFINITY;
  for (auto w : std::vector<std::vector<double>>{{0, 0}, {0, 1}, {1, 0}, {1, 1}}) {
    const double l = half.loss(w);
    if (l < best_loss) best_loss = l, best = w;
  }
  EXPECT_EQ(best, (std::vector<double>{1, 0}));

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    fc.seed = seed;
    auto fit = fit_weights(part, p.task.train, p.task.tpl, p.lm, fc);
    EXPECT_EQ(fit.weights[0], 1.0) << "seed " << seed;
    EXPECT_EQ(fit.weights[1], 0.0) << "seed " << seed;
  }
}

TEST(FitWeights, FlatLandscapeContinuous) {
  // Context-free backend: every weighting gives the same loss.
  TableLM lm(SparseLogits{{" yes", -0.3}, {" no", -1.4}, {"\n", -2.0}});
  DemoSet demos;
  for (int i = 0; i < 8; ++i) demos.emplace_back("x" + std::to_string(i), i % 2 ? "yes" : "no");
  Template tpl("Q: {input}\nA: {output}", "Q: {input}\nA:", "\n\n");
  FitConfig fc;
  fc.mode = WeightMode::continuous;
  fc.iterations = 10;
  const auto part = partition_demos(demos, 2);
  auto fit = fit_weights(part, demos, tpl, lm, fc);
  FitResult uniform = fit;
  uniform.weights = WeightVector::uniform(4);
  EXPECT_NEAR(fit.validation_loss, evaluate_validation_loss(uniform, demos, tpl, lm, fc), 1e-6);
  double s = 0;
  for (double w : fit.weights.values()) s += w;
  EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(FitWeights, SingleGroupSkipsSearch) {
  const auto& p = planted();
  FitConfig fc;
  auto fit = fit_weights(partition_demos(p.task.train, 16), p.task.train, p.task.tpl, p.lm, fc);
  EXPECT_EQ(fit.weights, WeightVector::ones(1));
  EXPECT_TRUE(std::isnan(fit.validation_loss));
}

TEST(FitWeights, AllZeroConcatenationIsReplaced) {
  // L=8 on the planted pool: both groups are noise, so each half prefers
  // selecting nothing; the combined vector must still select something.
  const auto& p = planted();
  FitConfig fc;
  auto fit = fit_weights(partition_demos(p.task.train, 8), p.task.train, p.task.tpl, p.lm, fc);
  EXPECT_GT(fit.weights.active_count(), 0u);
}

TEST(FitWeights, SeededRunsAreIdentical) {
  const auto& p = planted();
  for (auto mode : {WeightMode::binary, WeightMode::continuous}) {
    FitConfig fc;
    fc.mode = mode;
    fc.seed = 21;
    const auto part = partition_demos(p.task.train, 4);
    auto a = fit_weights(part, p.task.train, p.task.tpl, p.lm, fc);
    auto b = fit_weights(part, p.task.train, p.task.tpl, p.lm, fc);
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
  }
}

TEST(FitWeights, NoValidationLeakage) {
  const auto& p = planted();
  const auto part = partition_demos(p.task.train, 4);
  std::vector<LossEvaluation> calls;
  std::mutex mu;
  FitHooks hooks;
  hooks.on_loss = [&](const LossEvaluation& e) {
    std::lock_guard lock(mu);
    calls.push_back(e);
  };
  for (auto mode : {WeightMode::binary, WeightMode::continuous}) {
    FitConfig fc;
    fc.mode = mode;
    fit_weights(part, p.task.train, p.task.tpl, p.lm, fc, hooks);
  }
  ASSERT_FALSE(calls.empty());
  for (const auto& c : calls) {
    std::set<std::size_t> optimized;
    for (auto g : c.optimized_groups)
      for (auto i : part.groups[g]) optimized.insert(i);
    EXPECT_FALSE(c.validation_demos.empty());
    for (auto v : c.validation_demos) EXPECT_EQ(optimized.count(v), 0u) << "half " << c.half;
  }
}

TEST(FitWeights, RequestsPairContextsWithOtherHalfQueries) {
  const auto& p = planted();
  const auto part = partition_demos(p.task.train, 4);
  const auto contexts = part.contexts(p.task.train, p.task.tpl);
  RecordingProvider rec(p.lm);
  FitConfig fc;
  fit_weights(part, p.task.train, p.task.tpl, rec, fc);
  ASSERT_GT(rec.count(), 0u);
  for (const auto& prefix : rec.prefixes()) {
    // Which group's context (if any) opens the prompt?
    std::optional<std::size_t> group;
    for (std::size_t g = 0; g < contexts.size(); ++g)
      if (prefix.rfind(contexts[g] + p.task.tpl.separator(), 0) == 0) group = g;
    if (!group) continue;  // zero-shot prompt
    const bool in_a = *group < 2;
    bool matched = false;
    for (std::size_t g = 0; g < part.k(); ++g)
      for (auto i : part.groups[g])
        if (prefix.find(p.task.tpl.render_query(p.task.train[i].input), contexts[*group].size()) !=
            std::string::npos) {
          EXPECT_NE(g < 2, in_a) << "group " << *group << " scored on its own half's demo " << i;
          matched = true;
        }
    EXPECT_TRUE(matched);
  }
}

TEST(SelectL, ThreeCandidatesOnThirtyTwo) {
  const auto task = load_task(lara_test::fixture("uniform"));
  const auto lm = TableLM::load(lara_test::fixture("uniform_table.json"));
  FitConfig fc;
  fc.iterations = 5;
  auto fit = select_L(task.train, task.tpl, lm, fc);
  ASSERT_EQ(fit.candidates.size(), 3u);
  EXPECT_EQ(fit.candidates[0].L, 2u);
  EXPECT_EQ(fit.candidates[2].L, 8u);
}

TEST(SelectL, SingleCandidateReturned) {
  const auto& p = planted();
  FitConfig fc;
  fc.candidate_Ls = {8};
  EXPECT_EQ(select_L(p.task.train, p.task.tpl, p.lm, fc).L, 8u);
}

TEST(SelectL, PlantedChoosesFour) {
  const auto& p = planted();
  FitConfig fc;
  auto fit = select_L(p.task.train, p.task.tpl, p.lm, fc);
  EXPECT_EQ(fit.L, 4u);
  for (const auto& c : fit.candidates) {
    if (c.L != 4) {
      EXPECT_GT(c.validation_loss, fit.validation_loss);
    }
  }
}

TEST(SelectL, InfeasibleCandidates) {
  const auto& p = planted();
  FitConfig fc;
  fc.candidate_Ls = {16, 32};
  EXPECT_THROW(select_L(p.task.train, p.task.tpl, p.lm, fc), ConfigError);
  fc.candidate_Ls = {4, 32};
  EXPECT_EQ(select_L(p.task.train, p.task.tpl, p.lm, fc).candidates.size(), 1u);
}

TEST(FitResult, JsonRoundTrip) {
  const auto& p = planted();
  FitConfig fc;
  fc.seed = 3;
  auto fit = select_L(p.task.train, p.task.tpl, p.lm, fc);
  lara_test::TempDir dir;
  fit.save(dir / "w.json");
  auto back = FitResult::load(dir / "w.json");
  EXPECT_EQ(back.to_json().dump(), fit.to_json().dump());
  auto j = nlohmann::json::parse(lara_test::read_file(dir / "w.json"));
  for (const char* key : {"mode", "L", "weights", "validation_loss", "seed", "loss_trace", "group_demo_indices"})
    EXPECT_TRUE(j.contains(key)) << key;
}

TEST(FitResult, RejectsInconsistentFiles) {
  lara_test::TempDir dir;
  lara_test::write_file(dir / "a.json", R"({"mode": "binary", "L": 2, "weights": [1, 0], "group_demo_indices": [[0, 1]]})");
  EXPECT_THROW(FitResult::load(dir / "a.json"), ConfigError);
  lara_test::write_file(dir / "b.json", R"({"mode": "binary", "L": 2, "weights": [1, 0.5], "group_demo_indices": [[0, 1], [2, 3]]})");
  EXPECT_THROW(FitResult::load(dir / "b.json"), ConfigError);
  lara_test::write_file(dir / "c.json", "{oops");
  EXPECT_THROW(FitResult::load(dir / "c.json"), ConfigError);
  EXPECT_THROW(FitResult::load(dir / "missing.json"), ConfigError);
}

TEST(FitConfig, Validation) {
  FitConfig fc;
  fc.iterations = 0;
  EXPECT_THROW(fc.validate(), ConfigError);
  fc = {};
  fc.candidate_Ls = {};
  EXPECT_THROW(fc.validate(), ConfigError);
}
