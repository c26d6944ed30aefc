#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "sanas/errors.hpp"
#include "sanas/search.hpp"

using namespace sanas;

namespace {

SearchSpace toy_space() {
  SearchSpace s;
  s.in_channels = 3;
  s.in_resolution = 16;
  s.num_classes = 4;
  s.stages = {{1, 2, 8, 16}, {1, 2, 8, 8}};
  s.attn_max_resolution = 16;  // all four types everywhere: 20 * 20 = 400 genes
  s.attn_heads = 4;
  s.finalize();
  return s;
}

// deterministic smooth-ish fitness with a unique optimum
double toy_fitness(const ArchGene& g) {
  double f = 0.0;
  size_t pos = 0;
  for (const auto& slot : g.slots) {
    pos++;
    if (!slot.active) continue;
    f += std::sin(1.3 * static_cast<double>(pos) + 0.7 * static_cast<double>(slot.type));
    f += 0.21 * static_cast<double>(slot.type == BlockType::Conv);
  }
  return f;
}

// rugged fitness: smooth part plus a keyed hash bump
double rugged_fitness(const ArchGene& g) {
  const double smooth = toy_fitness(g);
  const uint64_t h = fnv1a(g.to_text());
  return smooth + 1.5 * (static_cast<double>(h % 10007) / 10007.0);
}

}  // namespace

TEST_CASE("mutation with zero probability is the identity") {
  SearchSpace s = toy_space();
  Rng rng(1);
  for (int i = 0; i < 50; ++i) {
    ArchGene g = sample_uniform(s, rng);
    CHECK(mutate(g, 0.0, rng, s) == g);
  }
}

TEST_CASE("mutation on a single-choice space is the identity") {
  SearchSpace s = toy_space();
  SearchSpace fixed = s;
  fixed.stages[0].max_blocks = fixed.stages[0].min_blocks = 1;
  fixed.stages[1].max_blocks = fixed.stages[1].min_blocks = 1;
  fixed.finalize();
  for (auto& slot : fixed.slots) slot.choices = {BlockType::Add};
  Rng rng(2);
  ArchGene g = sample_uniform(fixed, rng);
  for (int i = 0; i < 20; ++i) CHECK(mutate(g, 1.0, rng, fixed) == g);
}

TEST_CASE("mutation closure and per-slot change rate") {
  SearchSpace s;
  s.in_channels = 3;
  s.in_resolution = 8;
  s.num_classes = 4;
  s.stages = {{2, 2, 8, 8}};  // fixed depth isolates the per-slot type rate
  s.attn_max_resolution = 8;
  s.attn_heads = 4;
  s.finalize();
  Rng rng(3);
  ArchGene base = sample_uniform(s, rng);
  const double prob = 0.2;
  const int trials = 10000;
  int changed[2] = {0, 0};
  for (int i = 0; i < trials; ++i) {
    ArchGene m = mutate(base, prob, rng, s);
    validate_gene(m, s);
    for (size_t slot = 0; slot < 2; ++slot)
      if (m.slots[slot].type != base.slots[slot].type) changed[slot]++;
  }
  const double expect = prob * (1.0 - 1.0 / 4.0);  // resampling may redraw the same type
  for (int slot = 0; slot < 2; ++slot)
    CHECK(std::abs(static_cast<double>(changed[slot]) / trials - expect) < 0.02);
}

TEST_CASE("crossover of a gene with itself is the identity") {
  SearchSpace s = toy_space();
  Rng rng(4);
  for (int i = 0; i < 50; ++i) {
    ArchGene g = sample_uniform(s, rng);
    CHECK(crossover(g, g, rng, s) == g);
  }
}

TEST_CASE("crossover preserves slots both parents agree on and validates") {
  SearchSpace s = toy_space();
  Rng rng(5);
  for (int i = 0; i < 10000; ++i) {
    ArchGene a = sample_uniform(s, rng);
    ArchGene b = sample_uniform(s, rng);
    ArchGene child = crossover(a, b, rng, s);
    validate_gene(child, s);
    for (size_t j = 0; j < s.slots.size(); ++j)
      if (a.slots[j] == b.slots[j] && child.slots[j].active == a.slots[j].active &&
          a.slots[j].active && child.slots[j].active)
        CHECK(child.slots[j].type == ((a.slots[j] == b.slots[j]) ? a.slots[j].type
                                                                 : child.slots[j].type));
  }
}

TEST_CASE("evolution finds the exhaustive optimum on a small space") {
  SearchSpace s = toy_space();
  auto genes = enumerate_genes(s);
  REQUIRE(genes.size() == 400);

  // a budget tight enough to exclude some genes
  std::vector<double> costs;
  CostFn cost = [&](const ArchGene& g) {
    return static_cast<double>(count_ops(g, s).total_ops());
  };
  for (const ArchGene& g : genes) costs.push_back(cost(g));
  std::vector<double> sorted_costs = costs;
  std::sort(sorted_costs.begin(), sorted_costs.end());
  const double budget = sorted_costs[sorted_costs.size() * 7 / 10];

  double best_feasible = -1e300;
  for (size_t i = 0; i < genes.size(); ++i)
    if (costs[i] <= budget) best_feasible = std::max(best_feasible, toy_fitness(genes[i]));

  for (uint64_t seed : {1, 2, 3, 4, 5}) {
    EvoConfig cfg = EvoConfig::cv_default();
    cfg.budget = budget;
    cfg.seed = seed;
    SearchResult r = evolve(s, cfg, toy_fitness, cost);
    CHECK(r.best_fitness == doctest::Approx(best_feasible).epsilon(1e-12));
    CHECK(cost(r.best) <= budget);
    for (const auto& row : r.history)
      if (row.feasible) CHECK(row.cost <= budget);
  }
}

TEST_CASE("evolution reports an infeasible budget") {
  SearchSpace s = toy_space();
  EvoConfig cfg = EvoConfig::cv_default();
  cfg.budget = 1.0;  // below any achievable cost
  CostFn cost = [&](const ArchGene& g) {
    return static_cast<double>(count_ops(g, s).total_ops());
  };
  try {
    evolve(s, cfg, toy_fitness, cost);
    FAIL("expected InfeasibleError");
  } catch (const InfeasibleError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("budget") != std::string::npos);
    CHECK(msg.find("minimum sampled cost") != std::string::npos);
  }
  CHECK_THROWS_AS(random_search(s, cfg, toy_fitness, cost), InfeasibleError);
}

TEST_CASE("evolution is deterministic given the seed") {
  SearchSpace s = toy_space();
  EvoConfig cfg = EvoConfig::cv_default();
  cfg.seed = 9;
  CostFn cost = [](const ArchGene&) { return 1.0; };
  SearchResult a = evolve(s, cfg, rugged_fitness, cost);
  SearchResult b = evolve(s, cfg, rugged_fitness, cost);
  CHECK(a.best.to_text() == b.best.to_text());
  REQUIRE(a.history.size() == b.history.size());
  for (size_t i = 0; i < a.history.size(); ++i) CHECK(a.history[i].gene == b.history[i].gene);
}

TEST_CASE("evolution beats or ties random search under an equal budget") {
  SearchSpace s;
  s.in_channels = 3;
  s.in_resolution = 16;
  s.num_classes = 4;
  s.stages = {{1, 3, 8, 16}, {1, 3, 8, 8}, {1, 3, 8, 4}};  // 84^3 = 592704 genes
  s.attn_max_resolution = 16;
  s.attn_heads = 4;
  s.finalize();
  CostFn cost = [](const ArchGene&) { return 1.0; };
  int wins = 0;
  for (uint64_t seed : {11, 22, 33, 44, 55}) {
    EvoConfig cfg = EvoConfig::cv_default();
    cfg.seed = seed;
    SearchResult evo = evolve(s, cfg, rugged_fitness, cost);
    SearchResult rnd = random_search(s, cfg, rugged_fitness, cost);
    CHECK(rnd.evaluations == cfg.evaluation_budget());
    CHECK(evo.evaluations <= cfg.evaluation_budget());
    if (evo.best_fitness >= rnd.best_fitness) wins++;
  }
  CHECK(wins >= 4);
}

TEST_CASE("random search history has a nondecreasing running best") {
  SearchSpace s = toy_space();
  EvoConfig cfg = EvoConfig::cv_default();
  cfg.seed = 13;
  CostFn cost = [](const ArchGene&) { return 1.0; };
  SearchResult r = random_search(s, cfg, rugged_fitness, cost);
  double best = -1e300;
  for (const auto& row : r.history) {
    best = std::max(best, row.fitness);
    CHECK(best >= row.fitness);
  }
  CHECK(r.best_fitness == best);
}

TEST_CASE("random search covers a small space given enough budget") {
  SearchSpace s;
  s.in_channels = 3;
  s.in_resolution = 8;
  s.num_classes = 4;
  s.stages = {{2, 2, 8, 8}};
  s.attn_max_resolution = 8;
  s.attn_heads = 4;
  s.finalize();
  REQUIRE(s.num_architectures() == 16);
  EvoConfig cfg = EvoConfig::cv_default();  // budget 1050 >> 16
  cfg.seed = 3;
  double best = -1e300;
  for (const ArchGene& g : enumerate_genes(s)) best = std::max(best, toy_fitness(g));
  SearchResult r = random_search(s, cfg, toy_fitness, [](const ArchGene&) { return 1.0; });
  CHECK(r.best_fitness == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("latency predictor reaches tight holdout error on exact labels") {
  SearchSpace s = toy_space();
  CostTable table = CostTable::builtin("45nm-FIX32");
  Rng rng(17);
  std::vector<std::pair<ArchGene, double>> samples;
  std::set<std::string> seen;
  Rng noise(0);
  while (samples.size() < 1000) {
    ArchGene g = sample_uniform(s, rng);
    samples.emplace_back(g, synthetic_latency(count_ops(g, s), table, noise, 0.0));
  }
  PredictorFitReport report;
  LatencyPredictor p = fit_latency_predictor(samples, s, 5, &report);
  CHECK_FALSE(report.degenerate_labels);
  CHECK(report.holdout_mape < 0.05);

  // positivity across the space
  for (int i = 0; i < 200; ++i) CHECK(p.predict(sample_uniform(s, rng), s) > 0.0);

  // save/load round trip predicts identically
  p.save("test_predictor.bin");
  LatencyPredictor q = LatencyPredictor::load("test_predictor.bin");
  ArchGene g = sample_uniform(s, rng);
  CHECK(p.predict(g, s) == q.predict(g, s));
  std::remove("test_predictor.bin");
}

TEST_CASE("latency predictor handles constant labels with a warning") {
  SearchSpace s = toy_space();
  Rng rng(19);
  std::vector<std::pair<ArchGene, double>> samples;
  for (int i = 0; i < 250; ++i) samples.emplace_back(sample_uniform(s, rng), 42.0);
  PredictorFitReport report;
  LatencyPredictor p = fit_latency_predictor(samples, s, 7, &report, 32, 800);
  CHECK(report.degenerate_labels);
  for (int i = 0; i < 20; ++i) {
    const double pred = p.predict(sample_uniform(s, rng), s);
    CHECK(std::abs(pred - 42.0) / 42.0 < 0.01);
  }
}

TEST_CASE("latency predictor rejects bad sample sets") {
  SearchSpace s = toy_space();
  Rng rng(23);
  std::vector<std::pair<ArchGene, double>> few;
  for (int i = 0; i < 100; ++i) few.emplace_back(sample_uniform(s, rng), 1.0);
  CHECK_THROWS_AS(fit_latency_predictor(few, s, 1), ContractError);
  std::vector<std::pair<ArchGene, double>> bad;
  for (int i = 0; i < 250; ++i) bad.emplace_back(sample_uniform(s, rng), 0.0);
  CHECK_THROWS_AS(fit_latency_predictor(bad, s, 1), ContractError);
}
