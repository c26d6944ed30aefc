#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sanas/costmodel.hpp"
#include "sanas/supernet.hpp"

namespace sanas {

struct EvoConfig {
  int steps = 20;
  int population = 50;
  int crossover_count = 25;
  int mutation_count = 25;
  double mutation_prob = 0.2;
  std::string constraint_metric = "flops";  // flops | energy | latency
  double budget = 0.0;                      // 0 = unconstrained
  uint64_t seed = 1;
  int jobs = 1;

  void validate() const;
  uint64_t evaluation_budget() const {
    return static_cast<uint64_t>(population) +
           static_cast<uint64_t>(steps) * static_cast<uint64_t>(crossover_count + mutation_count);
  }
  // Published search settings: image profile 20/50/25/25/0.2, sequence
  // profile 30/125/50/50/0.3.
  static EvoConfig cv_default();
  static EvoConfig nlp_default();
};

using FitnessFn = std::function<double(const ArchGene&)>;
using CostFn = std::function<double(const ArchGene&)>;

// Each structural choice (stage depth, per-slot block type) independently
// resampled with probability `prob`; the result is re-canonicalized.
ArchGene mutate(const ArchGene& gene, double prob, Rng& rng, const SearchSpace& space);
// Per-stage depth and per-slot type each drawn from one parent; slots only
// one parent owns fall back to that parent, fresh uniform otherwise.
ArchGene crossover(const ArchGene& a, const ArchGene& b, Rng& rng, const SearchSpace& space);

struct SearchHistoryRow {
  int generation = 0;
  std::string gene;
  double fitness = 0.0;
  double cost = 0.0;
  bool feasible = true;
};

struct SearchResult {
  ArchGene best;
  double best_fitness = 0.0;
  std::vector<SearchHistoryRow> history;
  uint64_t evaluations = 0;         // fitness calls actually made
  uint64_t unique_genes = 0;
  double wall_seconds = 0.0;
};

// Truncation-selection evolutionary search under a hard cost constraint:
// the population survives by fitness among parents, crossover children and
// mutants; infeasible candidates are resampled up to 100 times, then
// dropped. Throws InfeasibleError when no feasible gene shows up in 1e4
// initial samples.
SearchResult evolve(const SearchSpace& space, const EvoConfig& cfg, const FitnessFn& fitness,
                    const CostFn& cost);

// Uniform feasible sampling at the same evaluation budget as evolve.
SearchResult random_search(const SearchSpace& space, const EvoConfig& cfg,
                           const FitnessFn& fitness, const CostFn& cost);

void write_history_csv(const std::string& path, const std::vector<SearchHistoryRow>& rows);

// Three fully-connected layers mapping an architecture encoding to a
// positive latency (softplus output). Features: per-slot one-hot block type,
// downsample flag and active flag, plus global mult/add/shift counts;
// features and labels are z-scored from the training split.
struct LatencyPredictor {
  int hidden = 64;
  Tensor w1, b1, w2, b2, w3, b3;
  Tensor feat_mean, feat_std;
  double label_mean = 1.0;

  std::vector<double> features(const ArchGene& gene, const SearchSpace& space) const;
  double predict(const ArchGene& gene, const SearchSpace& space) const;

  void save(const std::string& path) const;
  static LatencyPredictor load(const std::string& path);
};

struct PredictorFitReport {
  double holdout_mape = 0.0;  // mean absolute percentage error on the 20% split
  bool degenerate_labels = false;
};

// Trains on an 80/20 split with Adam on squared error. Needs >= 200 samples
// and positive labels; all-equal labels only produce a warning flag.
LatencyPredictor fit_latency_predictor(const std::vector<std::pair<ArchGene, double>>& samples,
                                       const SearchSpace& space, uint64_t seed,
                                       PredictorFitReport* report = nullptr, int hidden = 64,
                                       int epochs = 3000);

}  // namespace sanas
