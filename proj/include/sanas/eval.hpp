#pragma once

#include <string>
#include <vector>

#include "sanas/supernet.hpp"
#include "sanas/weightshare.hpp"

namespace sanas {

// Tie-corrected tau (tau-b). Throws ContractError on length mismatch or an
// all-tied argument (undefined denominator).
double kendall_tau(const std::vector<double>& x, const std::vector<double>& y);
// Product-moment correlation; zero variance is a contract error.
double pearson_r(const std::vector<double>& x, const std::vector<double>& y);
// Pearson over average-tie ranks.
double spearman_rho(const std::vector<double>& x, const std::vector<double>& y);
std::vector<double> average_ranks(const std::vector<double>& x);

struct PoolDistributionStats {
  std::string pool;
  size_t size = 0;
  GaussianFit conv_view_gaussian;   // raw weights
  LaplacianFit add_view_laplacian;  // transformed weights
  double conv_view_gaussian_kl = 0.0;  // raw weights vs fitted Gaussian
  double conv_view_laplacian_kl = 0.0; // raw weights vs fitted Laplacian
  double add_view_laplacian_kl = 0.0;  // transformed weights vs fitted Laplacian
  double add_view_gaussian_kl = 0.0;   // transformed weights vs fitted Gaussian
};

// Per-pool histogram + fits. The Add view applies the transformation kernel
// in heterogeneous mode and is the raw pool otherwise.
std::vector<PoolDistributionStats> distribution_stats(const Supernet& net, int bins = 64);
// CSV rows: pool,view,bin_left,bin_right,count,fitted_gaussian_density,
// fitted_laplacian_density.
void write_distribution_csv(const std::string& path, const Supernet& net, int bins = 64);

struct RankingStudyConfig {
  int pool_size = 20;
  int seeds = 5;
  int supernet_steps = 2000;
  int standalone_steps = 200;
  OptimizerConfig optimizer;
  LossConfig loss;
  size_t eval_limit = 256;
  int jobs = 1;
  std::vector<SharingMode> modes{SharingMode::Naive, SharingMode::Heterogeneous};
};

struct RankingStudyRun {
  SharingMode mode = SharingMode::Naive;
  uint64_t seed = 0;
  std::vector<double> inherited_acc;
  double tau = 0.0, pearson = 0.0, spearman = 0.0;
  std::vector<PoolDistributionStats> pools;
};

struct RankingStudyResult {
  std::vector<ArchGene> gene_pool;
  std::vector<double> standalone_acc;
  std::vector<RankingStudyRun> runs;
  double median_tau(SharingMode mode) const;
};

// Samples a fixed pool of distinct genes, trains standalone references, then
// one supernet per (mode, seed); correlates inherited against standalone
// accuracy per run.
RankingStudyResult ranking_study(const SearchSpace& space, const Dataset& train,
                                 const Dataset& val, const RankingStudyConfig& cfg,
                                 uint64_t seed);

// CSV rows: mode,seed,tau,pearson,spearman.
void write_study_csv(const std::string& path, const RankingStudyResult& study);

}  // namespace sanas
