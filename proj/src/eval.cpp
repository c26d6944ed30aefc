#include "sanas/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numbers>
#include <thread>

#include "sanas/errors.hpp"

namespace sanas {

double kendall_tau(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw ContractError("kendall_tau: length mismatch " + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()));
  const size_t n = x.size();
  if (n < 2) throw ContractError("kendall_tau needs at least 2 observations");
  // tau-b: (C - D) / sqrt((n0 - n1)(n0 - n2)), n1/n2 = pairs tied in x/y
  long long concordant = 0, discordant = 0, tied_x = 0, tied_y = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      const bool tx = x[i] == x[j], ty = y[i] == y[j];
      if (tx) tied_x++;
      if (ty) tied_y++;
      if (tx || ty) continue;
      if ((x[i] > x[j]) == (y[i] > y[j]))
        concordant++;
      else
        discordant++;
    }
  const double n0 = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  const double denom_x = n0 - static_cast<double>(tied_x);
  const double denom_y = n0 - static_cast<double>(tied_y);
  if (denom_x <= 0.0 || denom_y <= 0.0)
    throw ContractError("kendall_tau undefined: an argument is entirely tied");
  return static_cast<double>(concordant - discordant) / std::sqrt(denom_x * denom_y);
}

double pearson_r(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw ContractError("pearson_r: length mismatch " + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()));
  const size_t n = x.size();
  if (n < 2) throw ContractError("pearson_r needs at least 2 observations");
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw ContractError("pearson_r undefined: zero variance");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
  const size_t n = x.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(n, 0.0);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) j++;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman_rho(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw ContractError("spearman_rho: length mismatch " + std::to_string(x.size()) + " vs " +
                        std::to_string(y.size()));
  return pearson_r(average_ranks(x), average_ranks(y));
}

namespace {

Tensor add_view(const Supernet& net, const SharedWeightPool& pool) {
  return net.mode == SharingMode::Heterogeneous ? transform(pool) : pool.weights;
}

}  // namespace

std::vector<PoolDistributionStats> distribution_stats(const Supernet& net, int bins) {
  std::vector<PoolDistributionStats> out;
  for (const SharedWeightPool* pool : net.pools()) {
    PoolDistributionStats s;
    s.pool = pool->name;
    s.size = pool->weights.numel();
    const Tensor added = add_view(net, *pool);
    s.conv_view_gaussian = fit_gaussian(pool->weights);
    s.add_view_laplacian = fit_laplacian(added);
    s.conv_view_gaussian_kl = kl_to_target(pool->weights, TargetFamily::Gaussian, bins, true);
    s.conv_view_laplacian_kl = kl_to_target(pool->weights, TargetFamily::Laplacian, bins, true);
    s.add_view_laplacian_kl = kl_to_target(added, TargetFamily::Laplacian, bins, true);
    s.add_view_gaussian_kl = kl_to_target(added, TargetFamily::Gaussian, bins, true);
    out.push_back(std::move(s));
  }
  return out;
}

void write_distribution_csv(const std::string& path, const Supernet& net, int bins) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open distribution csv: " + path);
  os << "pool,view,bin_left,bin_right,count,fitted_gaussian_density,fitted_laplacian_density\n";
  for (const SharedWeightPool* pool : net.pools()) {
    for (const char* view : {"conv", "add"}) {
      const Tensor w = view[0] == 'c' ? pool->weights : add_view(net, *pool);
      GaussianFit g = fit_gaussian(w);
      LaplacianFit l = fit_laplacian(w);
      const double sd = std::max(g.stddev, 1e-12);
      const double lo = g.mean - 6.0 * sd, width = 12.0 * sd / bins;
      std::vector<uint64_t> counts(static_cast<size_t>(bins), 0);
      for (double v : w.data) {
        if (v < lo || v >= lo + 12.0 * sd) continue;
        auto b = static_cast<size_t>((v - lo) / width);
        if (b >= static_cast<size_t>(bins)) b = static_cast<size_t>(bins) - 1;
        counts[b]++;
      }
      for (int b = 0; b < bins; ++b) {
        const double left = lo + b * width, right = left + width;
        const double mid = 0.5 * (left + right);
        const double gd = std::exp(-0.5 * (mid - g.mean) * (mid - g.mean) / (sd * sd)) /
                          (sd * std::sqrt(2.0 * std::numbers::pi));
        const double lscale = std::max(l.scale, 1e-12);
        const double ld = std::exp(-std::abs(mid - l.median) / lscale) / (2.0 * lscale);
        os << pool->name << "," << view << "," << left << "," << right << ","
           << counts[static_cast<size_t>(b)] << "," << gd << "," << ld << "\n";
      }
    }
  }
  if (!os) throw IoError("write failed: " + path);
}

double RankingStudyResult::median_tau(SharingMode mode) const {
  std::vector<double> taus;
  for (const auto& run : runs)
    if (run.mode == mode) taus.push_back(run.tau);
  if (taus.empty()) throw ContractError("no runs for requested sharing mode");
  std::sort(taus.begin(), taus.end());
  const size_t n = taus.size();
  return n % 2 == 1 ? taus[n / 2] : 0.5 * (taus[n / 2 - 1] + taus[n / 2]);
}

RankingStudyResult ranking_study(const SearchSpace& space, const Dataset& train,
                                 const Dataset& val, const RankingStudyConfig& cfg,
                                 uint64_t seed) {
  if (cfg.pool_size < 10)
    throw ContractError("ranking study needs a gene pool of at least 10, got " +
                        std::to_string(cfg.pool_size));
  if (space.num_architectures() < static_cast<uint64_t>(cfg.pool_size))
    throw ContractError("space too small for " + std::to_string(cfg.pool_size) +
                        " distinct genes");

  RankingStudyResult study;
  Rng pool_rng = Rng(seed).fork(fnv1a("study.pool"));
  std::vector<std::string> seen;
  int misses = 0;
  while (study.gene_pool.size() < static_cast<size_t>(cfg.pool_size)) {
    ArchGene g = sample_uniform(space, pool_rng);
    const std::string key = g.to_text();
    if (std::find(seen.begin(), seen.end(), key) == seen.end()) {
      seen.push_back(key);
      study.gene_pool.push_back(std::move(g));
    } else if (++misses > 100000) {
      throw ContractError("could not sample distinct genes");
    }
  }

  // standalone references, independent trainings
  study.standalone_acc.assign(study.gene_pool.size(), 0.0);
  {
    std::atomic<size_t> next{0};
    auto work = [&] {
      for (size_t i = next.fetch_add(1); i < study.gene_pool.size(); i = next.fetch_add(1)) {
        Supernet model = retrain_subnet(study.gene_pool[i], space, train, cfg.standalone_steps,
                                        cfg.optimizer, seed + 1000 + i);
        study.standalone_acc[i] =
            inherit_and_eval(model, enumerate_genes(model.space, 2)[0], val, cfg.eval_limit);
      }
    };
    const size_t workers = std::max(1, cfg.jobs);
    std::vector<std::thread> threads;
    for (size_t t = 1; t < workers; ++t) threads.emplace_back(work);
    work();
    for (auto& t : threads) t.join();
  }

  for (SharingMode mode : cfg.modes) {
    for (int s = 0; s < cfg.seeds; ++s) {
      const uint64_t run_seed = seed + 17 * static_cast<uint64_t>(s + 1);
      Supernet net = Supernet::create(space, mode, run_seed);
      train_supernet(net, train, cfg.supernet_steps, cfg.optimizer, cfg.loss, run_seed);
      RankingStudyRun run;
      run.mode = mode;
      run.seed = run_seed;
      run.inherited_acc.assign(study.gene_pool.size(), 0.0);
      {
        std::atomic<size_t> next{0};
        auto work = [&] {
          for (size_t i = next.fetch_add(1); i < study.gene_pool.size(); i = next.fetch_add(1))
            run.inherited_acc[i] = inherit_and_eval(net, study.gene_pool[i], val, cfg.eval_limit);
        };
        const size_t workers = std::max(1, cfg.jobs);
        std::vector<std::thread> threads;
        for (size_t t = 1; t < workers; ++t) threads.emplace_back(work);
        work();
        for (auto& t : threads) t.join();
      }
      run.tau = kendall_tau(run.inherited_acc, study.standalone_acc);
      run.pearson = pearson_r(run.inherited_acc, study.standalone_acc);
      run.spearman = spearman_rho(run.inherited_acc, study.standalone_acc);
      run.pools = distribution_stats(net);
      study.runs.push_back(std::move(run));
    }
  }
  return study;
}

void write_study_csv(const std::string& path, const RankingStudyResult& study) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open study csv: " + path);
  os << "mode,seed,tau,pearson,spearman\n";
  for (const auto& run : study.runs)
    os << sharing_mode_name(run.mode) << "," << run.seed << "," << run.tau << "," << run.pearson
       << "," << run.spearman << "\n";
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace sanas
