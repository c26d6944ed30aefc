#include "sanas/weightshare.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "sanas/errors.hpp"

namespace sanas {

size_t TransformKernel::dim_for(size_t pool_numel, size_t requested) {
  return std::max<size_t>(1, std::min(requested, pool_numel));
}

TransformKernel TransformKernel::identity(size_t pool_numel, size_t requested) {
  TransformKernel k;
  k.alphas = Tensor({dim_for(pool_numel, requested)}, 1.0);
  return k;
}

Tensor transform(const Tensor& w, const Tensor& alphas) {
  Tape tape;
  Tensor wc = w, ac = alphas;
  return tape.piecewise_scale_sorted(tape.constant(wc), tape.constant(ac)).value();
}

double nll_gaussian(const Tensor& w) {
  double s = 0.0;
  for (double v : w.data) s += 0.5 * std::log(2.0 * std::numbers::pi) + 0.5 * v * v;
  return s / static_cast<double>(w.numel());
}

double nll_laplacian(const Tensor& w) {
  double s = 0.0;
  for (double v : w.data) s += std::log(2.0) + std::abs(v);
  return s / static_cast<double>(w.numel());
}

Var supernet_loss(Tape& tape, Var logits, const std::vector<int>& labels,
                  const std::vector<PoolVars>& pools, const LossConfig& cfg) {
  if (cfg.kl_weight < 0.0) throw ContractError("kl_weight must be nonnegative");
  Var loss = tape.cross_entropy_mean(logits, labels);
  if (cfg.kl_weight == 0.0 || pools.empty()) return loss;
  Var kl;
  for (const PoolVars& p : pools) {
    Var term = tape.add(tape.nll_gaussian(p.weights),
                        tape.nll_laplacian(tape.piecewise_scale_sorted(p.weights, p.alphas)));
    kl = kl.ok() ? tape.add(kl, term) : term;
  }
  return tape.add(loss, tape.scale(kl, cfg.kl_weight));
}

GaussianFit fit_gaussian(const Tensor& w) {
  GaussianFit f;
  const double n = static_cast<double>(w.numel());
  for (double v : w.data) f.mean += v;
  f.mean /= n;
  double var = 0.0;
  for (double v : w.data) var += (v - f.mean) * (v - f.mean);
  f.stddev = std::sqrt(var / n);
  return f;
}

LaplacianFit fit_laplacian(const Tensor& w) {
  LaplacianFit f;
  std::vector<double> sorted = w.data;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  f.median = n % 2 == 1 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  for (double v : sorted) f.scale += std::abs(v - f.median);
  f.scale /= static_cast<double>(n);
  return f;
}

namespace {

double gaussian_cdf(double x, double mu, double sigma) {
  return 0.5 * std::erfc((mu - x) / (sigma * std::numbers::sqrt2));
}

double laplace_cdf(double x, double mu, double b) {
  const double z = (x - mu) / b;
  return z < 0.0 ? 0.5 * std::exp(z) : 1.0 - 0.5 * std::exp(-z);
}

}  // namespace

double kl_to_target(const Tensor& w, TargetFamily target, int bins, bool fit_scale) {
  if (w.numel() < 100)
    throw ContractError("kl_to_target needs at least 100 samples, got " +
                        std::to_string(w.numel()));
  if (bins < 16) throw ContractError("kl_to_target needs at least 16 bins");

  GaussianFit g = fit_gaussian(w);
  const double sd = std::max(g.stddev, 1e-12);
  const double lo = -6.0 * sd, hi = 6.0 * sd;
  const double width = (hi - lo) / bins;

  double mu = 0.0, scale = 1.0;
  if (fit_scale) {
    if (target == TargetFamily::Gaussian) {
      mu = g.mean;
      scale = sd;
    } else {
      LaplacianFit lf = fit_laplacian(w);
      mu = lf.median;
      scale = std::max(lf.scale, 1e-12);
    }
  }

  std::vector<uint64_t> counts(static_cast<size_t>(bins), 0);
  uint64_t total = 0;
  for (double v : w.data) {
    if (v < lo || v >= hi) continue;
    auto b = static_cast<size_t>((v - lo) / width);
    if (b >= static_cast<size_t>(bins)) b = static_cast<size_t>(bins) - 1;
    counts[b]++;
    total++;
  }

  std::vector<double> q(static_cast<size_t>(bins));
  double qsum = 0.0;
  for (int b = 0; b < bins; ++b) {
    const double l = lo + b * width, r = lo + (b + 1) * width;
    q[static_cast<size_t>(b)] = target == TargetFamily::Gaussian
                                    ? gaussian_cdf(r, mu, scale) - gaussian_cdf(l, mu, scale)
                                    : laplace_cdf(r, mu, scale) - laplace_cdf(l, mu, scale);
    qsum += q[static_cast<size_t>(b)];
  }

  // +1 smoothing on both sides keeps the estimator comparable across light
  // and heavy tails at small sample sizes
  double kl = 0.0;
  const double denom = static_cast<double>(total) + bins;
  for (int b = 0; b < bins; ++b) {
    const double p = (static_cast<double>(counts[static_cast<size_t>(b)]) + 1.0) / denom;
    const double qb =
        (static_cast<double>(total) * q[static_cast<size_t>(b)] / qsum + 1.0) / denom;
    kl += p * std::log(p / qb);
  }
  return std::max(kl, 0.0);
}

void fit_kernel_to_laplacian(const Tensor& pool_weights, Tensor& alphas, int steps,
                             double step_size, double scale) {
  const size_t n = pool_weights.numel();
  const size_t d = alphas.numel();
  if (d < 1 || d > n)
    throw ContractError("fit_kernel_to_laplacian: " + std::to_string(d) + " intervals for " +
                        std::to_string(n) + " weights");
  SortResult sr = sort_desc_with_permutation(pool_weights);
  const size_t s = n / d;

  // Laplace order targets at unit scale: descending sorted position j sits at
  // upper-tail probability (j + 0.5) / n.
  std::vector<double> unit_target(n);
  for (size_t j = 0; j < n; ++j) {
    const double p = 1.0 - (static_cast<double>(j) + 0.5) / static_cast<double>(n);
    unit_target[j] = p < 0.5 ? std::log(2.0 * p) : -std::log(2.0 * (1.0 - p));
  }

  // Per-interval damped least-squares toward alpha* = <target,w> / <w,w>.
  for (int step = 0; step < steps; ++step) {
    double lam = scale;
    if (lam <= 0.0) {
      double mean_abs = 0.0;
      for (size_t j = 0; j < n; ++j)
        mean_abs += std::abs(alphas.data[std::min(j / s, d - 1)] * sr.sorted.data[j]);
      lam = std::max(mean_abs / static_cast<double>(n), 1e-12);
    }
    for (size_t i = 0; i < d; ++i) {
      const size_t begin = i * s;
      const size_t end = i + 1 == d ? n : (i + 1) * s;
      double num = 0.0, den = 0.0;
      for (size_t j = begin; j < end; ++j) {
        num += lam * unit_target[j] * sr.sorted.data[j];
        den += sr.sorted.data[j] * sr.sorted.data[j];
      }
      if (den <= 0.0) continue;
      alphas.data[i] += step_size * (num / den - alphas.data[i]);
    }
  }
}

SharingArithmetic sharing_arithmetic(const std::vector<size_t>& pool_sizes, size_t kernel_dim) {
  SharingArithmetic a;
  for (size_t n : pool_sizes) {
    const size_t d = TransformKernel::dim_for(n, kernel_dim);
    a.pooled += n + d;
    a.unpooled += 3 * n;
    a.kernel_params += d;
  }
  return a;
}

}  // namespace sanas
