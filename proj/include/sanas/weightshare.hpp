#pragma once

#include <string>
#include <vector>

#include "sanas/autodiff.hpp"
#include "sanas/tensor.hpp"

namespace sanas {

// Piecewise-linear map over descending-sorted weights: interval i of length
// floor(n/d) (remainder absorbed by the last interval) is scaled by
// alphas[i], then the sort permutation is undone. alphas start at 1.0, the
// identity map.
struct TransformKernel {
  Tensor alphas;
  static constexpr size_t kDefaultDim = 200;
  static size_t dim_for(size_t pool_numel, size_t requested = kDefaultDim);
  static TransformKernel identity(size_t pool_numel, size_t requested = kDefaultDim);
};

// One weight tensor per macro-block position, shared by the Conv (direct),
// Shift (power-of-two quantized) and Add (kernel-transformed) candidates.
struct SharedWeightPool {
  std::string name;
  Tensor weights;
  TransformKernel kernel;
};

struct LossConfig {
  double kl_weight = 1.0;  // targets are fixed: standard normal / unit Laplacian
};

Tensor transform(const Tensor& w, const Tensor& alphas);
inline Tensor transform(const SharedWeightPool& pool) {
  return transform(pool.weights, pool.kernel.alphas);
}

double nll_gaussian(const Tensor& w);   // mean of ln(2*pi)/2 + w^2/2
double nll_laplacian(const Tensor& w);  // mean of ln(2) + |w|

struct PoolVars {
  Var weights;
  Var alphas;
};

// Cross-entropy over the batch plus, for every pool regardless of the
// sampled path, kl_weight * (gaussian distance of the raw weights +
// laplacian distance of the transformed weights).
Var supernet_loss(Tape& tape, Var logits, const std::vector<int>& labels,
                  const std::vector<PoolVars>& pools, const LossConfig& cfg);

enum class TargetFamily { Gaussian, Laplacian };

// Histogram estimate of D(empirical || target) over [-6*sd, 6*sd] with +1
// Laplace smoothing per bin. With fit_scale the target's location/scale are
// maximum-likelihood fitted first (shape test); otherwise the target is the
// standard member of the family. Diagnostic only, not differentiable.
double kl_to_target(const Tensor& w, TargetFamily target, int bins, bool fit_scale = false);

struct GaussianFit {
  double mean = 0.0, stddev = 0.0;
};
struct LaplacianFit {
  double median = 0.0, scale = 0.0;  // scale = mean absolute deviation
};
GaussianFit fit_gaussian(const Tensor& w);
LaplacianFit fit_laplacian(const Tensor& w);

// Fits the kernel so the transformed weights match Laplacian quantiles:
// damped per-interval least-squares steps on the sorted sample against
// Laplace(0, scale) order targets. scale <= 0 re-estimates the scale from
// the current output each step (shape-only fit). Weights stay frozen.
void fit_kernel_to_laplacian(const Tensor& pool_weights, Tensor& alphas, int steps,
                             double step_size = 0.05, double scale = 0.0);

// Storage accounting for one pooled position versus three private tensors.
struct SharingArithmetic {
  uint64_t pooled = 0;    // pool weights + kernel parameters
  uint64_t unpooled = 0;  // three independent tensors
  uint64_t kernel_params = 0;
  double reduction() const {
    return 1.0 - static_cast<double>(pooled) / static_cast<double>(unpooled);
  }
};
SharingArithmetic sharing_arithmetic(const std::vector<size_t>& pool_sizes,
                                     size_t kernel_dim = TransformKernel::kDefaultDim);

}  // namespace sanas
