#pragma once

#include <string>
#include <vector>

#include "sanas/operators.hpp"
#include "sanas/supernet.hpp"

namespace sanas {

// Relative per-primitive costs, mult = 1.0. Built-in profiles carry the
// published energy ratios for 45nm CMOS and FPGA implementations at 32-bit
// fixed/floating point; latencies default proportional to energy.
struct CostTable {
  std::string name;
  double e_mult = 1.0, e_add = 1.0, e_shift = 1.0;
  double l_mult = 1.0, l_add = 1.0, l_shift = 1.0;

  void validate() const;  // positive entries, add/shift no costlier than mult
  static CostTable builtin(const std::string& name);
  static std::vector<std::string> builtin_names();
};

// Per-inference tally (batch of one). num_* are totals; the overhead fields
// break out normalization, residual projections, softmax, stems and the
// classifier head so multiplication-free claims stay auditable.
struct CostReport {
  uint64_t num_mult = 0, num_add = 0, num_shift = 0;
  uint64_t overhead_mult = 0, overhead_add = 0;
  uint64_t params = 0;
  uint64_t total_ops() const { return num_mult + num_add + num_shift; }
};

// Symbolic tally of one subnet: per-slot block counts plus the head, no data
// needed. Parameter count covers the standalone model's learnable tensors.
CostReport count_ops(const ArchGene& gene, const SearchSpace& space);

double energy(const CostReport& report, const CostTable& table);
double latency_linear(const CostReport& report, const CostTable& table);

// flops * (bits/32)^2; bits must lie in [1, 32].
double effective_flops(double flops, int bits);

// Linear latency with a multiplicative lognormal disturbance; stands in for
// hardware measurement when fitting the latency predictor.
double synthetic_latency(const CostReport& report, const CostTable& table, Rng& rng,
                         double noise_sigma);

}  // namespace sanas
