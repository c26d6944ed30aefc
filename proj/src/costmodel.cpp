#include "sanas/costmodel.hpp"

#include <cmath>

#include "sanas/errors.hpp"

namespace sanas {

void CostTable::validate() const {
  for (double v : {e_mult, e_add, e_shift, l_mult, l_add, l_shift})
    if (!(v > 0.0)) throw ConfigError("cost table '" + name + "' has a non-positive entry");
  if (e_add > e_mult || e_shift > e_mult)
    throw ConfigError("cost table '" + name + "' prices add/shift above mult");
}

CostTable CostTable::builtin(const std::string& name) {
  CostTable t;
  t.name = name;
  if (name == "45nm-FIX32") {
    t.e_add = 1.0 / 196.0;
    t.e_shift = 1.0 / 196.0;
  } else if (name == "45nm-FP32") {
    t.e_add = 1.0 / 47.0;
    t.e_shift = 1.0 / 196.0;
  } else if (name == "FPGA-FIX32") {
    t.e_add = 1.0 / 31.0;
    t.e_shift = 1.0 / 24.0;
  } else if (name == "FPGA-FP32") {
    t.e_add = 1.0 / 4.1;
    t.e_shift = 1.0 / 24.0;
  } else {
    throw ConfigError("unknown cost profile '" + name + "'");
  }
  t.l_mult = t.e_mult;
  t.l_add = t.e_add;
  t.l_shift = t.e_shift;
  t.validate();
  return t;
}

std::vector<std::string> CostTable::builtin_names() {
  return {"45nm-FIX32", "45nm-FP32", "FPGA-FIX32", "FPGA-FP32"};
}

CostReport count_ops(const ArchGene& gene, const SearchSpace& space) {
  validate_gene(gene, space);
  OpCounts total;
  uint64_t params = 0;
  for (size_t i = 0; i < space.slots.size(); ++i) {
    if (!gene.slots[i].active) continue;
    const SearchSpace::Slot& sp = space.slots[i];
    const size_t in_c = static_cast<size_t>(sp.in_channels);
    const size_t out_c = static_cast<size_t>(sp.out_channels);
    const size_t out_r = static_cast<size_t>(sp.out_resolution);
    const bool shape_change = sp.changes_shape();

    switch (gene.slots[i].type) {
      case BlockType::Conv:
        total += conv_core_counts(1, out_c, out_r, out_r, in_c, 3);
        total += bn_overhead(1, out_c, out_r, out_r);
        params += out_c * in_c * 9 + 2 * out_c;
        break;
      case BlockType::Shift:
        total += shift_core_counts(1, out_c, out_r, out_r, in_c, 3);
        total += bn_overhead(1, out_c, out_r, out_r);
        params += out_c * in_c * 9 + 2 * out_c;
        break;
      case BlockType::Add:
        total += add_core_counts(1, out_c, out_r, out_r, in_c, 3);
        total += bn_overhead(1, out_c, out_r, out_r);
        params += out_c * in_c * 9 + 2 * out_c;
        break;
      case BlockType::Attn: {
        const size_t tokens = out_r * out_r;
        total += attn_core_counts(1, tokens, out_c, static_cast<size_t>(space.attn_heads));
        total += softmax_scale_overhead(1, tokens, static_cast<size_t>(space.attn_heads));
        total += residual_add_overhead(1, out_c, out_r, out_r);  // position encoding add
        if (shape_change) {
          total += stem_overhead(1, out_c, out_r, out_r, in_c);
          params += out_c * in_c;
        }
        params += 9 * out_c;                 // depthwise position encoding
        params += 4 * out_c * out_c;         // q,k,v,o projections
        params += 4 * out_c * out_c + 3 * out_c;  // MLP weights and biases
        break;
      }
    }
    if (shape_change) {
      total += residual_proj_overhead(1, out_c, out_r, out_r, in_c);
      params += out_c * in_c;
    }
    total += residual_add_overhead(1, out_c, out_r, out_r);
  }

  const size_t last_c = static_cast<size_t>(space.stages.back().channels);
  const size_t last_r = static_cast<size_t>(space.stages.back().resolution);
  const size_t classes = static_cast<size_t>(space.num_classes);
  total += head_overhead(1, last_c, last_r, last_r, classes);
  params += last_c * classes + classes;

  CostReport r;
  r.num_mult = total.mult;
  r.num_add = total.add;
  r.num_shift = total.shift;
  r.overhead_mult = total.overhead_mult;
  r.overhead_add = total.overhead_add;
  r.params = params;
  return r;
}

double energy(const CostReport& report, const CostTable& table) {
  table.validate();
  return static_cast<double>(report.num_mult) * table.e_mult +
         static_cast<double>(report.num_add) * table.e_add +
         static_cast<double>(report.num_shift) * table.e_shift;
}

double latency_linear(const CostReport& report, const CostTable& table) {
  table.validate();
  return static_cast<double>(report.num_mult) * table.l_mult +
         static_cast<double>(report.num_add) * table.l_add +
         static_cast<double>(report.num_shift) * table.l_shift;
}

double effective_flops(double flops, int bits) {
  if (bits < 1 || bits > 32)
    throw ContractError("effective_flops: bits " + std::to_string(bits) + " outside [1,32]");
  const double ratio = static_cast<double>(bits) / 32.0;
  return flops * ratio * ratio;
}

double synthetic_latency(const CostReport& report, const CostTable& table, Rng& rng,
                         double noise_sigma) {
  if (noise_sigma < 0.0) throw ContractError("noise_sigma must be nonnegative");
  const double base = latency_linear(report, table);
  if (noise_sigma == 0.0) return base;
  return base * std::exp(noise_sigma * rng.gaussian());
}

}  // namespace sanas
