#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "sanas/autodiff.hpp"
#include "sanas/tensor.hpp"

namespace sanas {

enum class BlockType : uint8_t { Conv = 0, Shift = 1, Add = 2, Attn = 3 };

char block_type_letter(BlockType t);
BlockType block_type_from_letter(char c);

struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;  // square
  int stride = 1;  // 1 or 2
  int padding() const { return kernel / 2; }
  Shape weight_shape() const {
    return {static_cast<size_t>(out_channels), static_cast<size_t>(in_channels),
            static_cast<size_t>(kernel), static_cast<size_t>(kernel)};
  }
};

struct AttnSpec {
  int embed_dim = 0;
  int num_heads = 1;
  Tensor wq, wk, wv, wo;  // all [d x d]
  int head_dim() const { return embed_dim / num_heads; }
};

// Sign/exponent factorization of a weight tensor: value = sign * 2^power.
// Magnitudes below 2^(kPowerMin-1) collapse to sign 0.
struct ShiftQuant {
  static constexpr int kPowerMin = -8;
  static constexpr int kPowerMax = 7;
  Shape shape;
  std::vector<int8_t> sign;   // -1 / 0 / +1
  std::vector<int8_t> power;  // clamped to [kPowerMin, kPowerMax]
  Tensor dequantize() const;  // exact in binary floating point
};

ShiftQuant quantize_pow2(const Tensor& w);

// Operation tally for one forward pass. `mult`, `add`, `shift` are totals;
// the overhead fields record the share contributed by plumbing around the
// operator core (normalization, residual projections, softmax, stems, head)
// so multiplication-free claims stay auditable.
struct OpCounts {
  uint64_t mult = 0, add = 0, shift = 0;
  uint64_t overhead_mult = 0, overhead_add = 0;
  void add_core(uint64_t m, uint64_t a, uint64_t s) {
    mult += m;
    add += a;
    shift += s;
  }
  void add_overhead(uint64_t m, uint64_t a) {
    mult += m;
    add += a;
    overhead_mult += m;
    overhead_add += a;
  }
  OpCounts& operator+=(const OpCounts& o) {
    mult += o.mult;
    add += o.add;
    shift += o.shift;
    overhead_mult += o.overhead_mult;
    overhead_add += o.overhead_add;
    return *this;
  }
  bool operator==(const OpCounts&) const = default;
};

struct BlockOutput {
  Tensor activations;
  OpCounts counts;
};

// Core-operator counts, deterministic in spec + input shape. One MAC is
// 1 mult + 1 add for Conv/Attn, 1 shift + 1 add for Shift, 2 adds for Add.
OpCounts conv_core_counts(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c, size_t k);
OpCounts shift_core_counts(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c, size_t k);
OpCounts add_core_counts(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c, size_t k);
// Projections, score/value matmuls, two-layer MLP (hidden 2d) and the
// depthwise position encoding; softmax/scaling are counted as overhead.
OpCounts attn_core_counts(size_t n, size_t tokens, size_t d, size_t heads);

OpCounts bn_overhead(size_t n, size_t c, size_t h, size_t w);
OpCounts softmax_scale_overhead(size_t n, size_t tokens, size_t heads);
OpCounts residual_proj_overhead(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c);
OpCounts residual_add_overhead(size_t n, size_t c, size_t h, size_t w);
OpCounts stem_overhead(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c);
OpCounts head_overhead(size_t n, size_t c, size_t h, size_t w, size_t classes);

// Bare operator forwards (no normalization, no residual).
BlockOutput conv_forward(const Tensor& x, const ConvSpec& spec, const Tensor& w);
BlockOutput attn_forward(const Tensor& x, const AttnSpec& spec);
BlockOutput shift_forward(const Tensor& x, const ConvSpec& spec, const ShiftQuant& q);
BlockOutput add_forward(const Tensor& x, const ConvSpec& spec, const Tensor& w);

// Normalization state for one block choice.
struct BnState {
  Tensor gamma, beta, running_mean, running_var;
  explicit BnState(size_t channels = 1)
      : gamma({channels}, 1.0), beta({channels}, 0.0), running_mean({channels}, 0.0),
        running_var({channels}, 1.0) {}
};

// Attention block parameters for image inputs: an optional 1x1 stem maps the
// input to the block's output shape before tokenization; `pos_dw` is the
// depthwise position encoding; the MLP hidden width is 2d.
struct AttnBlockParams {
  int heads = 4;
  std::optional<Tensor> stem;  // [d, in_c, 1, 1], stride = block stride
  Tensor pos_dw;               // [d, 3, 3]
  Tensor wq, wk, wv, wo;       // [d x d]
  Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

// Tape-level building blocks. Weight views are passed as tape variables so a
// caller may route them through quantization or a transformation first.
struct ConvBlockVars {
  Var weights;                            // conv/shift/add weight view
  const Tensor* forward_weights = nullptr;  // shift: quantized values, straight-through grads
  Var gamma, beta;
  Tensor* running_mean = nullptr;
  Tensor* running_var = nullptr;
  std::optional<Var> res_proj;
};

struct AttnBlockVars {
  int heads = 4;
  std::optional<Var> stem;
  Var pos_dw;
  Var wq, wk, wv, wo;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  std::optional<Var> res_proj;
};

// Operator core + BN + ReLU + residual for Conv/Shift/Add.
Var conv_like_block(Tape& tape, Var x, BlockType type, const ConvBlockVars& vars,
                    const ConvSpec& spec, bool training, OpCounts* counts);
// Stem (when shapes change), position encoding, tokenized attention, MLP,
// residual for Attn.
Var attn_block(Tape& tape, Var x, const AttnBlockVars& vars, const ConvSpec& spec,
               OpCounts* counts);

// Full candidate block over plain tensors. Shift quantizes `weights` on the
// fly; gradients are not part of this convenience API (use the tape path).
struct BlockParams {
  BlockType type = BlockType::Conv;
  ConvSpec conv;                     // geometry for every type
  Tensor* weights = nullptr;         // conv/shift/add (shift: full-precision master)
  BnState* bn = nullptr;             // conv/shift/add
  AttnBlockParams* attn = nullptr;   // attn
  Tensor* res_proj = nullptr;        // [out_c, in_c, 1, 1] when shapes change
};

BlockOutput block_forward(const Tensor& x, const BlockParams& params, bool training);

}  // namespace sanas
