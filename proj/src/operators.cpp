#include "sanas/operators.hpp"

#include <cmath>

#include "sanas/errors.hpp"

namespace sanas {

char block_type_letter(BlockType t) {
  switch (t) {
    case BlockType::Conv: return 'C';
    case BlockType::Shift: return 'S';
    case BlockType::Add: return 'A';
    case BlockType::Attn: return 'T';
  }
  throw ConfigError("unknown block type " + std::to_string(static_cast<int>(t)));
}

BlockType block_type_from_letter(char c) {
  switch (c) {
    case 'C': return BlockType::Conv;
    case 'S': return BlockType::Shift;
    case 'A': return BlockType::Add;
    case 'T': return BlockType::Attn;
    default: throw ValidationError(std::string("unknown block type letter '") + c + "'");
  }
}

Tensor ShiftQuant::dequantize() const {
  Tensor out{shape};
  for (size_t i = 0; i < out.numel(); ++i)
    out.data[i] = sign[i] == 0 ? 0.0 : static_cast<double>(sign[i]) * std::ldexp(1.0, power[i]);
  return out;
}

ShiftQuant quantize_pow2(const Tensor& w) {
  ShiftQuant q;
  q.shape = w.shape;
  q.sign.resize(w.numel());
  q.power.resize(w.numel());
  const double zero_threshold = std::ldexp(1.0, ShiftQuant::kPowerMin - 1);
  for (size_t i = 0; i < w.numel(); ++i) {
    const double v = w.data[i];
    const double mag = std::abs(v);
    if (mag < zero_threshold) {
      q.sign[i] = 0;
      q.power[i] = 0;
      continue;
    }
    q.sign[i] = v > 0.0 ? 1 : -1;
    // round half to even in the log domain
    double p = std::nearbyint(std::log2(mag));
    p = std::min(std::max(p, static_cast<double>(ShiftQuant::kPowerMin)),
                 static_cast<double>(ShiftQuant::kPowerMax));
    q.power[i] = static_cast<int8_t>(p);
  }
  return q;
}

OpCounts conv_core_counts(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c, size_t k) {
  OpCounts c;
  const uint64_t macs = static_cast<uint64_t>(n) * out_c * out_h * out_w * in_c * k * k;
  c.add_core(macs, macs, 0);
  return c;
}

OpCounts shift_core_counts(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c, size_t k) {
  OpCounts c;
  const uint64_t macs = static_cast<uint64_t>(n) * out_c * out_h * out_w * in_c * k * k;
  c.add_core(0, macs, macs);
  return c;
}

OpCounts add_core_counts(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c, size_t k) {
  OpCounts c;
  const uint64_t macs = static_cast<uint64_t>(n) * out_c * out_h * out_w * in_c * k * k;
  c.add_core(0, 2 * macs, 0);  // one subtract + one accumulate per tap
  return c;
}

OpCounts attn_core_counts(size_t n, size_t tokens, size_t d, size_t heads) {
  OpCounts c;
  const uint64_t nt = static_cast<uint64_t>(n) * tokens;
  const uint64_t proj = 4 * nt * d * d;                                         // q,k,v,o
  const uint64_t scores = 2 * static_cast<uint64_t>(n) * tokens * tokens * d;   // QK^T and AV
  const uint64_t mlp = 4 * nt * d * d;                                          // d->2d, 2d->d
  const uint64_t pos = 9 * nt * d;                                              // depthwise 3x3
  c.add_core(proj + scores + mlp + pos, proj + scores + mlp + pos, 0);
  c.add += 3 * nt * d;  // MLP bias adds
  (void)heads;          // head split does not change the MAC total
  return c;
}

OpCounts bn_overhead(size_t n, size_t c, size_t h, size_t w) {
  OpCounts o;
  const uint64_t elems = static_cast<uint64_t>(n) * c * h * w;
  o.add_overhead(elems, elems);  // affine normalization per element
  return o;
}

OpCounts softmax_scale_overhead(size_t n, size_t tokens, size_t heads) {
  OpCounts o;
  const uint64_t cells = static_cast<uint64_t>(n) * heads * tokens * tokens;
  // exp + divide + score scaling as mult-class ops; max-subtract and row sums
  o.add_overhead(3 * cells, 2 * cells - static_cast<uint64_t>(n) * heads * tokens);
  return o;
}

OpCounts residual_proj_overhead(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c) {
  OpCounts o;
  const uint64_t macs = static_cast<uint64_t>(n) * out_c * out_h * out_w * in_c;
  o.add_overhead(macs, macs);
  return o;
}

OpCounts residual_add_overhead(size_t n, size_t c, size_t h, size_t w) {
  OpCounts o;
  o.add_overhead(0, static_cast<uint64_t>(n) * c * h * w);
  return o;
}

OpCounts stem_overhead(size_t n, size_t out_c, size_t out_h, size_t out_w, size_t in_c) {
  return residual_proj_overhead(n, out_c, out_h, out_w, in_c);
}

OpCounts head_overhead(size_t n, size_t c, size_t h, size_t w, size_t classes) {
  OpCounts o;
  const uint64_t pool_adds = static_cast<uint64_t>(n) * c * h * w;
  const uint64_t pool_divs = static_cast<uint64_t>(n) * c;
  const uint64_t fc = static_cast<uint64_t>(n) * c * classes;
  o.add_overhead(pool_divs + fc, pool_adds + fc + static_cast<uint64_t>(n) * classes);
  return o;
}

namespace {

void check_conv_input(const Tensor& x, const ConvSpec& spec, const char* op) {
  if (x.rank() != 4)
    throw DimensionError(std::string(op) + ": expected [N,C,H,W], got " + shape_str(x.shape));
  if (x.dim(1) != static_cast<size_t>(spec.in_channels))
    throw DimensionError(std::string(op) + ": input has " + std::to_string(x.dim(1)) +
                         " channels, spec expects " + std::to_string(spec.in_channels));
}

size_t conv_out_dim(size_t in, int k, int stride, int pad) {
  return (in + 2 * static_cast<size_t>(pad) - static_cast<size_t>(k)) /
             static_cast<size_t>(stride) +
         1;
}

}  // namespace

BlockOutput conv_forward(const Tensor& x, const ConvSpec& spec, const Tensor& w) {
  check_conv_input(x, spec, "conv_forward");
  if (w.shape != spec.weight_shape())
    throw DimensionError("conv_forward: weight " + shape_str(w.shape) + " vs spec " +
                         shape_str(spec.weight_shape()));
  Tape tape;
  Var out = tape.conv2d(tape.constant(x), tape.constant(w), spec.stride, spec.padding());
  BlockOutput r;
  r.activations = out.value();
  r.counts = conv_core_counts(x.dim(0), r.activations.dim(1), r.activations.dim(2),
                              r.activations.dim(3), x.dim(1), static_cast<size_t>(spec.kernel));
  return r;
}

BlockOutput attn_forward(const Tensor& x, const AttnSpec& spec) {
  if (x.rank() != 3)
    throw DimensionError("attn_forward: expected [N,n,d], got " + shape_str(x.shape));
  if (x.dim(2) != static_cast<size_t>(spec.embed_dim))
    throw DimensionError("attn_forward: token dim " + std::to_string(x.dim(2)) +
                         " vs embed dim " + std::to_string(spec.embed_dim));
  if (spec.num_heads <= 0 || spec.embed_dim % spec.num_heads != 0)
    throw ConfigError("attn_forward: embed dim " + std::to_string(spec.embed_dim) +
                      " not divisible by " + std::to_string(spec.num_heads) + " heads");
  Tape tape;
  Var out = tape.mhsa(tape.constant(x), tape.constant(spec.wq), tape.constant(spec.wk),
                      tape.constant(spec.wv), tape.constant(spec.wo), spec.num_heads);
  BlockOutput r;
  r.activations = out.value();
  const size_t n = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  const uint64_t proj = 4ull * n * tokens * d * d;
  const uint64_t scores = 2ull * n * tokens * tokens * d;
  r.counts.add_core(proj + scores, proj + scores, 0);
  r.counts += softmax_scale_overhead(n, tokens, static_cast<size_t>(spec.num_heads));
  return r;
}

BlockOutput shift_forward(const Tensor& x, const ConvSpec& spec, const ShiftQuant& q) {
  if (q.shape != spec.weight_shape())
    throw DimensionError("shift_forward: quantized weights " + shape_str(q.shape) + " vs spec " +
                         shape_str(spec.weight_shape()));
  // Power-of-two scaling is exact, so the reference path simply multiplies
  // by the reconstructed values.
  BlockOutput r = conv_forward(x, spec, q.dequantize());
  OpCounts c;
  c.add_core(0, r.counts.add, r.counts.mult);
  r.counts = c;
  return r;
}

BlockOutput add_forward(const Tensor& x, const ConvSpec& spec, const Tensor& w) {
  check_conv_input(x, spec, "add_forward");
  if (w.shape != spec.weight_shape())
    throw DimensionError("add_forward: weight " + shape_str(w.shape) + " vs spec " +
                         shape_str(spec.weight_shape()));
  Tape tape;
  Var out = tape.adder2d(tape.constant(x), tape.constant(w), spec.stride, spec.padding());
  BlockOutput r;
  r.activations = out.value();
  r.counts = add_core_counts(x.dim(0), r.activations.dim(1), r.activations.dim(2),
                             r.activations.dim(3), x.dim(1), static_cast<size_t>(spec.kernel));
  return r;
}

namespace {

Var residual_join(Tape& tape, Var x, Var path, const std::optional<Var>& res_proj,
                  const ConvSpec& spec, size_t n, size_t out_c, size_t out_h, size_t out_w,
                  OpCounts* tally) {
  const Tensor& tx = x.value();
  const bool shape_change =
      spec.stride != 1 || tx.dim(1) != out_c || tx.dim(2) != out_h || tx.dim(3) != out_w;
  Var residual = x;
  if (shape_change) {
    if (!res_proj.has_value())
      throw ConfigError("block changes shape but has no residual projection");
    residual = tape.conv2d(x, *res_proj, spec.stride, 0);
    if (tally) *tally += residual_proj_overhead(n, out_c, out_h, out_w, tx.dim(1));
  }
  if (tally) *tally += residual_add_overhead(n, out_c, out_h, out_w);
  return tape.add(path, residual);
}

}  // namespace

Var conv_like_block(Tape& tape, Var x, BlockType type, const ConvBlockVars& vars,
                    const ConvSpec& spec, bool training, OpCounts* counts) {
  const Tensor& tx = x.value();
  check_conv_input(tx, spec, "conv_like_block");
  const size_t n = tx.dim(0);
  const size_t out_c = static_cast<size_t>(spec.out_channels);
  const size_t out_h = conv_out_dim(tx.dim(2), spec.kernel, spec.stride, spec.padding());
  const size_t out_w = conv_out_dim(tx.dim(3), spec.kernel, spec.stride, spec.padding());
  OpCounts tally;

  Var pre;
  switch (type) {
    case BlockType::Conv:
      pre = tape.conv2d(x, vars.weights, spec.stride, spec.padding());
      tally += conv_core_counts(n, out_c, out_h, out_w, tx.dim(1),
                                static_cast<size_t>(spec.kernel));
      break;
    case BlockType::Shift:
      if (!vars.forward_weights)
        throw ConfigError("shift block needs quantized forward weights");
      pre = tape.conv2d_frozen(x, vars.weights, *vars.forward_weights, spec.stride,
                               spec.padding());
      tally += shift_core_counts(n, out_c, out_h, out_w, tx.dim(1),
                                 static_cast<size_t>(spec.kernel));
      break;
    case BlockType::Add:
      pre = tape.adder2d(x, vars.weights, spec.stride, spec.padding());
      tally += add_core_counts(n, out_c, out_h, out_w, tx.dim(1),
                               static_cast<size_t>(spec.kernel));
      break;
    default:
      throw ConfigError("conv_like_block cannot build an attention block");
  }
  Var path = tape.relu(tape.batchnorm2d(pre, vars.gamma, vars.beta, *vars.running_mean,
                                        *vars.running_var, training));
  tally += bn_overhead(n, out_c, out_h, out_w);
  Var out = residual_join(tape, x, path, vars.res_proj, spec, n, out_c, out_h, out_w, &tally);
  if (counts) *counts += tally;
  return out;
}

Var attn_block(Tape& tape, Var x, const AttnBlockVars& vars, const ConvSpec& spec,
               OpCounts* counts) {
  const Tensor& tx = x.value();
  check_conv_input(tx, spec, "attn_block");
  const size_t n = tx.dim(0);
  const size_t out_c = static_cast<size_t>(spec.out_channels);
  const size_t out_h = conv_out_dim(tx.dim(2), spec.kernel, spec.stride, spec.padding());
  const size_t out_w = conv_out_dim(tx.dim(3), spec.kernel, spec.stride, spec.padding());
  OpCounts tally;

  Var feat = x;
  if (vars.stem.has_value()) {
    feat = tape.conv2d(x, *vars.stem, spec.stride, 0);
    tally += stem_overhead(n, out_c, out_h, out_w, tx.dim(1));
  } else if (spec.stride != 1 || tx.dim(1) != out_c) {
    throw ConfigError("attn block changes shape but has no stem");
  }
  // position encoding: x + depthwise(x), then flatten to tokens
  feat = tape.add(feat, tape.depthwise3x3(feat, vars.pos_dw));
  tally += residual_add_overhead(n, out_c, out_h, out_w);
  const size_t tokens = out_h * out_w;
  Var t = tape.nchw_to_tokens(feat);
  Var attn = tape.mhsa(t, vars.wq, vars.wk, vars.wv, vars.wo, vars.heads);
  Var flat = tape.reshape(attn, {n * tokens, out_c});
  Var hidden = tape.relu(tape.add_bias(tape.matmul(flat, vars.mlp_w1), vars.mlp_b1));
  Var mlp = tape.add_bias(tape.matmul(hidden, vars.mlp_w2), vars.mlp_b2);
  Var path = tape.tokens_to_nchw(tape.reshape(mlp, {n, tokens, out_c}), out_h, out_w);
  tally += attn_core_counts(n, tokens, out_c, static_cast<size_t>(vars.heads));
  tally += softmax_scale_overhead(n, tokens, static_cast<size_t>(vars.heads));

  Var out = residual_join(tape, x, path, vars.res_proj, spec, n, out_c, out_h, out_w, &tally);
  if (counts) *counts += tally;
  return out;
}

BlockOutput block_forward(const Tensor& x, const BlockParams& params, bool training) {
  Tape tape;
  BlockOutput r;
  Var xv = tape.constant(x);
  std::optional<Var> res_proj;
  if (params.res_proj) res_proj = tape.constant(*params.res_proj);

  Var out;
  if (params.type == BlockType::Attn) {
    if (!params.attn) throw ConfigError("attn block missing parameters");
    AttnBlockVars vars;
    vars.heads = params.attn->heads;
    if (params.attn->stem.has_value()) vars.stem = tape.constant(*params.attn->stem);
    vars.pos_dw = tape.constant(params.attn->pos_dw);
    vars.wq = tape.constant(params.attn->wq);
    vars.wk = tape.constant(params.attn->wk);
    vars.wv = tape.constant(params.attn->wv);
    vars.wo = tape.constant(params.attn->wo);
    vars.mlp_w1 = tape.constant(params.attn->mlp_w1);
    vars.mlp_b1 = tape.constant(params.attn->mlp_b1);
    vars.mlp_w2 = tape.constant(params.attn->mlp_w2);
    vars.mlp_b2 = tape.constant(params.attn->mlp_b2);
    vars.res_proj = res_proj;
    out = attn_block(tape, xv, vars, params.conv, &r.counts);
  } else {
    if (!params.weights || !params.bn) throw ConfigError("block missing weights or normalization");
    ConvBlockVars vars;
    vars.weights = tape.constant(*params.weights);
    Tensor quantized;
    if (params.type == BlockType::Shift) {
      quantized = quantize_pow2(*params.weights).dequantize();
      vars.forward_weights = &quantized;
    }
    vars.gamma = tape.constant(params.bn->gamma);
    vars.beta = tape.constant(params.bn->beta);
    vars.running_mean = &params.bn->running_mean;
    vars.running_var = &params.bn->running_var;
    vars.res_proj = res_proj;
    out = conv_like_block(tape, xv, params.type, vars, params.conv, training, &r.counts);
  }
  r.activations = out.value();
  return r;
}

}  // namespace sanas
