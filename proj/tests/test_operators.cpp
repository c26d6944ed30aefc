#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "sanas/errors.hpp"
#include "sanas/operators.hpp"

using namespace sanas;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t{std::move(shape)};
  for (double& v : t.data) v = scale * rng.gaussian();
  return t;
}

// Direct six-nested-loop cross-correlation with zero padding.
Tensor conv_oracle(const Tensor& x, const Tensor& w, int stride, int pad) {
  const size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const size_t cout = w.dim(0), k = w.dim(2);
  const size_t oh = (h + 2 * pad - k) / stride + 1;
  const size_t ow = (ww + 2 * pad - k) / stride + 1;
  Tensor out({n, cout, oh, ow});
  for (size_t b = 0; b < n; ++b)
    for (size_t oc = 0; oc < cout; ++oc)
      for (size_t y = 0; y < oh; ++y)
        for (size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (size_t ic = 0; ic < cin; ++ic)
            for (size_t i = 0; i < k; ++i)
              for (size_t j = 0; j < k; ++j) {
                const long iy = static_cast<long>(y * stride + i) - pad;
                const long ix = static_cast<long>(xo * stride + j) - pad;
                if (iy < 0 || iy >= static_cast<long>(h) || ix < 0 || ix >= static_cast<long>(ww))
                  continue;
                acc += x.data[((b * cin + ic) * h + iy) * ww + ix] *
                       w.data[((oc * cin + ic) * k + i) * k + j];
              }
          out.data[((b * cout + oc) * oh + y) * ow + xo] = acc;
        }
  return out;
}

// Negated L1 patch distance with zero padding counted in the distance.
Tensor adder_oracle(const Tensor& x, const Tensor& w, int stride, int pad) {
  const size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const size_t cout = w.dim(0), k = w.dim(2);
  const size_t oh = (h + 2 * pad - k) / stride + 1;
  const size_t ow = (ww + 2 * pad - k) / stride + 1;
  Tensor out({n, cout, oh, ow});
  for (size_t b = 0; b < n; ++b)
    for (size_t oc = 0; oc < cout; ++oc)
      for (size_t y = 0; y < oh; ++y)
        for (size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (size_t ic = 0; ic < cin; ++ic)
            for (size_t i = 0; i < k; ++i)
              for (size_t j = 0; j < k; ++j) {
                const long iy = static_cast<long>(y * stride + i) - pad;
                const long ix = static_cast<long>(xo * stride + j) - pad;
                double xv = 0.0;
                if (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(ww))
                  xv = x.data[((b * cin + ic) * h + iy) * ww + ix];
                acc += std::abs(xv - w.data[((oc * cin + ic) * k + i) * k + j]);
              }
          out.data[((b * cout + oc) * oh + y) * ow + xo] = -acc;
        }
  return out;
}

// Straightforward per-head attention oracle.
Tensor attn_oracle(const Tensor& x, const AttnSpec& spec) {
  const size_t n = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  const size_t heads = spec.num_heads, dk = d / heads;
  auto matmul = [](const std::vector<double>& a, const std::vector<double>& b, size_t m, size_t k,
                   size_t p) {
    std::vector<double> c(m * p, 0.0);
    for (size_t i = 0; i < m; ++i)
      for (size_t kk = 0; kk < k; ++kk)
        for (size_t j = 0; j < p; ++j) c[i * p + j] += a[i * k + kk] * b[kk * p + j];
    return c;
  };
  Tensor out({n, tokens, d});
  for (size_t b = 0; b < n; ++b) {
    std::vector<double> xb(x.data.begin() + b * tokens * d, x.data.begin() + (b + 1) * tokens * d);
    auto q = matmul(xb, spec.wq.data, tokens, d, d);
    auto k = matmul(xb, spec.wk.data, tokens, d, d);
    auto v = matmul(xb, spec.wv.data, tokens, d, d);
    std::vector<double> concat(tokens * d, 0.0);
    for (size_t hd = 0; hd < heads; ++hd) {
      for (size_t r = 0; r < tokens; ++r) {
        std::vector<double> scores(tokens);
        for (size_t c = 0; c < tokens; ++c) {
          double dot = 0.0;
          for (size_t p = 0; p < dk; ++p) dot += q[r * d + hd * dk + p] * k[c * d + hd * dk + p];
          scores[c] = dot / std::sqrt(static_cast<double>(dk));
        }
        double mx = scores[0];
        for (double s : scores) mx = std::max(mx, s);
        double total = 0.0;
        for (double& s : scores) {
          s = std::exp(s - mx);
          total += s;
        }
        for (size_t c = 0; c < tokens; ++c)
          for (size_t p = 0; p < dk; ++p)
            concat[r * d + hd * dk + p] += scores[c] / total * v[c * d + hd * dk + p];
      }
    }
    auto y = matmul(concat, spec.wo.data, tokens, d, d);
    std::copy(y.begin(), y.end(), out.data.begin() + b * tokens * d);
  }
  return out;
}

}  // namespace

TEST_CASE("conv: 1x1 scalar case and counts") {
  Tensor x({1, 1, 1, 1}, {2.0});
  Tensor w({1, 1, 1, 1}, {3.0});
  ConvSpec spec{1, 1, 1, 1};
  BlockOutput out = conv_forward(x, spec, w);
  CHECK(out.activations.data[0] == 6.0);
  CHECK(out.counts.mult == 1);
  CHECK(out.counts.add == 1);
  CHECK(out.counts.shift == 0);
}

TEST_CASE("conv: delta kernel reproduces the input") {
  Rng rng(5);
  Tensor x = random_tensor({1, 1, 4, 4}, rng);
  Tensor w({1, 1, 3, 3}, 0.0);
  w.data[4] = 1.0;  // center tap
  ConvSpec spec{1, 1, 3, 1};
  BlockOutput out = conv_forward(x, spec, w);
  CHECK(out.activations.data == x.data);
}

TEST_CASE("conv matches nested-loop oracle on random instances") {
  Rng rng(77);
  for (int inst = 0; inst < 100; ++inst) {
    const int stride = inst % 2 == 0 ? 1 : 2;
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.5);
    ConvSpec spec{2, 3, 3, stride};
    BlockOutput out = conv_forward(x, spec, w);
    Tensor expect = conv_oracle(x, w, stride, 1);
    REQUIRE(out.activations.shape == expect.shape);
    for (size_t i = 0; i < expect.numel(); ++i)
      CHECK(std::abs(out.activations.data[i] - expect.data[i]) < 1e-12);
  }
}

TEST_CASE("conv shape mismatch is a dimension error") {
  Tensor x({1, 2, 4, 4});
  Tensor w({3, 3, 3, 3});
  ConvSpec spec{2, 3, 3, 1};
  CHECK_THROWS_AS(conv_forward(x, spec, w), DimensionError);
}

TEST_CASE("attention: single token softmax collapses to value path") {
  Rng rng(9);
  const size_t d = 4;
  AttnSpec spec;
  spec.embed_dim = d;
  spec.num_heads = 2;
  spec.wq = random_tensor({d, d}, rng);
  spec.wk = random_tensor({d, d}, rng);
  spec.wv = random_tensor({d, d}, rng);
  spec.wo = random_tensor({d, d}, rng);
  Tensor x = random_tensor({1, 1, d}, rng);
  BlockOutput out = attn_forward(x, spec);
  // softmax over one logit is 1, so output = (x Wv) Wo regardless of Wq/Wk
  Tape tape;
  Tensor x2({1, d}, std::vector<double>(x.data));
  Var expect = tape.matmul(tape.matmul(tape.constant(x2), tape.constant(spec.wv)),
                           tape.constant(spec.wo));
  for (size_t i = 0; i < d; ++i)
    CHECK(std::abs(out.activations.data[i] - expect.value().data[i]) < 1e-12);
}

TEST_CASE("attention: zero input gives zero output") {
  Rng rng(10);
  AttnSpec spec;
  spec.embed_dim = 4;
  spec.num_heads = 2;
  spec.wq = random_tensor({4, 4}, rng);
  spec.wk = random_tensor({4, 4}, rng);
  spec.wv = random_tensor({4, 4}, rng);
  spec.wo = random_tensor({4, 4}, rng);
  Tensor x({2, 3, 4}, 0.0);
  BlockOutput out = attn_forward(x, spec);
  for (double v : out.activations.data) CHECK(v == 0.0);
}

TEST_CASE("attention matches per-head oracle on random instances") {
  Rng rng(123);
  for (int inst = 0; inst < 100; ++inst) {
    AttnSpec spec;
    spec.embed_dim = 4;
    spec.num_heads = 2;
    spec.wq = random_tensor({4, 4}, rng);
    spec.wk = random_tensor({4, 4}, rng);
    spec.wv = random_tensor({4, 4}, rng);
    spec.wo = random_tensor({4, 4}, rng);
    Tensor x = random_tensor({1, 3, 4}, rng);
    BlockOutput out = attn_forward(x, spec);
    Tensor expect = attn_oracle(x, spec);
    for (size_t i = 0; i < expect.numel(); ++i)
      CHECK(std::abs(out.activations.data[i] - expect.data[i]) < 1e-12);
  }
}

TEST_CASE("attention head divisibility is a config error") {
  AttnSpec spec;
  spec.embed_dim = 4;
  spec.num_heads = 3;
  Tensor x({1, 2, 4});
  CHECK_THROWS_AS(attn_forward(x, spec), ConfigError);
}

TEST_CASE("quantize_pow2: exact power, zero and log rounding") {
  {
    Tensor w({1}, {0.5});
    ShiftQuant q = quantize_pow2(w);
    CHECK(q.sign[0] == 1);
    CHECK(q.power[0] == -1);
  }
  {
    Tensor w({1}, {0.0});
    ShiftQuant q = quantize_pow2(w);
    CHECK(q.sign[0] == 0);
    CHECK(q.dequantize().data[0] == 0.0);
  }
  {
    Tensor w({1}, {-3.0});
    ShiftQuant q = quantize_pow2(w);
    CHECK(q.sign[0] == -1);
    CHECK(q.power[0] == 2);  // log2(3) = 1.585 rounds to 2
    CHECK(q.dequantize().data[0] == -4.0);
  }
}

TEST_CASE("quantize_pow2 matches log-domain nearest-power oracle") {
  Rng rng(31);
  for (int i = 0; i < 1000; ++i) {
    const double v = rng.uniform(-4.0, 4.0);
    Tensor w({1}, {v});
    ShiftQuant q = quantize_pow2(w);
    const double mag = std::abs(v);
    if (mag < std::ldexp(1.0, ShiftQuant::kPowerMin - 1)) {
      CHECK(q.sign[0] == 0);
      continue;
    }
    // brute force over the clamped exponent range, nearest in log distance
    int best_p = ShiftQuant::kPowerMin;
    double best_d = 1e300;
    for (int p = ShiftQuant::kPowerMin; p <= ShiftQuant::kPowerMax; ++p) {
      const double d = std::abs(std::log2(mag) - p);
      // round-half-even tie break
      if (d < best_d - 1e-15 || (std::abs(d - best_d) <= 1e-15 && p % 2 == 0)) {
        best_d = d;
        best_p = p;
      }
    }
    CHECK(static_cast<int>(q.power[0]) == best_p);
    CHECK(q.sign[0] == (v > 0 ? 1 : -1));
  }
}

TEST_CASE("shift equals conv on dequantized weights, bit-exactly") {
  Rng rng(55);
  ConvSpec spec{2, 3, 3, 1};
  SUBCASE("weights already powers of two") {
    Tensor w({3, 2, 3, 3});
    for (size_t i = 0; i < w.numel(); ++i)
      w.data[i] = (i % 2 ? -1.0 : 1.0) * std::ldexp(1.0, static_cast<int>(i % 8) - 4);
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    BlockOutput conv = conv_forward(x, spec, w);
    BlockOutput shift = shift_forward(x, spec, quantize_pow2(w));
    CHECK(std::memcmp(conv.activations.data.data(), shift.activations.data.data(),
                      conv.activations.numel() * sizeof(double)) == 0);
  }
  SUBCASE("random weights: equality via the dequantized view") {
    for (int inst = 0; inst < 50; ++inst) {
      Tensor x = random_tensor({1, 2, 4, 4}, rng);
      Tensor w = random_tensor({3, 2, 3, 3}, rng, 0.3);
      ShiftQuant q = quantize_pow2(w);
      BlockOutput shift = shift_forward(x, spec, q);
      BlockOutput conv = conv_forward(x, spec, q.dequantize());
      CHECK(std::memcmp(conv.activations.data.data(), shift.activations.data.data(),
                        conv.activations.numel() * sizeof(double)) == 0);
    }
  }
  SUBCASE("all-zero signs give all-zero output") {
    Tensor w({3, 2, 3, 3}, 0.0);
    ShiftQuant q = quantize_pow2(w);
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    BlockOutput out = shift_forward(x, spec, q);
    for (double v : out.activations.data) CHECK(v == 0.0);
    CHECK(out.counts.mult == 0);
    CHECK(out.counts.shift == conv_forward(x, spec, w).counts.mult);
  }
}

TEST_CASE("adder: matching patch scores zero, single-tap distance") {
  {
    Rng rng(66);
    Tensor w = random_tensor({1, 1, 1, 1}, rng);
    Tensor x({1, 1, 1, 1}, {w.data[0]});
    ConvSpec spec{1, 1, 1, 1};
    BlockOutput out = add_forward(x, spec, w);
    CHECK(out.activations.data[0] == 0.0);
  }
  {
    Tensor x({1, 1, 1, 1}, {1.0});
    Tensor w({1, 1, 1, 1}, {3.0});
    ConvSpec spec{1, 1, 1, 1};
    BlockOutput out = add_forward(x, spec, w);
    CHECK(out.activations.data[0] == -2.0);
    CHECK(out.counts.add == 2);
    CHECK(out.counts.mult == 0);
  }
}

TEST_CASE("adder matches L1 patch oracle and is non-positive") {
  Rng rng(88);
  for (int inst = 0; inst < 100; ++inst) {
    Tensor x = random_tensor({1, 2, 4, 4}, rng);
    Tensor w = random_tensor({2, 2, 3, 3}, rng, 0.5);
    ConvSpec spec{2, 2, 3, 1};
    BlockOutput out = add_forward(x, spec, w);
    Tensor expect = adder_oracle(x, w, 1, 1);
    for (size_t i = 0; i < expect.numel(); ++i) {
      CHECK(std::abs(out.activations.data[i] - expect.data[i]) < 1e-12);
      CHECK(out.activations.data[i] <= 0.0);
    }
  }
}

TEST_CASE("adder input gradient follows the clipped surrogate formula") {
  Rng rng(91);
  Tensor x = random_tensor({1, 1, 3, 3}, rng);
  Tensor w = random_tensor({1, 1, 3, 3}, rng, 0.5);
  Tape tape;
  Var xv = tape.leaf(x);
  Var out = tape.sum(tape.adder2d(xv, tape.constant(w), 1, 1));
  tape.backward(out);
  // expected: for each input position, sum over receptive taps of clip(w-x,-1,1)
  for (size_t iy = 0; iy < 3; ++iy)
    for (size_t ix = 0; ix < 3; ++ix) {
      double expect = 0.0;
      for (size_t oy = 0; oy < 3; ++oy)
        for (size_t ox = 0; ox < 3; ++ox) {
          const long ky = static_cast<long>(iy) - (static_cast<long>(oy) - 1);
          const long kx = static_cast<long>(ix) - (static_cast<long>(ox) - 1);
          if (ky < 0 || ky > 2 || kx < 0 || kx > 2) continue;
          const double diff = w.data[ky * 3 + kx] - x.data[iy * 3 + ix];
          expect += std::clamp(diff, -1.0, 1.0);
        }
      CHECK(x.grad[iy * 3 + ix] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("op counts are data independent and additive") {
  Rng rng(101);
  ConvSpec spec{2, 3, 3, 1};
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor x1 = random_tensor({1, 2, 4, 4}, rng);
  Tensor x2 = random_tensor({1, 2, 4, 4}, rng, 10.0);
  CHECK(conv_forward(x1, spec, w).counts == conv_forward(x2, spec, w).counts);
  CHECK(add_forward(x1, spec, w).counts == add_forward(x2, spec, w).counts);
}

TEST_CASE("composite block: zero input conv block returns the residual") {
  const size_t c = 3;
  Tensor w({c, c, 3, 3}, 0.0);
  BnState bn(c);
  BlockParams p;
  p.type = BlockType::Conv;
  p.conv = ConvSpec{static_cast<int>(c), static_cast<int>(c), 3, 1};
  p.weights = &w;
  p.bn = &bn;
  Tensor x({1, c, 4, 4}, 0.0);
  BlockOutput out = block_forward(x, p, true);
  for (double v : out.activations.data) CHECK(v == 0.0);
}

TEST_CASE("composite block counts verified by hand on a one-layer config") {
  // 1x2x4x4 input, conv block 2->3 channels stride 1: core macs = 3*4*4*2*9 = 864,
  // bn 3*4*4 = 48, residual projection 3*4*4*2 = 96, residual add 48.
  Rng rng(111);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor proj = random_tensor({3, 2, 1, 1}, rng);
  BnState bn(3);
  BlockParams p;
  p.type = BlockType::Conv;
  p.conv = ConvSpec{2, 3, 3, 1};
  p.weights = &w;
  p.bn = &bn;
  p.res_proj = &proj;
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  BlockOutput out = block_forward(x, p, true);
  CHECK(out.counts.mult == 864 + 48 + 96);
  CHECK(out.counts.add == 864 + 48 + 96 + 48);
  CHECK(out.counts.shift == 0);
  CHECK(out.counts.overhead_mult == 48 + 96);
  CHECK(out.counts.overhead_add == 48 + 96 + 48);
}

TEST_CASE("attn block preserves the token geometry") {
  Rng rng(121);
  const size_t d = 8;
  AttnBlockParams a;
  a.heads = 4;
  a.pos_dw = random_tensor({d, 3, 3}, rng, 0.2);
  a.wq = random_tensor({d, d}, rng, 0.3);
  a.wk = random_tensor({d, d}, rng, 0.3);
  a.wv = random_tensor({d, d}, rng, 0.3);
  a.wo = random_tensor({d, d}, rng, 0.3);
  a.mlp_w1 = random_tensor({d, 2 * d}, rng, 0.3);
  a.mlp_b1 = Tensor({2 * d}, 0.0);
  a.mlp_w2 = random_tensor({2 * d, d}, rng, 0.3);
  a.mlp_b2 = Tensor({d}, 0.0);
  BlockParams p;
  p.type = BlockType::Attn;
  p.conv = ConvSpec{static_cast<int>(d), static_cast<int>(d), 3, 1};
  p.attn = &a;
  Tensor x = random_tensor({2, d, 4, 4}, rng);
  BlockOutput out = block_forward(x, p, true);
  CHECK(out.activations.shape == x.shape);
}
