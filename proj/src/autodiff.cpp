#include "sanas/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "sanas/errors.hpp"

namespace sanas {

const Tensor& Var::value() const { return tape->value_of(id); }

int Tape::push(Tensor value, std::function<void(Tape&, int)> backprop) {
  Node n;
  n.value = std::move(value);
  n.grad.assign(n.value.numel(), 0.0);
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

Var Tape::leaf(Tensor& t) {
  auto it = leaf_ids_.find(&t);
  if (it != leaf_ids_.end()) return Var{this, it->second};
  int id = push(t, nullptr);
  nodes_[static_cast<size_t>(id)].external = &t;
  leaf_ids_.emplace(&t, id);
  return Var{this, id};
}

Var Tape::constant(Tensor t) { return Var{this, push(std::move(t), nullptr)}; }

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape)
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                         " vs " + shape_str(b.shape));
}

// C += A[m x k] * B[k x n]
void gemm_nn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i)
    for (size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

// C += A[m x k] * B^T where B is [n x k]
void gemm_nt(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i)
    for (size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      const double* arow = a + i * k;
      const double* brow = b + j * k;
      for (size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
}

// C += A^T * B where A is [k x m], B is [k x n]
void gemm_tn(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

Var Tape::add(Var a, Var b) {
  const Tensor& ta = value_of(a.id);
  const Tensor& tb = value_of(b.id);
  require_same_shape(ta, tb, "add");
  Tensor out = ta;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] += tb.data[i];
  int pa = a.id, pb = b.id;
  return Var{this, push(std::move(out), [pa, pb](Tape& t, int self) {
               auto& g = t.grad_of(self);
               auto& ga = t.grad_of(pa);
               auto& gb = t.grad_of(pb);
               for (size_t i = 0; i < g.size(); ++i) {
                 ga[i] += g[i];
                 gb[i] += g[i];
               }
             })};
}

Var Tape::sub(Var a, Var b) {
  const Tensor& ta = value_of(a.id);
  const Tensor& tb = value_of(b.id);
  require_same_shape(ta, tb, "sub");
  Tensor out = ta;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= tb.data[i];
  int pa = a.id, pb = b.id;
  return Var{this, push(std::move(out), [pa, pb](Tape& t, int self) {
               auto& g = t.grad_of(self);
               auto& ga = t.grad_of(pa);
               auto& gb = t.grad_of(pb);
               for (size_t i = 0; i < g.size(); ++i) {
                 ga[i] += g[i];
                 gb[i] -= g[i];
               }
             })};
}

Var Tape::mul(Var a, Var b) {
  const Tensor& ta = value_of(a.id);
  const Tensor& tb = value_of(b.id);
  require_same_shape(ta, tb, "mul");
  Tensor out = ta;
  for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= tb.data[i];
  int pa = a.id, pb = b.id;
  return Var{this, push(std::move(out), [pa, pb](Tape& t, int self) {
               auto& g = t.grad_of(self);
               const auto& va = t.value_of(pa).data;
               const auto& vb = t.value_of(pb).data;
               auto& ga = t.grad_of(pa);
               auto& gb = t.grad_of(pb);
               for (size_t i = 0; i < g.size(); ++i) {
                 ga[i] += g[i] * vb[i];
                 gb[i] += g[i] * va[i];
               }
             })};
}

Var Tape::scale(Var a, double k) {
  Tensor out = value_of(a.id);
  for (double& v : out.data) v *= k;
  int pa = a.id;
  return Var{this, push(std::move(out), [pa, k](Tape& t, int self) {
               auto& g = t.grad_of(self);
               auto& ga = t.grad_of(pa);
               for (size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
             })};
}

Var Tape::add_bias(Var a, Var b) {
  const Tensor& ta = value_of(a.id);
  const Tensor& tb = value_of(b.id);
  if (ta.rank() != 2 || tb.rank() != 1 || ta.dim(1) != tb.dim(0))
    throw DimensionError("add_bias: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Tensor out = ta;
  const size_t rows = ta.dim(0), cols = ta.dim(1);
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c) out.data[r * cols + c] += tb.data[c];
  int pa = a.id, pb = b.id;
  return Var{this, push(std::move(out), [pa, pb, rows, cols](Tape& t, int self) {
               auto& g = t.grad_of(self);
               auto& ga = t.grad_of(pa);
               auto& gb = t.grad_of(pb);
               for (size_t r = 0; r < rows; ++r)
                 for (size_t c = 0; c < cols; ++c) {
                   ga[r * cols + c] += g[r * cols + c];
                   gb[c] += g[r * cols + c];
                 }
             })};
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& ta = value_of(a.id);
  const Tensor& tb = value_of(b.id);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.dim(1) != tb.dim(0))
    throw DimensionError("matmul: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  const size_t m = ta.dim(0), k = ta.dim(1), n = tb.dim(1);
  Tensor out({m, n});
  gemm_nn(ta.data.data(), tb.data.data(), out.data.data(), m, k, n);
  int pa = a.id, pb = b.id;
  return Var{this, push(std::move(out), [pa, pb, m, k, n](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               const auto& va = t.value_of(pa).data;
               const auto& vb = t.value_of(pb).data;
               // dA += g * B^T ; dB += A^T * g
               gemm_nt(g.data(), vb.data(), t.grad_of(pa).data(), m, n, k);
               gemm_tn(va.data(), g.data(), t.grad_of(pb).data(), k, m, n);
             })};
}

Var Tape::relu(Var a) {
  Tensor out = value_of(a.id);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  int pa = a.id;
  return Var{this, push(std::move(out), [pa](Tape& t, int self) {
               auto& g = t.grad_of(self);
               const auto& va = t.value_of(pa).data;
               auto& ga = t.grad_of(pa);
               for (size_t i = 0; i < g.size(); ++i)
                 if (va[i] > 0.0) ga[i] += g[i];
             })};
}

Var Tape::softplus(Var a) {
  Tensor out = value_of(a.id);
  for (double& v : out.data) {
    double x = v;
    v = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  }
  int pa = a.id;
  return Var{this, push(std::move(out), [pa](Tape& t, int self) {
               auto& g = t.grad_of(self);
               const auto& va = t.value_of(pa).data;
               auto& ga = t.grad_of(pa);
               for (size_t i = 0; i < g.size(); ++i)
                 ga[i] += g[i] / (1.0 + std::exp(-va[i]));
             })};
}

Var Tape::sum(Var a) {
  double s = 0.0;
  for (double v : value_of(a.id).data) s += v;
  int pa = a.id;
  return Var{this, push(Tensor({1}, {s}), [pa](Tape& t, int self) {
               double g = t.grad_of(self)[0];
               auto& ga = t.grad_of(pa);
               for (double& v : ga) v += g;
             })};
}

Var Tape::mean(Var a) {
  const Tensor& ta = value_of(a.id);
  double s = 0.0;
  for (double v : ta.data) s += v;
  const double inv = 1.0 / static_cast<double>(ta.numel());
  int pa = a.id;
  return Var{this, push(Tensor({1}, {s * inv}), [pa, inv](Tape& t, int self) {
               double g = t.grad_of(self)[0] * inv;
               auto& ga = t.grad_of(pa);
               for (double& v : ga) v += g;
             })};
}

Var Tape::reshape(Var a, Shape s) {
  const Tensor& ta = value_of(a.id);
  if (shape_numel(s) != ta.numel())
    throw DimensionError("reshape: " + shape_str(ta.shape) + " -> " + shape_str(s));
  Tensor out(std::move(s), ta.data);
  int pa = a.id;
  return Var{this, push(std::move(out), [pa](Tape& t, int self) {
               auto& g = t.grad_of(self);
               auto& ga = t.grad_of(pa);
               for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
             })};
}

Var Tape::softmax_rows(Var x) {
  const Tensor& tx = value_of(x.id);
  if (tx.rank() != 2) throw DimensionError("softmax_rows expects a matrix, got " + shape_str(tx.shape));
  const size_t m = tx.dim(0), n = tx.dim(1);
  Tensor out({m, n});
  for (size_t r = 0; r < m; ++r) {
    const double* row = tx.data.data() + r * n;
    double mx = row[0];
    for (size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    double total = 0.0;
    for (size_t c = 0; c < n; ++c) {
      double e = std::exp(row[c] - mx);
      out.data[r * n + c] = e;
      total += e;
    }
    for (size_t c = 0; c < n; ++c) out.data[r * n + c] /= total;
  }
  int pa = x.id;
  return Var{this, push(std::move(out), [pa, m, n](Tape& t, int self) {
               const auto& p = t.value_of(self).data;
               const auto& g = t.grad_of(self);
               auto& ga = t.grad_of(pa);
               for (size_t r = 0; r < m; ++r) {
                 double dot = 0.0;
                 for (size_t c = 0; c < n; ++c) dot += g[r * n + c] * p[r * n + c];
                 for (size_t c = 0; c < n; ++c)
                   ga[r * n + c] += p[r * n + c] * (g[r * n + c] - dot);
               }
             })};
}

Var Tape::cross_entropy_mean(Var logits, const std::vector<int>& labels) {
  const Tensor& tl = value_of(logits.id);
  if (tl.rank() != 2) throw DimensionError("cross_entropy_mean expects [N x C] logits");
  const size_t n = tl.dim(0), c = tl.dim(1);
  if (labels.size() != n)
    throw ContractError("cross_entropy_mean: " + std::to_string(labels.size()) +
                        " labels for " + std::to_string(n) + " rows");
  for (int y : labels)
    if (y < 0 || static_cast<size_t>(y) >= c)
      throw ContractError("label " + std::to_string(y) + " out of range [0," +
                          std::to_string(c) + ")");
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double loss = 0.0;
  for (size_t r = 0; r < n; ++r) {
    const double* row = tl.data.data() + r * c;
    double mx = row[0];
    for (size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (size_t j = 0; j < c; ++j) {
      double e = std::exp(row[j] - mx);
      (*probs)[r * c + j] = e;
      total += e;
    }
    for (size_t j = 0; j < c; ++j) (*probs)[r * c + j] /= total;
    loss -= std::log((*probs)[r * c + static_cast<size_t>(labels[r])]);
  }
  loss /= static_cast<double>(n);
  int pa = logits.id;
  auto lab = std::make_shared<std::vector<int>>(labels);
  return Var{this, push(Tensor({1}, {loss}), [pa, n, c, probs, lab](Tape& t, int self) {
               double g = t.grad_of(self)[0] / static_cast<double>(n);
               auto& ga = t.grad_of(pa);
               for (size_t r = 0; r < n; ++r)
                 for (size_t j = 0; j < c; ++j) {
                   double ind = (static_cast<size_t>((*lab)[r]) == j) ? 1.0 : 0.0;
                   ga[r * c + j] += g * ((*probs)[r * c + j] - ind);
                 }
             })};
}

Var Tape::conv2d_impl(Var x, Var w, const Tensor* forward_w, int stride, int pad) {
  const Tensor& tx = value_of(x.id);
  const Tensor& tw_leaf = value_of(w.id);
  const Tensor& tw = forward_w ? *forward_w : tw_leaf;
  if (tx.rank() != 4 || tw.rank() != 4)
    throw DimensionError("conv2d: input " + shape_str(tx.shape) + " weight " + shape_str(tw.shape));
  if (tw.shape != tw_leaf.shape)
    throw DimensionError("conv2d: forward weights " + shape_str(tw.shape) +
                         " mismatch leaf " + shape_str(tw_leaf.shape));
  const size_t n = tx.dim(0), cin = tx.dim(1), h = tx.dim(2), ww = tx.dim(3);
  const size_t cout = tw.dim(0), k = tw.dim(2);
  if (tw.dim(1) != cin || tw.dim(3) != k)
    throw DimensionError("conv2d: channels/kernel mismatch, input " + shape_str(tx.shape) +
                         " weight " + shape_str(tw.shape));
  const size_t oh = (h + 2 * static_cast<size_t>(pad) - k) / static_cast<size_t>(stride) + 1;
  const size_t ow = (ww + 2 * static_cast<size_t>(pad) - k) / static_cast<size_t>(stride) + 1;
  Tensor out({n, cout, oh, ow});
  auto fw = std::make_shared<Tensor>(tw);
  const double* xd = tx.data.data();
  const double* wd = fw->data.data();
  for (size_t b = 0; b < n; ++b)
    for (size_t oc = 0; oc < cout; ++oc)
      for (size_t y = 0; y < oh; ++y)
        for (size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (size_t ic = 0; ic < cin; ++ic)
            for (size_t i = 0; i < k; ++i) {
              const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(i);
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (size_t j = 0; j < k; ++j) {
                const long ix = static_cast<long>(xo) * stride - pad + static_cast<long>(j);
                if (ix < 0 || ix >= static_cast<long>(ww)) continue;
                acc += xd[((b * cin + ic) * h + static_cast<size_t>(iy)) * ww + static_cast<size_t>(ix)] *
                       wd[((oc * cin + ic) * k + i) * k + j];
              }
            }
          out.data[((b * cout + oc) * oh + y) * ow + xo] = acc;
        }
  int px = x.id, pw = w.id;
  return Var{this, push(std::move(out), [px, pw, fw, n, cin, h, ww, cout, k, oh, ow, stride,
                                         pad](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               const auto& xv = t.value_of(px).data;
               auto& gx = t.grad_of(px);
               auto& gw = t.grad_of(pw);
               const double* wd = fw->data.data();
               for (size_t b = 0; b < n; ++b)
                 for (size_t oc = 0; oc < cout; ++oc)
                   for (size_t y = 0; y < oh; ++y)
                     for (size_t xo = 0; xo < ow; ++xo) {
                       const double go = g[((b * cout + oc) * oh + y) * ow + xo];
                       if (go == 0.0) continue;
                       for (size_t ic = 0; ic < cin; ++ic)
                         for (size_t i = 0; i < k; ++i) {
                           const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(i);
                           if (iy < 0 || iy >= static_cast<long>(h)) continue;
                           for (size_t j = 0; j < k; ++j) {
                             const long ix = static_cast<long>(xo) * stride - pad + static_cast<long>(j);
                             if (ix < 0 || ix >= static_cast<long>(ww)) continue;
                             const size_t xi =
                                 ((b * cin + ic) * h + static_cast<size_t>(iy)) * ww + static_cast<size_t>(ix);
                             const size_t wi = ((oc * cin + ic) * k + i) * k + j;
                             gw[wi] += go * xv[xi];
                             gx[xi] += go * wd[wi];
                           }
                         }
                     }
             })};
}

Var Tape::conv2d(Var x, Var w, int stride, int pad) {
  return conv2d_impl(x, w, nullptr, stride, pad);
}

Var Tape::conv2d_frozen(Var x, Var w, const Tensor& forward_w, int stride, int pad) {
  return conv2d_impl(x, w, &forward_w, stride, pad);
}

Var Tape::depthwise3x3(Var x, Var w) {
  const Tensor& tx = value_of(x.id);
  const Tensor& tw = value_of(w.id);
  if (tx.rank() != 4 || tw.rank() != 3 || tw.dim(0) != tx.dim(1) || tw.dim(1) != 3 || tw.dim(2) != 3)
    throw DimensionError("depthwise3x3: input " + shape_str(tx.shape) + " weight " + shape_str(tw.shape));
  const size_t n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), ww = tx.dim(3);
  Tensor out({n, c, h, ww});
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t y = 0; y < h; ++y)
        for (size_t xo = 0; xo < ww; ++xo) {
          double acc = 0.0;
          for (size_t i = 0; i < 3; ++i) {
            const long iy = static_cast<long>(y) - 1 + static_cast<long>(i);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (size_t j = 0; j < 3; ++j) {
              const long ix = static_cast<long>(xo) - 1 + static_cast<long>(j);
              if (ix < 0 || ix >= static_cast<long>(ww)) continue;
              acc += tx.data[((b * c + ch) * h + static_cast<size_t>(iy)) * ww + static_cast<size_t>(ix)] *
                     tw.data[(ch * 3 + i) * 3 + j];
            }
          }
          out.data[((b * c + ch) * h + y) * ww + xo] = acc;
        }
  int px = x.id, pw = w.id;
  return Var{this, push(std::move(out), [px, pw, n, c, h, ww](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               const auto& xv = t.value_of(px).data;
               const auto& wv = t.value_of(pw).data;
               auto& gx = t.grad_of(px);
               auto& gw = t.grad_of(pw);
               for (size_t b = 0; b < n; ++b)
                 for (size_t ch = 0; ch < c; ++ch)
                   for (size_t y = 0; y < h; ++y)
                     for (size_t xo = 0; xo < ww; ++xo) {
                       const double go = g[((b * c + ch) * h + y) * ww + xo];
                       if (go == 0.0) continue;
                       for (size_t i = 0; i < 3; ++i) {
                         const long iy = static_cast<long>(y) - 1 + static_cast<long>(i);
                         if (iy < 0 || iy >= static_cast<long>(h)) continue;
                         for (size_t j = 0; j < 3; ++j) {
                           const long ix = static_cast<long>(xo) - 1 + static_cast<long>(j);
                           if (ix < 0 || ix >= static_cast<long>(ww)) continue;
                           const size_t xi =
                               ((b * c + ch) * h + static_cast<size_t>(iy)) * ww + static_cast<size_t>(ix);
                           const size_t wi = (ch * 3 + i) * 3 + j;
                           gw[wi] += go * xv[xi];
                           gx[xi] += go * wv[wi];
                         }
                       }
                     }
             })};
}

Var Tape::adder2d(Var x, Var w, int stride, int pad) {
  const Tensor& tx = value_of(x.id);
  const Tensor& tw = value_of(w.id);
  if (tx.rank() != 4 || tw.rank() != 4 || tw.dim(1) != tx.dim(1) || tw.dim(2) != tw.dim(3))
    throw DimensionError("adder2d: input " + shape_str(tx.shape) + " weight " + shape_str(tw.shape));
  const size_t n = tx.dim(0), cin = tx.dim(1), h = tx.dim(2), ww = tx.dim(3);
  const size_t cout = tw.dim(0), k = tw.dim(2);
  const size_t oh = (h + 2 * static_cast<size_t>(pad) - k) / static_cast<size_t>(stride) + 1;
  const size_t ow = (ww + 2 * static_cast<size_t>(pad) - k) / static_cast<size_t>(stride) + 1;
  Tensor out({n, cout, oh, ow});
  for (size_t b = 0; b < n; ++b)
    for (size_t oc = 0; oc < cout; ++oc)
      for (size_t y = 0; y < oh; ++y)
        for (size_t xo = 0; xo < ow; ++xo) {
          double acc = 0.0;
          for (size_t ic = 0; ic < cin; ++ic)
            for (size_t i = 0; i < k; ++i)
              for (size_t j = 0; j < k; ++j) {
                const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(i);
                const long ix = static_cast<long>(xo) * stride - pad + static_cast<long>(j);
                double xv = 0.0;  // zero padding participates in the distance
                if (iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(ww))
                  xv = tx.data[((b * cin + ic) * h + static_cast<size_t>(iy)) * ww + static_cast<size_t>(ix)];
                acc += std::abs(xv - tw.data[((oc * cin + ic) * k + i) * k + j]);
              }
          out.data[((b * cout + oc) * oh + y) * ow + xo] = -acc;
        }
  int px = x.id, pw = w.id;
  return Var{this, push(std::move(out), [px, pw, n, cin, h, ww, cout, k, oh, ow, stride,
                                         pad](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               const auto& xv = t.value_of(px).data;
               const auto& wv = t.value_of(pw).data;
               auto& gx = t.grad_of(px);
               auto& gw = t.grad_of(pw);
               for (size_t b = 0; b < n; ++b)
                 for (size_t oc = 0; oc < cout; ++oc)
                   for (size_t y = 0; y < oh; ++y)
                     for (size_t xo = 0; xo < ow; ++xo) {
                       const double go = g[((b * cout + oc) * oh + y) * ow + xo];
                       if (go == 0.0) continue;
                       for (size_t ic = 0; ic < cin; ++ic)
                         for (size_t i = 0; i < k; ++i)
                           for (size_t j = 0; j < k; ++j) {
                             const long iy = static_cast<long>(y) * stride - pad + static_cast<long>(i);
                             const long ix = static_cast<long>(xo) * stride - pad + static_cast<long>(j);
                             const bool in =
                                 iy >= 0 && iy < static_cast<long>(h) && ix >= 0 && ix < static_cast<long>(ww);
                             const size_t wi = ((oc * cin + ic) * k + i) * k + j;
                             const double xval =
                                 in ? xv[((b * cin + ic) * h + static_cast<size_t>(iy)) * ww +
                                         static_cast<size_t>(ix)]
                                    : 0.0;
                             const double d = xval - wv[wi];
                             // d(out)/dw = sign(x - w); exact a.e.
                             const double sgn = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                             gw[wi] += go * sgn;
                             if (in) {
                               // clipped surrogate for the input path
                               const double clipped = std::clamp(-d, -1.0, 1.0);
                               gx[((b * cin + ic) * h + static_cast<size_t>(iy)) * ww +
                                  static_cast<size_t>(ix)] += go * clipped;
                             }
                           }
                     }
             })};
}

Var Tape::batchnorm2d(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                      bool training, double momentum, double eps) {
  const Tensor& tx = value_of(x.id);
  if (tx.rank() != 4) throw DimensionError("batchnorm2d expects [N,C,H,W], got " + shape_str(tx.shape));
  const size_t n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
  const Tensor& tg = value_of(gamma.id);
  if (tg.numel() != c || value_of(beta.id).numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw DimensionError("batchnorm2d: parameter size mismatch for " + std::to_string(c) + " channels");
  const size_t plane = h * w;
  const double m = static_cast<double>(n * plane);

  auto mean = std::make_shared<std::vector<double>>(c, 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(c, 0.0);
  if (training) {
    for (size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (size_t b = 0; b < n; ++b) {
        const double* p = tx.data.data() + (b * c + ch) * plane;
        for (size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double mu = s / m;
      double v = 0.0;
      for (size_t b = 0; b < n; ++b) {
        const double* p = tx.data.data() + (b * c + ch) * plane;
        for (size_t i = 0; i < plane; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      v /= m;  // biased variance throughout
      (*mean)[ch] = mu;
      (*inv_std)[ch] = 1.0 / std::sqrt(v + eps);
      running_mean.data[ch] = (1.0 - momentum) * running_mean.data[ch] + momentum * mu;
      running_var.data[ch] = (1.0 - momentum) * running_var.data[ch] + momentum * v;
    }
  } else {
    for (size_t ch = 0; ch < c; ++ch) {
      (*mean)[ch] = running_mean.data[ch];
      (*inv_std)[ch] = 1.0 / std::sqrt(running_var.data[ch] + eps);
    }
  }

  Tensor out({n, c, h, w});
  const Tensor& tb = value_of(beta.id);
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch) {
      const double* p = tx.data.data() + (b * c + ch) * plane;
      double* q = out.data.data() + (b * c + ch) * plane;
      for (size_t i = 0; i < plane; ++i)
        q[i] = tg.data[ch] * ((p[i] - (*mean)[ch]) * (*inv_std)[ch]) + tb.data[ch];
    }

  int px = x.id, pg = gamma.id, pb = beta.id;
  return Var{this, push(std::move(out), [px, pg, pb, n, c, plane, m, mean, inv_std,
                                         training](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               const auto& xv = t.value_of(px).data;
               const auto& gv = t.value_of(pg).data;
               auto& gx = t.grad_of(px);
               auto& gg = t.grad_of(pg);
               auto& gb = t.grad_of(pb);
               for (size_t ch = 0; ch < c; ++ch) {
                 double sum_dy = 0.0, sum_dy_xhat = 0.0;
                 for (size_t b = 0; b < n; ++b) {
                   const size_t base = (b * c + ch) * plane;
                   for (size_t i = 0; i < plane; ++i) {
                     const double xhat = (xv[base + i] - (*mean)[ch]) * (*inv_std)[ch];
                     sum_dy += g[base + i];
                     sum_dy_xhat += g[base + i] * xhat;
                   }
                 }
                 gg[ch] += sum_dy_xhat;
                 gb[ch] += sum_dy;
                 const double scale = gv[ch] * (*inv_std)[ch];
                 for (size_t b = 0; b < n; ++b) {
                   const size_t base = (b * c + ch) * plane;
                   for (size_t i = 0; i < plane; ++i) {
                     if (training) {
                       const double xhat = (xv[base + i] - (*mean)[ch]) * (*inv_std)[ch];
                       gx[base + i] += scale * (g[base + i] - sum_dy / m - xhat * sum_dy_xhat / m);
                     } else {
                       gx[base + i] += scale * g[base + i];
                     }
                   }
                 }
               }
             })};
}

Var Tape::mhsa(Var x, Var wq, Var wk, Var wv, Var wo, int heads) {
  const Tensor& tx = value_of(x.id);
  if (tx.rank() != 3) throw DimensionError("mhsa expects [N,n,d] tokens, got " + shape_str(tx.shape));
  const size_t bsz = tx.dim(0), n = tx.dim(1), d = tx.dim(2);
  if (heads <= 0 || d % static_cast<size_t>(heads) != 0)
    throw ConfigError("embed dim " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  for (Var wvar : {wq, wk, wv, wo}) {
    const Tensor& tw = value_of(wvar.id);
    if (tw.rank() != 2 || tw.dim(0) != d || tw.dim(1) != d)
      throw DimensionError("mhsa projection must be [d x d], got " + shape_str(tw.shape));
  }
  const size_t dk = d / static_cast<size_t>(heads);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  struct Saved {
    std::vector<double> q, k, v, h;  // [bsz, n, d]
    std::vector<double> attn;        // [bsz, heads, n, n]
  };
  auto sv = std::make_shared<Saved>();
  sv->q.assign(bsz * n * d, 0.0);
  sv->k.assign(bsz * n * d, 0.0);
  sv->v.assign(bsz * n * d, 0.0);
  sv->h.assign(bsz * n * d, 0.0);
  sv->attn.assign(bsz * static_cast<size_t>(heads) * n * n, 0.0);

  const double* xd = tx.data.data();
  const double* qw = value_of(wq.id).data.data();
  const double* kw = value_of(wk.id).data.data();
  const double* vw = value_of(wv.id).data.data();
  const double* ow = value_of(wo.id).data.data();

  Tensor out({bsz, n, d});
  std::vector<double> scores(n);
  for (size_t b = 0; b < bsz; ++b) {
    const double* xb = xd + b * n * d;
    gemm_nn(xb, qw, sv->q.data() + b * n * d, n, d, d);
    gemm_nn(xb, kw, sv->k.data() + b * n * d, n, d, d);
    gemm_nn(xb, vw, sv->v.data() + b * n * d, n, d, d);
    for (int hd = 0; hd < heads; ++hd) {
      const size_t off = static_cast<size_t>(hd) * dk;
      double* attn = sv->attn.data() + (b * static_cast<size_t>(heads) + static_cast<size_t>(hd)) * n * n;
      for (size_t r = 0; r < n; ++r) {
        const double* qr = sv->q.data() + (b * n + r) * d + off;
        double mx = -1e300;
        for (size_t cidx = 0; cidx < n; ++cidx) {
          const double* kr = sv->k.data() + (b * n + cidx) * d + off;
          double dot = 0.0;
          for (size_t p = 0; p < dk; ++p) dot += qr[p] * kr[p];
          scores[cidx] = dot * inv_sqrt_dk;
          mx = std::max(mx, scores[cidx]);
        }
        double total = 0.0;
        for (size_t cidx = 0; cidx < n; ++cidx) {
          double e = std::exp(scores[cidx] - mx);
          attn[r * n + cidx] = e;
          total += e;
        }
        double* hrow = sv->h.data() + (b * n + r) * d + off;
        for (size_t cidx = 0; cidx < n; ++cidx) {
          const double a = attn[r * n + cidx] / total;
          attn[r * n + cidx] = a;
          const double* vr = sv->v.data() + (b * n + cidx) * d + off;
          for (size_t p = 0; p < dk; ++p) hrow[p] += a * vr[p];
        }
      }
    }
    gemm_nn(sv->h.data() + b * n * d, ow, out.data.data() + b * n * d, n, d, d);
  }

  int px = x.id, pq = wq.id, pk = wk.id, pv = wv.id, po = wo.id;
  return Var{this, push(std::move(out), [px, pq, pk, pv, po, sv, bsz, n, d, dk, heads,
                                         inv_sqrt_dk](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               const auto& xv = t.value_of(px).data;
               const auto& qw = t.value_of(pq).data;
               const auto& kw = t.value_of(pk).data;
               const auto& vw = t.value_of(pv).data;
               const auto& ow = t.value_of(po).data;
               auto& gx = t.grad_of(px);
               auto& gq = t.grad_of(pq);
               auto& gk = t.grad_of(pk);
               auto& gv = t.grad_of(pv);
               auto& go = t.grad_of(po);
               std::vector<double> dh(n * d), dq(n * d), dkk(n * d), dv(n * d);
               std::vector<double> da(n * n), ds(n * n);
               for (size_t b = 0; b < bsz; ++b) {
                 const double* gy = g.data() + b * n * d;
                 const double* hb = sv->h.data() + b * n * d;
                 // dWo += H^T * dY ; dH = dY * Wo^T
                 gemm_tn(hb, gy, go.data(), d, n, d);
                 std::fill(dh.begin(), dh.end(), 0.0);
                 gemm_nt(gy, ow.data(), dh.data(), n, d, d);
                 std::fill(dq.begin(), dq.end(), 0.0);
                 std::fill(dkk.begin(), dkk.end(), 0.0);
                 std::fill(dv.begin(), dv.end(), 0.0);
                 for (int hd = 0; hd < heads; ++hd) {
                   const size_t off = static_cast<size_t>(hd) * dk;
                   const double* attn =
                       sv->attn.data() + (b * static_cast<size_t>(heads) + static_cast<size_t>(hd)) * n * n;
                   // dA = dH_i V_i^T ; dV = A^T dH_i
                   for (size_t r = 0; r < n; ++r)
                     for (size_t cidx = 0; cidx < n; ++cidx) {
                       double acc = 0.0;
                       const double* dhr = dh.data() + r * d + off;
                       const double* vr = sv->v.data() + (b * n + cidx) * d + off;
                       for (size_t p = 0; p < dk; ++p) acc += dhr[p] * vr[p];
                       da[r * n + cidx] = acc;
                     }
                   for (size_t cidx = 0; cidx < n; ++cidx) {
                     double* dvr = dv.data() + cidx * d + off;
                     for (size_t r = 0; r < n; ++r) {
                       const double a = attn[r * n + cidx];
                       if (a == 0.0) continue;
                       const double* dhr = dh.data() + r * d + off;
                       for (size_t p = 0; p < dk; ++p) dvr[p] += a * dhr[p];
                     }
                   }
                   // softmax backward per row, then dS -> dQ, dK
                   for (size_t r = 0; r < n; ++r) {
                     double dot = 0.0;
                     for (size_t cidx = 0; cidx < n; ++cidx)
                       dot += da[r * n + cidx] * attn[r * n + cidx];
                     for (size_t cidx = 0; cidx < n; ++cidx)
                       ds[r * n + cidx] = attn[r * n + cidx] * (da[r * n + cidx] - dot);
                   }
                   for (size_t r = 0; r < n; ++r) {
                     double* dqr = dq.data() + r * d + off;
                     for (size_t cidx = 0; cidx < n; ++cidx) {
                       const double s = ds[r * n + cidx] * inv_sqrt_dk;
                       if (s == 0.0) continue;
                       const double* kr = sv->k.data() + (b * n + cidx) * d + off;
                       double* dkr = dkk.data() + cidx * d + off;
                       const double* qr = sv->q.data() + (b * n + r) * d + off;
                       for (size_t p = 0; p < dk; ++p) {
                         dqr[p] += s * kr[p];
                         dkr[p] += s * qr[p];
                       }
                     }
                   }
                 }
                 const double* xb = xv.data() + b * n * d;
                 // dX += dQ Wq^T + dK Wk^T + dV Wv^T ; dW* += X^T d*
                 gemm_nt(dq.data(), qw.data(), gx.data() + b * n * d, n, d, d);
                 gemm_nt(dkk.data(), kw.data(), gx.data() + b * n * d, n, d, d);
                 gemm_nt(dv.data(), vw.data(), gx.data() + b * n * d, n, d, d);
                 gemm_tn(xb, dq.data(), gq.data(), d, n, d);
                 gemm_tn(xb, dkk.data(), gk.data(), d, n, d);
                 gemm_tn(xb, dv.data(), gv.data(), d, n, d);
               }
             })};
}

Var Tape::nchw_to_tokens(Var x) {
  const Tensor& tx = value_of(x.id);
  if (tx.rank() != 4) throw DimensionError("nchw_to_tokens expects [N,C,H,W]");
  const size_t n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
  Tensor out({n, h * w, c});
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t y = 0; y < h; ++y)
        for (size_t xo = 0; xo < w; ++xo)
          out.data[(b * h * w + y * w + xo) * c + ch] = tx.data[((b * c + ch) * h + y) * w + xo];
  int px = x.id;
  return Var{this, push(std::move(out), [px, n, c, h, w](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               auto& gx = t.grad_of(px);
               for (size_t b = 0; b < n; ++b)
                 for (size_t ch = 0; ch < c; ++ch)
                   for (size_t y = 0; y < h; ++y)
                     for (size_t xo = 0; xo < w; ++xo)
                       gx[((b * c + ch) * h + y) * w + xo] += g[(b * h * w + y * w + xo) * c + ch];
             })};
}

Var Tape::tokens_to_nchw(Var x, size_t h, size_t w) {
  const Tensor& tx = value_of(x.id);
  if (tx.rank() != 3 || tx.dim(1) != h * w)
    throw DimensionError("tokens_to_nchw: " + shape_str(tx.shape) + " for " + std::to_string(h) +
                         "x" + std::to_string(w));
  const size_t n = tx.dim(0), c = tx.dim(2);
  Tensor out({n, c, h, w});
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch)
      for (size_t y = 0; y < h; ++y)
        for (size_t xo = 0; xo < w; ++xo)
          out.data[((b * c + ch) * h + y) * w + xo] = tx.data[(b * h * w + y * w + xo) * c + ch];
  int px = x.id;
  return Var{this, push(std::move(out), [px, n, c, h, w](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               auto& gx = t.grad_of(px);
               for (size_t b = 0; b < n; ++b)
                 for (size_t ch = 0; ch < c; ++ch)
                   for (size_t y = 0; y < h; ++y)
                     for (size_t xo = 0; xo < w; ++xo)
                       gx[(b * h * w + y * w + xo) * c + ch] += g[((b * c + ch) * h + y) * w + xo];
             })};
}

Var Tape::global_avg_pool(Var x) {
  const Tensor& tx = value_of(x.id);
  if (tx.rank() != 4) throw DimensionError("global_avg_pool expects [N,C,H,W]");
  const size_t n = tx.dim(0), c = tx.dim(1), plane = tx.dim(2) * tx.dim(3);
  Tensor out({n, c});
  for (size_t b = 0; b < n; ++b)
    for (size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      const double* p = tx.data.data() + (b * c + ch) * plane;
      for (size_t i = 0; i < plane; ++i) s += p[i];
      out.data[b * c + ch] = s / static_cast<double>(plane);
    }
  int px = x.id;
  return Var{this, push(std::move(out), [px, n, c, plane](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               auto& gx = t.grad_of(px);
               for (size_t b = 0; b < n; ++b)
                 for (size_t ch = 0; ch < c; ++ch) {
                   const double gv = g[b * c + ch] / static_cast<double>(plane);
                   double* p = gx.data() + (b * c + ch) * plane;
                   for (size_t i = 0; i < plane; ++i) p[i] += gv;
                 }
             })};
}

Var Tape::piecewise_scale_sorted(Var w, Var alphas) {
  const Tensor& tw = value_of(w.id);
  const Tensor& ta = value_of(alphas.id);
  const size_t n = tw.numel(), d = ta.numel();
  if (d < 1 || d > n)
    throw ContractError("piecewise_scale_sorted: " + std::to_string(d) + " intervals for " +
                        std::to_string(n) + " weights");
  SortResult sr = sort_desc_with_permutation(tw);
  const size_t s = n / d;
  auto interval = std::make_shared<std::vector<uint32_t>>(n);  // by original index
  Tensor out = tw;
  for (size_t j = 0; j < n; ++j) {
    const size_t iv = std::min(j / s, d - 1);
    (*interval)[sr.perm[j]] = static_cast<uint32_t>(iv);
    out.data[sr.perm[j]] = ta.data[iv] * sr.sorted.data[j];
  }
  int pw = w.id, pa = alphas.id;
  return Var{this, push(std::move(out), [pw, pa, interval](Tape& t, int self) {
               const auto& g = t.grad_of(self);
               const auto& wv = t.value_of(pw).data;
               const auto& av = t.value_of(pa).data;
               auto& gw = t.grad_of(pw);
               auto& ga = t.grad_of(pa);
               for (size_t i = 0; i < g.size(); ++i) {
                 const uint32_t iv = (*interval)[i];
                 gw[i] += g[i] * av[iv];
                 ga[iv] += g[i] * wv[i];
               }
             })};
}

Var Tape::nll_gaussian(Var w) {
  const Tensor& tw = value_of(w.id);
  const double inv = 1.0 / static_cast<double>(tw.numel());
  double s = 0.0;
  for (double v : tw.data) s += 0.5 * std::log(2.0 * std::numbers::pi) + 0.5 * v * v;
  int pw = w.id;
  return Var{this, push(Tensor({1}, {s * inv}), [pw, inv](Tape& t, int self) {
               const double g = t.grad_of(self)[0] * inv;
               const auto& wv = t.value_of(pw).data;
               auto& gw = t.grad_of(pw);
               for (size_t i = 0; i < gw.size(); ++i) gw[i] += g * wv[i];
             })};
}

Var Tape::nll_laplacian(Var w) {
  const Tensor& tw = value_of(w.id);
  const double inv = 1.0 / static_cast<double>(tw.numel());
  double s = 0.0;
  for (double v : tw.data) s += std::log(2.0) + std::abs(v);
  int pw = w.id;
  return Var{this, push(Tensor({1}, {s * inv}), [pw, inv](Tape& t, int self) {
               const double g = t.grad_of(self)[0] * inv;
               const auto& wv = t.value_of(pw).data;
               auto& gw = t.grad_of(pw);
               for (size_t i = 0; i < gw.size(); ++i)
                 gw[i] += g * (wv[i] > 0.0 ? 1.0 : (wv[i] < 0.0 ? -1.0 : 0.0));
             })};
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward: loss from a different tape");
  if (swept_) throw ContractError("backward called twice on one tape");
  const Tensor& lt = value_of(loss.id);
  if (lt.numel() != 1)
    throw ContractError("backward requires a scalar loss, got " + shape_str(lt.shape));
  swept_ = true;
  nodes_[static_cast<size_t>(loss.id)].grad[0] = 1.0;
  for (int i = loss.id; i >= 0; --i)
    if (nodes_[static_cast<size_t>(i)].backprop) nodes_[static_cast<size_t>(i)].backprop(*this, i);
  for (auto& node : nodes_)
    if (node.external) {
      node.external->ensure_grad();
      for (size_t i = 0; i < node.grad.size(); ++i) node.external->grad[i] += node.grad[i];
    }
}

std::vector<Tensor*> Tape::touched_leaves() const {
  std::vector<Tensor*> out;
  for (const auto& node : nodes_)
    if (node.external) out.push_back(node.external);
  return out;
}

}  // namespace sanas
