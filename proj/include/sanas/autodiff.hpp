#pragma once

#include <deque>
#include <functional>
#include <unordered_map>
#include <vector>

#include "sanas/tensor.hpp"

namespace sanas {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool ok() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
};

// Reverse-mode tape over the fixed set of operations the engine needs.
// Forward methods append nodes; backward() sweeps in reverse creation
// order and accumulates leaf gradients into the bound external tensors.
// One backward() per tape. Forward/backward of a tape is single-threaded;
// separate tapes over read-only tensors may run concurrently.
class Tape {
 public:
  // Binds an external parameter; repeated calls on the same tensor return
  // the same node, so gradients from multiple uses accumulate.
  Var leaf(Tensor& t);
  Var constant(Tensor t);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);                // elementwise
  Var scale(Var a, double k);
  Var add_bias(Var a, Var b);           // [R x C] + [C]
  Var matmul(Var a, Var b);             // [m x k] * [k x n]
  Var relu(Var a);
  Var softplus(Var a);
  Var sum(Var a);                       // scalar
  Var mean(Var a);                      // scalar
  Var reshape(Var a, Shape s);
  Var softmax_rows(Var x);              // [m x n], per-row max subtraction
  // logits [N x C]; labels are class indices. Stable log-softmax; mean loss.
  Var cross_entropy_mean(Var logits, const std::vector<int>& labels);

  // x [N,Cin,H,W], w [Cout,Cin,k,k]. Cross-correlation with zero padding.
  Var conv2d(Var x, Var w, int stride, int pad);
  // Same forward arithmetic but uses `forward_w` values while routing the
  // weight gradient to `w` unchanged (straight-through for quantized paths).
  Var conv2d_frozen(Var x, Var w, const Tensor& forward_w, int stride, int pad);
  Var depthwise3x3(Var x, Var w);       // w [C,3,3], stride 1, pad 1
  // Negated L1 distance between patches and filters; same geometry as conv2d.
  // Weight gradient uses sign(x-w) per tap; input gradient uses the clipped
  // surrogate clip(w-x,-1,1) per tap.
  Var adder2d(Var x, Var w, int stride, int pad);
  // Per-channel normalization over N,H,W. Training mode uses batch statistics
  // and updates running stats in place; eval mode applies the running affine.
  Var batchnorm2d(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
                  bool training, double momentum = 0.1, double eps = 1e-5);
  // Multi-head self-attention over token sequences x [N,n,d]; wq..wo [d,d].
  Var mhsa(Var x, Var wq, Var wk, Var wv, Var wo, int heads);
  Var nchw_to_tokens(Var x);            // [N,C,H,W] -> [N,H*W,C]
  Var tokens_to_nchw(Var x, size_t h, size_t w);
  Var global_avg_pool(Var x);           // [N,C,H,W] -> [N,C]

  // Flatten, sort descending, scale interval i of the sorted order by
  // alphas[i] (interval length floor(n/d), remainder absorbed by the last),
  // then undo the permutation. Differentiable in both inputs with the sort
  // permutation frozen.
  Var piecewise_scale_sorted(Var w, Var alphas);
  Var nll_gaussian(Var w);              // mean of ln(2*pi)/2 + w^2/2
  Var nll_laplacian(Var w);             // mean of ln(2) + |w|

  // Seeds d(loss)=1 and sweeps the tape once. Loss must be scalar.
  void backward(Var loss);

  const Tensor& value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  std::vector<double>& grad_of(int id) { return nodes_[static_cast<size_t>(id)].grad; }
  std::vector<Tensor*> touched_leaves() const;

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::function<void(Tape&, int)> backprop;  // (tape, own id)
    Tensor* external = nullptr;
  };
  std::deque<Node> nodes_;  // stable references across pushes
  std::unordered_map<const Tensor*, int> leaf_ids_;
  bool swept_ = false;

  int push(Tensor value, std::function<void(Tape&, int)> backprop);
  Var conv2d_impl(Var x, Var w, const Tensor* forward_w, int stride, int pad);
};

}  // namespace sanas
