#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "whisperer/nn/tensor.hpp"

namespace whisperer::nn {

// Reverse-mode autodiff over coarse tensor ops. Nodes form a DAG; backward()
// walks reachable nodes in reverse creation order. Single-threaded.
class Node {
 public:
  Tensor val;
  Tensor grad;  // allocated on demand during backward
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_op;

  void ensure_grad() {
    if (grad.numel() == 0) grad = Tensor::zeros(val.shape);
  }
};

using Var = std::shared_ptr<Node>;

Var make_var(Tensor value, bool requires_grad = false);
inline Var constant(Tensor value) { return make_var(std::move(value), false); }

// Next creation-order id; custom ops built outside this TU need it.
uint64_t next_seq();

// Backpropagate from a scalar root (numel == 1).
void backward(const Var& root);
void zero_grad(const std::vector<Var>& params);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_const(const Var& a, double c);
Var relu(const Var& a);
Var silu(const Var& a);
Var sigmoid_v(const Var& a);
Var tanh_v(const Var& a);
Var clamp(const Var& a, double lo, double hi);

// ---- shape ----
Var reshape(const Var& a, std::vector<int> shape);
Var transpose2d(const Var& a);                       // [m,n] -> [n,m]
Var slice_cols(const Var& a, int c0, int c1);        // [m,n] -> [m,c1-c0)
Var slice_rows(const Var& a, int r0, int r1);        // [m,n] -> [r1-r0,n]
Var concat_cols(const std::vector<Var>& parts);      // [m,ni] -> [m,sum ni]
Var concat_chan(const Var& a, const Var& b);         // [Ca,H,W]+[Cb,H,W]
Var slice_chan(const Var& a, int c0, int c1);        // [C,H,W] -> [c1-c0,H,W]
Var pad_bottom_right(const Var& a, int ph, int pw);  // zero pad H,W
Var crop(const Var& a, int h, int w);                // take top-left h x w

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);              // [m,k]x[k,n]
Var linear(const Var& x, const Var& W, const Var& b);  // x:[n] W:[m,n] b:[m]
Var softmax_rows(const Var& a);                      // [m,n], row-wise

// ---- reductions ----
Var sum(const Var& a);           // -> [1]
Var mean(const Var& a);          // -> [1]
Var sum_squares(const Var& a);   // -> [1]
Var mse(const Var& a, const Var& b);  // mean((a-b)^2) -> [1]

// ---- image ops (tensors shaped [C,H,W]) ----
Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad);
Var bias_chw(const Var& x, const Var& b);                     // + b[c]
Var film(const Var& x, const Var& gamma, const Var& beta);    // (1+g[c])*x+b[c]
Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta,
               double eps = 1e-5);
Var mean_spatial(const Var& x);              // [C,H,W] -> [C]
Var avg_pool2(const Var& x);                 // 2x2, stride 2 (dims must be even)
Var max_pool(const Var& x, int kh, int kw);  // non-overlapping, dims divisible
Var upsample_nearest2(const Var& x);

// im2col helper shared with inference paths.
void im2col(const Tensor& x, int kh, int kw, int stride, int pad, Tensor& col,
            int& ho, int& wo);

}  // namespace whisperer::nn
