#include "whisperer/nn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace whisperer::nn {

namespace {
uint64_t g_seq = 0;

Var new_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  n->parents = std::move(parents);
  n->backward_op = std::move(bw);
  n->seq = ++g_seq;
  bool any = false;
  for (const auto& p : n->parents) any = any || p->requires_grad;
  n->requires_grad = any;
  if (!any) n->backward_op = nullptr;  // constant subgraph, nothing to do
  return n;
}

inline bool needs(const Var& v) { return v->requires_grad; }
}  // namespace

Var make_var(Tensor value, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->val = std::move(value);
  n->requires_grad = requires_grad;
  n->seq = ++g_seq;
  return n;
}

uint64_t next_seq() { return ++g_seq; }

void backward(const Var& root) {
  if (root->val.numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar");
  }
  // Collect reachable nodes.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });
  root->ensure_grad();
  root->grad.data[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_op) {
      n->ensure_grad();
      n->backward_op(*n);
    }
  }
}

void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params) {
    if (p->grad.numel()) p->grad.data.setZero();
  }
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
  Tensor out(a->val.shape, a->val.data + b->val.data);
  return new_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (needs(a)) {
      a->ensure_grad();
      a->grad.data += n.grad.data;
    }
    if (needs(b)) {
      b->ensure_grad();
      b->grad.data += n.grad.data;
    }
  });
}

Var sub(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out(a->val.shape, a->val.data - b->val.data);
  return new_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (needs(a)) {
      a->ensure_grad();
      a->grad.data += n.grad.data;
    }
    if (needs(b)) {
      b->ensure_grad();
      b->grad.data -= n.grad.data;
    }
  });
}

Var mul(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out(a->val.shape, a->val.data * b->val.data);
  return new_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (needs(a)) {
      a->ensure_grad();
      a->grad.data += n.grad.data * b->val.data;
    }
    if (needs(b)) {
      b->ensure_grad();
      b->grad.data += n.grad.data * a->val.data;
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out(a->val.shape, a->val.data * c);
  return new_node(std::move(out), {a}, [a, c](Node& n) {
    if (needs(a)) {
      a->ensure_grad();
      a->grad.data += n.grad.data * c;
    }
  });
}

Var add_const(const Var& a, double c) {
  Tensor out(a->val.shape, a->val.data + c);
  return new_node(std::move(out), {a}, [a](Node& n) {
    if (needs(a)) {
      a->ensure_grad();
      a->grad.data += n.grad.data;
    }
  });
}

Var relu(const Var& a) {
  Tensor out(a->val.shape, a->val.data.max(0.0));
  return new_node(std::move(out), {a}, [a](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += n.grad.data * (a->val.data > 0.0).cast<double>();
  });
}

Var silu(const Var& a) {
  Eigen::ArrayXd sig = 1.0 / (1.0 + (-a->val.data).exp());
  Tensor out(a->val.shape, a->val.data * sig);
  return new_node(std::move(out), {a}, [a, sig](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += n.grad.data * (sig * (1.0 + a->val.data * (1.0 - sig)));
  });
}

Var sigmoid_v(const Var& a) {
  Eigen::ArrayXd sig = 1.0 / (1.0 + (-a->val.data).exp());
  Tensor out(a->val.shape, sig);
  return new_node(std::move(out), {a}, [a](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += n.grad.data * n.val.data * (1.0 - n.val.data);
  });
}

Var tanh_v(const Var& a) {
  Tensor out(a->val.shape, a->val.data.tanh());
  return new_node(std::move(out), {a}, [a](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += n.grad.data * (1.0 - n.val.data.square());
  });
}

Var clamp(const Var& a, double lo, double hi) {
  Tensor out(a->val.shape, a->val.data.max(lo).min(hi));
  return new_node(std::move(out), {a}, [a, lo, hi](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    // Pass-through on the closed interval, zero outside.
    a->grad.data += n.grad.data * ((a->val.data >= lo) && (a->val.data <= hi)).cast<double>();
  });
}

// ---------------- shape ----------------

Var reshape(const Var& a, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != a->val.numel()) {
    throw std::invalid_argument("reshape: numel mismatch");
  }
  Tensor out(std::move(shape), a->val.data);
  return new_node(std::move(out), {a}, [a](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += n.grad.data;
  });
}

Var transpose2d(const Var& a) {
  if (a->val.ndim() != 2) throw std::invalid_argument("transpose2d: rank != 2");
  const int m = a->val.dim(0), k = a->val.dim(1);
  Tensor out({k, m});
  as_matrix(out, k, m) = as_matrix(a->val, m, k).transpose();
  return new_node(std::move(out), {a}, [a, m, k](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    as_matrix(a->grad, m, k) += as_matrix(n.grad, k, m).transpose();
  });
}

Var slice_cols(const Var& a, int c0, int c1) {
  const int m = a->val.dim(0), k = a->val.dim(1);
  if (c0 < 0 || c1 > k || c0 >= c1) throw std::invalid_argument("slice_cols: bad range");
  Tensor out({m, c1 - c0});
  as_matrix(out, m, c1 - c0) = as_matrix(a->val, m, k).middleCols(c0, c1 - c0);
  return new_node(std::move(out), {a}, [a, m, k, c0, c1](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    as_matrix(a->grad, m, k).middleCols(c0, c1 - c0) += as_matrix(n.grad, m, c1 - c0);
  });
}

Var slice_rows(const Var& a, int r0, int r1) {
  const int m = a->val.dim(0), k = a->val.dim(1);
  if (r0 < 0 || r1 > m || r0 >= r1) throw std::invalid_argument("slice_rows: bad range");
  Tensor out({r1 - r0, k});
  out.data = a->val.data.segment(static_cast<int64_t>(r0) * k,
                                 static_cast<int64_t>(r1 - r0) * k);
  return new_node(std::move(out), {a}, [a, k, r0, r1](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data.segment(static_cast<int64_t>(r0) * k,
                         static_cast<int64_t>(r1 - r0) * k) += n.grad.data;
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  const int m = parts[0]->val.dim(0);
  int total = 0;
  for (const auto& p : parts) {
    if (p->val.dim(0) != m) throw std::invalid_argument("concat_cols: row mismatch");
    total += p->val.dim(1);
  }
  Tensor out({m, total});
  auto om = as_matrix(out, m, total);
  int off = 0;
  for (const auto& p : parts) {
    const int c = p->val.dim(1);
    om.middleCols(off, c) = as_matrix(p->val, m, c);
    off += c;
  }
  std::vector<Var> parents(parts.begin(), parts.end());
  return new_node(std::move(out), parents, [parts, m, total](Node& n) {
    auto gm = as_matrix(n.grad, m, total);
    int off = 0;
    for (const auto& p : parts) {
      const int c = p->val.dim(1);
      if (needs(p)) {
        p->ensure_grad();
        as_matrix(p->grad, m, c) += gm.middleCols(off, c);
      }
      off += c;
    }
  });
}

Var concat_chan(const Var& a, const Var& b) {
  if (a->val.ndim() != 3 || b->val.ndim() != 3 || a->val.dim(1) != b->val.dim(1) ||
      a->val.dim(2) != b->val.dim(2)) {
    throw std::invalid_argument("concat_chan: shape mismatch");
  }
  const int ca = a->val.dim(0), cb = b->val.dim(0);
  const int h = a->val.dim(1), w = a->val.dim(2);
  Tensor out({ca + cb, h, w});
  out.data.head(a->val.numel()) = a->val.data;
  out.data.tail(b->val.numel()) = b->val.data;
  return new_node(std::move(out), {a, b}, [a, b](Node& n) {
    if (needs(a)) {
      a->ensure_grad();
      a->grad.data += n.grad.data.head(a->val.numel());
    }
    if (needs(b)) {
      b->ensure_grad();
      b->grad.data += n.grad.data.tail(b->val.numel());
    }
  });
}

Var slice_chan(const Var& a, int c0, int c1) {
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  if (c0 < 0 || c1 > c || c0 >= c1) throw std::invalid_argument("slice_chan: bad range");
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor out({c1 - c0, h, w});
  out.data = a->val.data.segment(c0 * hw, (c1 - c0) * hw);
  return new_node(std::move(out), {a}, [a, c0, c1, hw](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data.segment(c0 * hw, (c1 - c0) * hw) += n.grad.data;
  });
}

Var pad_bottom_right(const Var& a, int ph, int pw) {
  const int c = a->val.dim(0), h = a->val.dim(1), w = a->val.dim(2);
  Tensor out({c, h + ph, w + pw});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      out.data.segment((static_cast<int64_t>(ch) * (h + ph) + y) * (w + pw), w) =
          a->val.data.segment((static_cast<int64_t>(ch) * h + y) * w, w);
    }
  }
  return new_node(std::move(out), {a}, [a, c, h, w, ph, pw](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        a->grad.data.segment((static_cast<int64_t>(ch) * h + y) * w, w) +=
            n.grad.data.segment((static_cast<int64_t>(ch) * (h + ph) + y) * (w + pw), w);
      }
    }
  });
}

Var crop(const Var& a, int h, int w) {
  const int c = a->val.dim(0), H = a->val.dim(1), W = a->val.dim(2);
  if (h > H || w > W) throw std::invalid_argument("crop: target larger than source");
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      out.data.segment((static_cast<int64_t>(ch) * h + y) * w, w) =
          a->val.data.segment((static_cast<int64_t>(ch) * H + y) * W, w);
    }
  }
  return new_node(std::move(out), {a}, [a, c, h, w, H, W](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        a->grad.data.segment((static_cast<int64_t>(ch) * H + y) * W, w) +=
            n.grad.data.segment((static_cast<int64_t>(ch) * h + y) * w, w);
      }
    }
  });
}

// ---------------- linear algebra ----------------

Var matmul(const Var& a, const Var& b) {
  if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.dim(1) != b->val.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + a->val.shape_str() +
                                " x " + b->val.shape_str());
  }
  const int m = a->val.dim(0), k = a->val.dim(1), n2 = b->val.dim(1);
  Tensor out({m, n2});
  as_matrix(out, m, n2).noalias() = as_matrix(a->val, m, k) * as_matrix(b->val, k, n2);
  return new_node(std::move(out), {a, b}, [a, b, m, k, n2](Node& n) {
    auto g = as_matrix(n.grad, m, n2);
    if (needs(a)) {
      a->ensure_grad();
      as_matrix(a->grad, m, k).noalias() += g * as_matrix(b->val, k, n2).transpose();
    }
    if (needs(b)) {
      b->ensure_grad();
      as_matrix(b->grad, k, n2).noalias() += as_matrix(a->val, m, k).transpose() * g;
    }
  });
}

Var linear(const Var& x, const Var& W, const Var& b) {
  const int m = W->val.dim(0), k = W->val.dim(1);
  if (x->val.numel() != k || b->val.numel() != m) {
    throw std::invalid_argument("linear: shape mismatch");
  }
  Tensor out({m});
  as_matrix(out, m, 1).noalias() = as_matrix(W->val, m, k) * as_matrix(x->val, k, 1);
  out.data += b->val.data;
  return new_node(std::move(out), {x, W, b}, [x, W, b, m, k](Node& n) {
    auto g = as_matrix(n.grad, m, 1);
    if (needs(W)) {
      W->ensure_grad();
      as_matrix(W->grad, m, k).noalias() += g * as_matrix(x->val, k, 1).transpose();
    }
    if (needs(x)) {
      x->ensure_grad();
      as_matrix(x->grad, k, 1).noalias() += as_matrix(W->val, m, k).transpose() * g;
    }
    if (needs(b)) {
      b->ensure_grad();
      b->grad.data += n.grad.data;
    }
  });
}

Var softmax_rows(const Var& a) {
  const int m = a->val.dim(0), k = a->val.dim(1);
  Tensor out({m, k});
  auto av = as_matrix(a->val, m, k);
  auto ov = as_matrix(out, m, k);
  for (int i = 0; i < m; ++i) {
    Eigen::ArrayXd row = av.row(i).array();
    row -= row.maxCoeff();
    row = row.exp();
    ov.row(i) = (row / row.sum()).matrix();
  }
  return new_node(std::move(out), {a}, [a, m, k](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    auto y = as_matrix(n.val, m, k);
    auto g = as_matrix(n.grad, m, k);
    auto ga = as_matrix(a->grad, m, k);
    for (int i = 0; i < m; ++i) {
      const double dot = y.row(i).dot(g.row(i));
      ga.row(i) += (y.row(i).array() * (g.row(i).array() - dot)).matrix();
    }
  });
}

// ---------------- reductions ----------------

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(a->val.data.sum());
  return new_node(std::move(out), {a}, [a](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += n.grad.data[0];
  });
}

Var mean(const Var& a) {
  const double inv = 1.0 / static_cast<double>(a->val.numel());
  Tensor out = Tensor::scalar(a->val.data.mean());
  return new_node(std::move(out), {a}, [a, inv](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += n.grad.data[0] * inv;
  });
}

Var sum_squares(const Var& a) {
  Tensor out = Tensor::scalar(a->val.data.square().sum());
  return new_node(std::move(out), {a}, [a](Node& n) {
    if (!needs(a)) return;
    a->ensure_grad();
    a->grad.data += 2.0 * n.grad.data[0] * a->val.data;
  });
}

Var mse(const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val)) throw std::invalid_argument("mse: shape mismatch");
  const double inv = 1.0 / static_cast<double>(a->val.numel());
  Eigen::ArrayXd diff = a->val.data - b->val.data;
  Tensor out = Tensor::scalar(diff.square().sum() * inv);
  return new_node(std::move(out), {a, b}, [a, b, inv](Node& n) {
    Eigen::ArrayXd d = 2.0 * inv * n.grad.data[0] * (a->val.data - b->val.data);
    if (needs(a)) {
      a->ensure_grad();
      a->grad.data += d;
    }
    if (needs(b)) {
      b->ensure_grad();
      b->grad.data -= d;
    }
  });
}

// ---------------- image ops ----------------

void im2col(const Tensor& x, int kh, int kw, int stride, int pad, Tensor& col,
            int& ho, int& wo) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  ho = (h + 2 * pad - kh) / stride + 1;
  wo = (w + 2 * pad - kw) / stride + 1;
  const int K = c * kh * kw;
  col = Tensor({K, ho * wo});
  double* cd = col.data.data();
  const double* xd = x.data.data();
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const int row = (ci * kh + ky) * kw + kx;
        double* dst = cd + static_cast<int64_t>(row) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(dst + static_cast<int64_t>(oy) * wo, dst + (static_cast<int64_t>(oy) + 1) * wo, 0.0);
            continue;
          }
          const double* src = xd + (static_cast<int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[static_cast<int64_t>(oy) * wo + ox] = (ix < 0 || ix >= w) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

namespace {
// Scatter-add of a column matrix back into image layout.
void col2im_add(const Tensor& col, int c, int h, int w, int kh, int kw, int stride,
                int pad, int ho, int wo, Tensor& out) {
  const double* cd = col.data.data();
  double* xd = out.data.data();
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const int row = (ci * kh + ky) * kw + kx;
        const double* src = cd + static_cast<int64_t>(row) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          double* dst = xd + (static_cast<int64_t>(ci) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            if (ix >= 0 && ix < w) dst[ix] += src[static_cast<int64_t>(oy) * wo + ox];
          }
        }
      }
    }
  }
}
}  // namespace

Var conv2d(const Var& x, const Var& W, const Var& b, int stride, int pad) {
  if (x->val.ndim() != 3 || W->val.ndim() != 4) {
    throw std::invalid_argument("conv2d: expects x[C,H,W], W[Co,Ci,kh,kw]");
  }
  const int ci = x->val.dim(0);
  const int co = W->val.dim(0), wci = W->val.dim(1), kh = W->val.dim(2), kw = W->val.dim(3);
  if (ci != wci) throw std::invalid_argument("conv2d: channel mismatch");
  if (b->val.numel() != co) throw std::invalid_argument("conv2d: bias mismatch");
  Tensor col;
  int ho = 0, wo = 0;
  im2col(x->val, kh, kw, stride, pad, col, ho, wo);
  const int K = ci * kh * kw;
  Tensor out({co, ho, wo});
  auto om = as_matrix(out, co, ho * wo);
  om.noalias() = as_matrix(W->val, co, K) * as_matrix(col, K, ho * wo);
  for (int c = 0; c < co; ++c) om.row(c).array() += b->val.data[c];
  // col is recomputed in the backward pass to keep graph memory flat.
  return new_node(std::move(out), {x, W, b},
                  [x, W, b, stride, pad, ci, co, kh, kw, ho, wo, K](Node& n) {
    auto g = as_matrix(n.grad, co, ho * wo);
    if (needs(W)) {
      Tensor col2;
      int h2, w2;
      im2col(x->val, kh, kw, stride, pad, col2, h2, w2);
      W->ensure_grad();
      as_matrix(W->grad, co, K).noalias() += g * as_matrix(col2, K, ho * wo).transpose();
    }
    if (needs(b)) {
      b->ensure_grad();
      for (int c = 0; c < co; ++c) b->grad.data[c] += g.row(c).sum();
    }
    if (needs(x)) {
      Tensor dcol({K, ho * wo});
      as_matrix(dcol, K, ho * wo).noalias() = as_matrix(W->val, co, K).transpose() * g;
      x->ensure_grad();
      col2im_add(dcol, ci, x->val.dim(1), x->val.dim(2), kh, kw, stride, pad, ho, wo,
                 x->grad);
    }
  });
}

Var bias_chw(const Var& x, const Var& b) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  if (b->val.numel() != c) throw std::invalid_argument("bias_chw: mismatch");
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor out = x->val;
  for (int ch = 0; ch < c; ++ch) out.data.segment(ch * hw, hw) += b->val.data[ch];
  return new_node(std::move(out), {x, b}, [x, b, c, hw](Node& n) {
    if (needs(x)) {
      x->ensure_grad();
      x->grad.data += n.grad.data;
    }
    if (needs(b)) {
      b->ensure_grad();
      for (int ch = 0; ch < c; ++ch) b->grad.data[ch] += n.grad.data.segment(ch * hw, hw).sum();
    }
  });
}

Var film(const Var& x, const Var& gamma, const Var& beta) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  if (gamma->val.numel() != c || beta->val.numel() != c) {
    throw std::invalid_argument("film: channel mismatch");
  }
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    out.data.segment(ch * hw, hw) =
        x->val.data.segment(ch * hw, hw) * (1.0 + gamma->val.data[ch]) + beta->val.data[ch];
  }
  return new_node(std::move(out), {x, gamma, beta}, [x, gamma, beta, c, hw](Node& n) {
    for (int ch = 0; ch < c; ++ch) {
      auto g = n.grad.data.segment(ch * hw, hw);
      if (needs(x)) {
        x->ensure_grad();
        x->grad.data.segment(ch * hw, hw) += g * (1.0 + gamma->val.data[ch]);
      }
      if (needs(gamma)) {
        gamma->ensure_grad();
        gamma->grad.data[ch] += (g * x->val.data.segment(ch * hw, hw)).sum();
      }
      if (needs(beta)) {
        beta->ensure_grad();
        beta->grad.data[ch] += g.sum();
      }
    }
  });
}

Var group_norm(const Var& x, int groups, const Var& gamma, const Var& beta, double eps) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  if (c % groups != 0) throw std::invalid_argument("group_norm: groups must divide C");
  if (gamma->val.numel() != c || beta->val.numel() != c) {
    throw std::invalid_argument("group_norm: affine mismatch");
  }
  const int cg = c / groups;
  const int64_t hw = static_cast<int64_t>(h) * w;
  const int64_t gsz = cg * hw;
  Tensor xhat({c, h, w});
  Eigen::ArrayXd inv_std(groups);
  for (int g = 0; g < groups; ++g) {
    auto seg = x->val.data.segment(g * gsz, gsz);
    const double mu = seg.mean();
    const double var = (seg - mu).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[g] = is;
    xhat.data.segment(g * gsz, gsz) = (seg - mu) * is;
  }
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch) {
    out.data.segment(ch * hw, hw) =
        xhat.data.segment(ch * hw, hw) * gamma->val.data[ch] + beta->val.data[ch];
  }
  return new_node(std::move(out), {x, gamma, beta},
                  [x, gamma, beta, groups, cg, hw, gsz, c, inv_std,
                   xh = std::move(xhat)](Node& n) {
    if (needs(gamma)) {
      gamma->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        gamma->grad.data[ch] +=
            (n.grad.data.segment(ch * hw, hw) * xh.data.segment(ch * hw, hw)).sum();
      }
    }
    if (needs(beta)) {
      beta->ensure_grad();
      for (int ch = 0; ch < c; ++ch) beta->grad.data[ch] += n.grad.data.segment(ch * hw, hw).sum();
    }
    if (needs(x)) {
      x->ensure_grad();
      Eigen::ArrayXd dxhat(gsz);
      for (int g = 0; g < groups; ++g) {
        for (int j = 0; j < cg; ++j) {
          const int ch = g * cg + j;
          dxhat.segment(j * hw, hw) =
              n.grad.data.segment(ch * hw, hw) * gamma->val.data[ch];
        }
        auto xh_g = xh.data.segment(g * gsz, gsz);
        const double mean_dxhat = dxhat.mean();
        const double mean_dxhat_xhat = (dxhat * xh_g).mean();
        x->grad.data.segment(g * gsz, gsz) +=
            inv_std[g] * (dxhat - mean_dxhat - xh_g * mean_dxhat_xhat);
      }
    }
  });
}

Var mean_spatial(const Var& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  const int64_t hw = static_cast<int64_t>(h) * w;
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) out.data[ch] = x->val.data.segment(ch * hw, hw).mean();
  return new_node(std::move(out), {x}, [x, c, hw](Node& n) {
    if (!needs(x)) return;
    x->ensure_grad();
    const double inv = 1.0 / static_cast<double>(hw);
    for (int ch = 0; ch < c; ++ch) {
      x->grad.data.segment(ch * hw, hw) += n.grad.data[ch] * inv;
    }
  });
}

Var avg_pool2(const Var& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  if (h % 2 || w % 2) throw std::invalid_argument("avg_pool2: dims must be even");
  const int ho = h / 2, wo = w / 2;
  Tensor out({c, ho, wo});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        const double* p = x->val.data.data() + (static_cast<int64_t>(ch) * h + 2 * y) * w + 2 * xx;
        out.data[(static_cast<int64_t>(ch) * ho + y) * wo + xx] =
            0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
    }
  }
  return new_node(std::move(out), {x}, [x, c, h, w, ho, wo](Node& n) {
    if (!needs(x)) return;
    x->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx) {
          const double g = 0.25 * n.grad.data[(static_cast<int64_t>(ch) * ho + y) * wo + xx];
          double* p = x->grad.data.data() + (static_cast<int64_t>(ch) * h + 2 * y) * w + 2 * xx;
          p[0] += g;
          p[1] += g;
          p[w] += g;
          p[w + 1] += g;
        }
      }
    }
  });
}

Var max_pool(const Var& x, int kh, int kw) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  if (h % kh || w % kw) throw std::invalid_argument("max_pool: dims must divide");
  const int ho = h / kh, wo = w / kw;
  Tensor out({c, ho, wo});
  auto argmax = std::make_shared<std::vector<int64_t>>(out.numel());
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        double best = -1e300;
        int64_t best_idx = 0;
        for (int dy = 0; dy < kh; ++dy) {
          for (int dx = 0; dx < kw; ++dx) {
            const int64_t idx = (static_cast<int64_t>(ch) * h + y * kh + dy) * w + xx * kw + dx;
            if (x->val.data[idx] > best) {
              best = x->val.data[idx];
              best_idx = idx;
            }
          }
        }
        const int64_t o = (static_cast<int64_t>(ch) * ho + y) * wo + xx;
        out.data[o] = best;
        (*argmax)[o] = best_idx;
      }
    }
  }
  return new_node(std::move(out), {x}, [x, argmax](Node& n) {
    if (!needs(x)) return;
    x->ensure_grad();
    for (int64_t o = 0; o < n.grad.numel(); ++o) {
      x->grad.data[(*argmax)[o]] += n.grad.data[o];
    }
  });
}

Var upsample_nearest2(const Var& x) {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const double v = x->val.data[(static_cast<int64_t>(ch) * h + y) * w + xx];
        double* base = out.data.data() + (static_cast<int64_t>(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
        base[0] = v;
        base[1] = v;
        base[2 * w] = v;
        base[2 * w + 1] = v;
      }
    }
  }
  return new_node(std::move(out), {x}, [x, c, h, w](Node& n) {
    if (!needs(x)) return;
    x->ensure_grad();
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int xx = 0; xx < w; ++xx) {
          const double* base =
              n.grad.data.data() + (static_cast<int64_t>(ch) * 2 * h + 2 * y) * 2 * w + 2 * xx;
          x->grad.data[(static_cast<int64_t>(ch) * h + y) * w + xx] +=
              base[0] + base[1] + base[2 * w] + base[2 * w + 1];
        }
      }
    }
  });
}

}  // namespace whisperer::nn
