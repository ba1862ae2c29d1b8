#include "whisperer/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace whisperer::nn {

Tensor randn_tensor(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = rng.normal() * stddev;
  return t;
}

// ---- LinearLayer ----

LinearLayer::LinearLayer(int out_dim, int in_dim, Rng& rng, double scale) {
  const double s = scale >= 0.0 ? scale : std::sqrt(1.0 / in_dim);
  W = make_var(randn_tensor({out_dim, in_dim}, rng, s), true);
  b = make_var(Tensor::zeros({out_dim}), true);
}

void LinearLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".W", W});
  out.push_back({prefix + ".b", b});
}

// ---- Conv2dLayer ----

Conv2dLayer::Conv2dLayer(int co, int ci, int k, int stride_, int pad_, Rng& rng,
                         bool zero_init)
    : stride(stride_), pad(pad_) {
  const double s = zero_init ? 0.0 : std::sqrt(2.0 / (ci * k * k));
  W = make_var(randn_tensor({co, ci, k, k}, rng, s), true);
  b = make_var(Tensor::zeros({co}), true);
}

void Conv2dLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".W", W});
  out.push_back({prefix + ".b", b});
}

// ---- GroupNormLayer ----

GroupNormLayer::GroupNormLayer(int channels, int groups_) : groups(groups_) {
  gamma = make_var(Tensor::full({channels}, 1.0), true);
  beta = make_var(Tensor::zeros({channels}), true);
}

void GroupNormLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

// ---- FilmLayer ----

FilmLayer::FilmLayer(int channels, int cond_dim, Rng& rng)
    : gamma_proj(channels, cond_dim, rng, 0.0), beta_proj(channels, cond_dim, rng, 0.0) {}

Var FilmLayer::forward(const Var& x, const Var& cond) const {
  return film(x, gamma_proj.forward(cond), beta_proj.forward(cond));
}

void FilmLayer::collect(ParamList& out, const std::string& prefix) const {
  gamma_proj.collect(out, prefix + ".gamma_proj");
  beta_proj.collect(out, prefix + ".beta_proj");
}

// ---- AttentionLayer ----

AttentionLayer::AttentionLayer(int channels, int token_dim, int dk_, int heads_, Rng& rng)
    : heads(heads_), dk(dk_) {
  if (dk % heads != 0) throw std::invalid_argument("AttentionLayer: heads must divide dk");
  Wq = make_var(randn_tensor({dk, channels}, rng, std::sqrt(1.0 / channels)), true);
  Wk = make_var(randn_tensor({dk, token_dim}, rng, std::sqrt(1.0 / token_dim)), true);
  Wv = make_var(randn_tensor({dk, token_dim}, rng, std::sqrt(1.0 / token_dim)), true);
  Wo = make_var(randn_tensor({channels, dk}, rng, std::sqrt(1.0 / dk)), true);
}

Var AttentionLayer::forward(const Var& x, const Var& tokens) const {
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  const int hw = h * w;
  Var xf = reshape(x, {c, hw});
  Var Q = transpose2d(matmul(Wq, xf));                 // [HW, dk]
  Var Kt = transpose2d(matmul(Wk, tokens));            // [N, dk]
  Var Vt = transpose2d(matmul(Wv, tokens));            // [N, dk]
  const int dh = dk / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int hd = 0; hd < heads; ++hd) {
    Var Qh = heads == 1 ? Q : slice_cols(Q, hd * dh, (hd + 1) * dh);
    Var Kh = heads == 1 ? Kt : slice_cols(Kt, hd * dh, (hd + 1) * dh);
    Var Vh = heads == 1 ? Vt : slice_cols(Vt, hd * dh, (hd + 1) * dh);
    Var scores = scale(matmul(Qh, transpose2d(Kh)), inv_sqrt);  // [HW, N]
    Var A = softmax_rows(scores);
    outs.push_back(matmul(A, Vh));  // [HW, dh]
  }
  Var O = heads == 1 ? outs[0] : concat_cols(outs);  // [HW, dk]
  Var y = matmul(Wo, transpose2d(O));                // [C, HW]
  return add(x, reshape(y, {c, h, w}));
}

Var AttentionLayer::attention_matrix(const Var& x, const Var& tokens) const {
  if (heads != 1) throw std::logic_error("attention_matrix: single-head only");
  const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
  Var xf = reshape(x, {c, h * w});
  Var Q = transpose2d(matmul(Wq, xf));
  Var K = matmul(Wk, tokens);
  Var scores = scale(matmul(Q, K), 1.0 / std::sqrt(static_cast<double>(dk)));
  return softmax_rows(scores);
}

void AttentionLayer::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".Wq", Wq});
  out.push_back({prefix + ".Wk", Wk});
  out.push_back({prefix + ".Wv", Wv});
  out.push_back({prefix + ".Wo", Wo});
}

// ---- GRU ----

GruCell::GruCell(int input_dim, int hidden_dim, Rng& rng)
    : wz(hidden_dim, input_dim, rng),
      wr(hidden_dim, input_dim, rng),
      wn(hidden_dim, input_dim, rng),
      uz(hidden_dim, hidden_dim, rng),
      ur(hidden_dim, hidden_dim, rng),
      un(hidden_dim, hidden_dim, rng),
      hidden(hidden_dim) {}

Var GruCell::step(const Var& x, const Var& h) const {
  Var z = sigmoid_v(add(wz.forward(x), uz.forward(h)));
  Var r = sigmoid_v(add(wr.forward(x), ur.forward(h)));
  Var n = tanh_v(add(wn.forward(x), mul(r, un.forward(h))));
  // h' = n + z * (h - n)
  return add(n, mul(z, sub(h, n)));
}

void GruCell::collect(ParamList& out, const std::string& prefix) const {
  wz.collect(out, prefix + ".wz");
  wr.collect(out, prefix + ".wr");
  wn.collect(out, prefix + ".wn");
  uz.collect(out, prefix + ".uz");
  ur.collect(out, prefix + ".ur");
  un.collect(out, prefix + ".un");
}

std::vector<Var> gru_run(const GruCell& cell, const std::vector<Var>& xs, bool reverse) {
  std::vector<Var> hs(xs.size());
  Var h = constant(Tensor::zeros({cell.hidden}));
  if (!reverse) {
    for (size_t t = 0; t < xs.size(); ++t) {
      h = cell.step(xs[t], h);
      hs[t] = h;
    }
  } else {
    for (size_t i = xs.size(); i-- > 0;) {
      h = cell.step(xs[i], h);
      hs[i] = h;
    }
  }
  return hs;
}

// ---- Adam ----

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Eigen::ArrayXd::Zero(p->val.numel()));
    v_.push_back(Eigen::ArrayXd::Zero(p->val.numel()));
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (p->grad.numel() == 0) continue;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p->grad.data;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p->grad.data.square();
    p->val.data -= lr_ * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + eps_);
  }
}

std::vector<Tensor> Adam::state() const {
  std::vector<Tensor> out;
  out.reserve(2 * params_.size());
  for (size_t i = 0; i < params_.size(); ++i) {
    out.push_back(Tensor(params_[i]->val.shape, m_[i]));
    out.push_back(Tensor(params_[i]->val.shape, v_[i]));
  }
  return out;
}

void Adam::load_state(const std::vector<Tensor>& s, int64_t t) {
  if (s.size() != 2 * params_.size()) throw std::invalid_argument("Adam: bad state");
  for (size_t i = 0; i < params_.size(); ++i) {
    m_[i] = s[2 * i].data;
    v_[i] = s[2 * i + 1].data;
  }
  t_ = t;
}

// ---- embeddings / CTC ----

Tensor sinusoidal_embedding(int t, int dim) {
  if (dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even");
  const int half = dim / 2;
  Tensor out({dim});
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    out.data[i] = std::sin(t * freq);
    out.data[half + i] = std::cos(t * freq);
  }
  return out;
}

namespace {
constexpr double kLogZero = -1e30;

inline double log_sum_exp(double a, double b) {
  if (a <= kLogZero) return b;
  if (b <= kLogZero) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}
inline double log_sum_exp(double a, double b, double c) {
  return log_sum_exp(log_sum_exp(a, b), c);
}
}  // namespace

Var ctc_loss(const Var& logits, const std::vector<int>& label, int blank) {
  const int T = logits->val.dim(0), C = logits->val.dim(1);
  const int L = static_cast<int>(label.size());
  const int S = 2 * L + 1;
  if (L == 0) throw std::invalid_argument("ctc_loss: empty label");
  if (T < L) throw std::invalid_argument("ctc_loss: sequence shorter than label");

  // log-softmax per timestep
  RowMat logp(T, C);
  auto lm = as_matrix(logits->val, T, C);
  for (int t = 0; t < T; ++t) {
    Eigen::ArrayXd row = lm.row(t).array();
    const double mx = row.maxCoeff();
    const double lse = mx + std::log((row - mx).exp().sum());
    logp.row(t) = (row - lse).matrix();
  }

  std::vector<int> ext(S);
  for (int s = 0; s < S; ++s) ext[s] = (s % 2 == 0) ? blank : label[s / 2];

  auto allow_skip = [&](int s) {
    return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
  };

  RowMat alpha = RowMat::Constant(T, S, kLogZero);
  alpha(0, 0) = logp(0, ext[0]);
  if (S > 1) alpha(0, 1) = logp(0, ext[1]);
  for (int t = 1; t < T; ++t) {
    for (int s = 0; s < S; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_sum_exp(a, alpha(t - 1, s - 1));
      if (allow_skip(s)) a = log_sum_exp(a, alpha(t - 1, s - 2));
      alpha(t, s) = a <= kLogZero ? kLogZero : a + logp(t, ext[s]);
    }
  }
  const double log_like = S > 1 ? log_sum_exp(alpha(T - 1, S - 1), alpha(T - 1, S - 2))
                                : alpha(T - 1, S - 1);

  RowMat beta = RowMat::Constant(T, S, kLogZero);
  beta(T - 1, S - 1) = logp(T - 1, ext[S - 1]);
  if (S > 1) beta(T - 1, S - 2) = logp(T - 1, ext[S - 2]);
  for (int t = T - 2; t >= 0; --t) {
    for (int s = S - 1; s >= 0; --s) {
      double b = beta(t + 1, s);
      if (s + 1 < S) b = log_sum_exp(b, beta(t + 1, s + 1));
      if (s + 2 < S && ext[s + 2] != blank && ext[s + 2] != ext[s]) {
        b = log_sum_exp(b, beta(t + 1, s + 2));
      }
      beta(t, s) = b <= kLogZero ? kLogZero : b + logp(t, ext[s]);
    }
  }

  // dL/dlogit = softmax - posterior
  auto dlogits = std::make_shared<Tensor>(std::vector<int>{T, C});
  auto dm = as_matrix(*dlogits, T, C);
  for (int t = 0; t < T; ++t) {
    Eigen::ArrayXd post = Eigen::ArrayXd::Constant(C, kLogZero);
    for (int s = 0; s < S; ++s) {
      const double ab = alpha(t, s) + beta(t, s) - logp(t, ext[s]);
      post[ext[s]] = log_sum_exp(post[ext[s]], ab);
    }
    for (int k = 0; k < C; ++k) {
      const double y = std::exp(logp(t, k));
      const double g = post[k] <= kLogZero ? 0.0 : std::exp(post[k] - log_like);
      dm(t, k) = y - g;
    }
  }

  Tensor out = Tensor::scalar(-log_like);
  auto node = std::make_shared<Node>();
  node->val = std::move(out);
  node->parents = {logits};
  node->requires_grad = logits->requires_grad;
  node->seq = next_seq();
  node->backward_op = [logits, dlogits](Node& n) {
    if (!logits->requires_grad) return;
    logits->ensure_grad();
    logits->grad.data += n.grad.data[0] * dlogits->data;
  };
  return node;
}

CtcDecodeResult ctc_greedy_decode(const Tensor& logits, int blank) {
  const int T = logits.dim(0), C = logits.dim(1);
  auto lm = as_matrix(logits, T, C);
  CtcDecodeResult res;
  int prev = -1;
  for (int t = 0; t < T; ++t) {
    Eigen::ArrayXd row = lm.row(t).array();
    const double mx = row.maxCoeff();
    Eigen::ArrayXd p = (row - mx).exp();
    p /= p.sum();
    int id = 0;
    p.maxCoeff(&id);
    const double prob = p[id];
    if (id != blank) {
      if (id != prev) {
        res.ids.push_back(id);
        res.step_probs.push_back(prob);
      } else {
        res.step_probs.back() = std::max(res.step_probs.back(), prob);
      }
    }
    prev = id;
  }
  return res;
}

}  // namespace whisperer::nn
