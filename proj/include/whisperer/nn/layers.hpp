#pragma once

#include <string>
#include <vector>

#include "whisperer/core/rng.hpp"
#include "whisperer/nn/autograd.hpp"

namespace whisperer::nn {

struct NamedParam {
  std::string name;
  Var var;
};

using ParamList = std::vector<NamedParam>;

// ---- layers ----

struct LinearLayer {
  Var W, b;
  LinearLayer() = default;
  LinearLayer(int out_dim, int in_dim, Rng& rng, double scale = -1.0);
  Var forward(const Var& x) const { return linear(x, W, b); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Conv2dLayer {
  Var W, b;
  int stride = 1;
  int pad = 1;
  Conv2dLayer() = default;
  Conv2dLayer(int co, int ci, int k, int stride, int pad, Rng& rng, bool zero_init = false);
  Var forward(const Var& x) const { return conv2d(x, W, b, stride, pad); }
  void collect(ParamList& out, const std::string& prefix) const;
};

struct GroupNormLayer {
  Var gamma, beta;
  int groups = 1;
  GroupNormLayer() = default;
  GroupNormLayer(int channels, int groups);
  Var forward(const Var& x) const { return group_norm(x, groups, gamma, beta); }
  void collect(ParamList& out, const std::string& prefix) const;
};

// Per-channel affine modulation from a conditioning vector. Projections are
// zero-initialized so the layer starts as the identity.
struct FilmLayer {
  LinearLayer gamma_proj, beta_proj;
  FilmLayer() = default;
  FilmLayer(int channels, int cond_dim, Rng& rng);
  Var forward(const Var& x, const Var& cond) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Single- or multi-head attention. Queries come from the [C,H,W] feature map,
// keys/values from a [token_dim, N] token matrix; output is added residually.
struct AttentionLayer {
  Var Wq, Wk, Wv, Wo;  // [dk,C], [dk,D], [dk,D], [C,dk]
  int heads = 1;
  int dk = 8;
  AttentionLayer() = default;
  AttentionLayer(int channels, int token_dim, int dk, int heads, Rng& rng);
  // Returns x + Wo * Attn(Wq x, Wk tok, Wv tok). tokens: [D, N].
  Var forward(const Var& x, const Var& tokens) const;
  // Attention weights for the last forward (test hook), rows sum to 1.
  Var attention_matrix(const Var& x, const Var& tokens) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Gated recurrent cell; weights packed per gate.
struct GruCell {
  LinearLayer wz, wr, wn;  // input projections
  LinearLayer uz, ur, un;  // hidden projections
  int hidden = 0;
  GruCell() = default;
  GruCell(int input_dim, int hidden_dim, Rng& rng);
  Var step(const Var& x, const Var& h) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Runs a GRU over a sequence (vector of [in] Vars); returns hidden per step.
std::vector<Var> gru_run(const GruCell& cell, const std::vector<Var>& xs, bool reverse);

// ---- init helpers ----
Tensor randn_tensor(std::vector<int> shape, Rng& rng, double stddev);

// ---- optimizer ----
class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t t() const { return t_; }
  const std::vector<Var>& params() const { return params_; }
  // Serialized optimizer moments (for bit-reproducible resume).
  std::vector<Tensor> state() const;
  void load_state(const std::vector<Tensor>& s, int64_t t);

 private:
  std::vector<Var> params_;
  std::vector<Eigen::ArrayXd> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

// Sinusoidal position encoding (pre-MLP), dim must be even.
Tensor sinusoidal_embedding(int t, int dim);

// CTC loss (negative log-likelihood) of a label sequence under [T,C] logits.
// blank is the last class. Returns a scalar Var wired into the graph.
Var ctc_loss(const Var& logits, const std::vector<int>& label, int blank);

// Greedy CTC decode of [T,C] log-probabilities (or logits): argmax per step,
// collapse repeats, drop blanks. Returns class ids and, for each emitted
// symbol, the max softmax probability over its run.
struct CtcDecodeResult {
  std::vector<int> ids;
  std::vector<double> step_probs;
};
CtcDecodeResult ctc_greedy_decode(const Tensor& logits, int blank);

}  // namespace whisperer::nn
