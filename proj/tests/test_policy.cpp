#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "whisperer/policy.hpp"

using namespace whisperer;
using namespace whisperer::nn;

namespace {

PolicyConfig tiny_config() {
  PolicyConfig cfg;
  cfg.base_channels = 2;
  cfg.channel_multipliers = {1, 2, 2, 4};
  cfg.num_blocks = 4;
  cfg.timestep_embed_dim = 8;
  cfg.attention_dk = 4;
  cfg.global_dim = 6;
  cfg.token_channels = 5;
  cfg.diffusion_timesteps = 100;
  return cfg;
}

Var image_leaf(int h, int w, Rng& rng, bool grad = false) {
  Tensor t({1, h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t.data[i] = rng.uniform();
  return make_var(std::move(t), grad);
}

Var tokens_leaf(int d, int n, Rng& rng) {
  return make_var(randn_tensor({d, n}, rng, 1.0), false);
}

}  // namespace

TEST_CASE("timestep embedding closed form") {
  const Tensor e0 = timestep_embedding_raw(0, 16);
  for (int i = 0; i < 8; ++i) {
    CHECK(e0.data[i] == doctest::Approx(0.0));       // sin half
    CHECK(e0.data[8 + i] == doctest::Approx(1.0));   // cos half
  }
  for (int t : {1, 10, 100}) {
    const Tensor e = timestep_embedding_raw(t, 12);
    for (int i = 0; i < 6; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / 6.0);
      CHECK(e.data[i] == doctest::Approx(std::sin(t * freq)).epsilon(1e-12));
      CHECK(e.data[6 + i] == doctest::Approx(std::cos(t * freq)).epsilon(1e-12));
    }
  }
  const Tensor a = timestep_embedding_raw(17, 16);
  const Tensor b = timestep_embedding_raw(17, 16);
  CHECK((a.data == b.data).all());
  CHECK_THROWS_AS(timestep_embedding_raw(0, 7), std::invalid_argument);
}

TEST_CASE("film layer: neutral at init, annihilated gamma broadcasts beta") {
  Rng rng(1);
  FilmLayer fl(4, 6, rng);
  Var x = make_var(randn_tensor({4, 3, 5}, rng, 1.0), false);
  Var cond = make_var(randn_tensor({6}, rng, 1.0), false);
  Var y = fl.forward(x, cond);
  CHECK((y->val.data == x->val.data).all());  // zero-init projections

  // Force gamma == 0 (scale annihilation): 1 + proj == 0.
  fl.gamma_proj.b->val.data.setConstant(-1.0);
  fl.beta_proj.b->val.data.setConstant(0.37);
  Var y2 = fl.forward(x, constant(Tensor::zeros({6})));
  for (int64_t i = 0; i < y2->val.numel(); ++i) {
    CHECK(y2->val.data[i] == doctest::Approx(0.37));
  }
}

TEST_CASE("cross attention: single token, uniform tokens, 3-token oracle") {
  Rng rng(2);
  AttentionLayer attn(3, 4, 6, 1, rng);
  Var x = make_var(randn_tensor({3, 2, 2}, rng, 1.0), false);

  // Single token: attention weights are exactly 1.
  Var tok1 = tokens_leaf(4, 1, rng);
  Var A1 = attn.attention_matrix(x, tok1);
  for (int64_t i = 0; i < A1->val.numel(); ++i) CHECK(A1->val.data[i] == doctest::Approx(1.0));
  // Output = residual + Wo * (Wv * token) at every position.
  Var out1 = attn.forward(x, tok1);
  Eigen::VectorXd token(4);
  for (int i = 0; i < 4; ++i) token[i] = tok1->val.data[i];  // [4,1] column
  auto wv = as_matrix(attn.Wv->val, 6, 4);
  auto wo = as_matrix(attn.Wo->val, 3, 6);
  Eigen::VectorXd add_vec = wo * (wv * token);
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < 4; ++p) {
      CHECK(out1->val.data[c * 4 + p] ==
            doctest::Approx(x->val.data[c * 4 + p] + add_vec[c]).epsilon(1e-12));
    }
  }

  // N identical tokens behave like the single token.
  Tensor same({4, 3});
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) same.data[i * 3 + j] = tok1->val.data[i];
  Var out_same = attn.forward(x, make_var(same, false));
  for (int64_t i = 0; i < out1->val.numel(); ++i) {
    CHECK(out_same->val.data[i] == doctest::Approx(out1->val.data[i]).epsilon(1e-9));
  }

  // 3-token case against an explicit softmax(QK^T/sqrt(d)) computation.
  Var tok3 = tokens_leaf(4, 3, rng);
  Var A3 = attn.attention_matrix(x, tok3);
  auto wq = as_matrix(attn.Wq->val, 6, 3);
  auto wk = as_matrix(attn.Wk->val, 6, 4);
  Eigen::MatrixXd xf(3, 4);
  for (int c = 0; c < 3; ++c)
    for (int p = 0; p < 4; ++p) xf(c, p) = x->val.data[c * 4 + p];
  Eigen::MatrixXd tk(4, 3);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 3; ++j) tk(i, j) = tok3->val.data[i * 3 + j];
  Eigen::MatrixXd Q = (wq * xf).transpose();  // [HW=4, 6]
  Eigen::MatrixXd K = wk * tk;                // [6, 3]
  Eigen::MatrixXd S = Q * K / std::sqrt(6.0); // [4, 3]
  for (int r = 0; r < 4; ++r) {
    Eigen::ArrayXd row = S.row(r).array();
    row -= row.maxCoeff();
    Eigen::ArrayXd ex = row.exp();
    ex /= ex.sum();
    for (int c = 0; c < 3; ++c) {
      CHECK(A3->val.data[r * 3 + c] == doctest::Approx(ex[c]).epsilon(1e-9));
    }
  }
}

TEST_CASE("unet shape preservation and determinism") {
  Rng rng(3);
  PolicyNet net(tiny_config(), Rng(7));
  for (auto [h, w] : {std::pair{96, 304}, std::pair{48, 152}, std::pair{24, 80}}) {
    Var x = image_leaf(h, w, rng);
    Var x0 = image_leaf(h, w, rng);
    Var g = make_var(randn_tensor({6}, rng, 1.0), false);
    Var tok = tokens_leaf(5, 9, rng);
    Var out = net.forward(x, x0, 10, g, tok);
    CHECK(out->val.dim(0) == 1);
    CHECK(out->val.dim(1) == h);
    CHECK(out->val.dim(2) == w);
    Var out2 = net.forward(x, x0, 10, g, tok);
    CHECK((out->val.data == out2->val.data).all());
  }
}

TEST_CASE("zero-init head makes the fresh policy the zero update") {
  Rng rng(4);
  PolicyNet net(tiny_config(), Rng(11));
  Var x = image_leaf(32, 48, rng);
  Var g = make_var(randn_tensor({6}, rng, 1.0), false);
  Var tok = tokens_leaf(5, 6, rng);
  Var out = net.forward(x, x, 5, g, tok);
  CHECK(out->val.data.abs().maxCoeff() == 0.0);
}

TEST_CASE("film neutrality at init: conditioning on g equals unconditioned") {
  Rng rng(5);
  PolicyNet net(tiny_config(), Rng(13));
  // Randomize the head so outputs are nonzero.
  for (auto& p : net.params()) {
    if (p.name.rfind("head.", 0) == 0) {
      p.var->val = randn_tensor(p.var->val.shape, rng, 0.1);
    }
  }
  Var x = image_leaf(32, 48, rng);
  Var x0 = image_leaf(32, 48, rng);
  Var tok = tokens_leaf(5, 6, rng);
  Var g_random = make_var(randn_tensor({6}, rng, 2.0), false);
  Var g_zero = constant(Tensor::zeros({6}));
  Var with_g = net.forward(x, x0, 3, g_random, tok);
  Var without_g = net.forward(x, x0, 3, g_zero, tok);
  CHECK((with_g->val.data == without_g->val.data).all());
}

TEST_CASE("gradient flow: one step updates every parameter group") {
  Rng rng(6);
  PolicyConfig cfg = tiny_config();
  PolicyNet net(cfg, Rng(17));
  ParamList params = net.params();
  // Randomize the zero-init head so gradient reaches upstream groups in one step.
  for (auto& p : params) {
    if (p.name.rfind("head.", 0) == 0) p.var->val = randn_tensor(p.var->val.shape, rng, 0.2);
  }
  std::vector<Tensor> before;
  std::vector<Var> vars;
  for (auto& p : params) {
    before.push_back(p.var->val);
    vars.push_back(p.var);
  }
  Adam opt(vars, 1e-3);
  Var x = image_leaf(32, 48, rng);
  Var x0 = image_leaf(32, 48, rng);
  Var g = make_var(randn_tensor({6}, rng, 1.0), false);
  Var tok = tokens_leaf(5, 6, rng);
  Var out = net.forward(x, x0, 4, g, tok);
  Var loss = sum_squares(out);
  CHECK(loss->val.data[0] > 0.0);
  backward(loss);
  opt.step();
  for (size_t i = 0; i < params.size(); ++i) {
    const double delta = (params[i].var->val.data - before[i].data).abs().maxCoeff();
    INFO("parameter group ", params[i].name);
    CHECK(delta > 0.0);
  }
}

TEST_CASE("block-level finite-difference checks (film + cross-attention in situ)") {
  Rng rng(7);
  PolicyConfig cfg = tiny_config();
  PolicyNet net(cfg, Rng(19));
  ParamList params = net.params();
  for (auto& p : params) {
    if (p.name.rfind("head.", 0) == 0) p.var->val = randn_tensor(p.var->val.shape, rng, 0.2);
  }
  Var x = image_leaf(16, 32, rng);
  Var x0 = image_leaf(16, 32, rng);
  Var g = make_var(randn_tensor({6}, rng, 1.0), false);
  Var tok = tokens_leaf(5, 4, rng);
  auto build = [&] { return sum_squares(net.forward(x, x0, 9, g, tok)); };

  std::vector<Var> checked;
  for (auto& p : params) {
    if (p.name.find("film.gamma_proj.W") != std::string::npos ||
        p.name.find("attn.Wq") != std::string::npos ||
        p.name.find("attn.Wo") != std::string::npos) {
      checked.push_back(p.var);
    }
  }
  REQUIRE(!checked.empty());

  Var loss = build();
  zero_grad(checked);
  backward(loss);
  std::vector<Eigen::ArrayXd> analytic;
  for (auto& v : checked) {
    analytic.push_back(v->grad.numel() ? v->grad.data : Eigen::ArrayXd::Zero(v->val.numel()));
  }
  Rng pick(99);
  const double h = 1e-5;
  double worst = 0;
  for (size_t pi = 0; pi < checked.size(); ++pi) {
    for (int s = 0; s < 3; ++s) {
      const int64_t i =
          static_cast<int64_t>(pick.uniform_int(static_cast<uint64_t>(checked[pi]->val.numel())));
      const double orig = checked[pi]->val.data[i];
      checked[pi]->val.data[i] = orig + h;
      const double up = build()->val.data[0];
      checked[pi]->val.data[i] = orig - h;
      const double dn = build()->val.data[0];
      checked[pi]->val.data[i] = orig;
      const double numeric = (up - dn) / (2 * h);
      const double a = analytic[pi][i];
      worst = std::max(worst,
                       std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("policy checkpoint round trip with stage tag") {
  PolicyConfig cfg = tiny_config();
  PolicyCheckpoint ckpt;
  ckpt.net = std::make_shared<PolicyNet>(cfg, Rng(23));
  ckpt.config = cfg;
  ckpt.stage = 2;
  ckpt.seed = 77;
  const std::string digest = ckpt.digest();
  save_policy(ckpt, "/tmp/wsp_policy_test.ckpt");
  const PolicyCheckpoint loaded = load_policy("/tmp/wsp_policy_test.ckpt");
  CHECK(loaded.stage == 2);
  CHECK(loaded.seed == 77);
  CHECK(loaded.digest() == digest);
  CHECK(loaded.config.base_channels == cfg.base_channels);
}

TEST_CASE("policy config validation") {
  PolicyConfig bad = tiny_config();
  bad.channel_multipliers = {4, 2, 1, 1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  PolicyConfig bad2 = tiny_config();
  bad2.epsilon = 0.0;
  CHECK_THROWS_AS(bad2.validate(), std::invalid_argument);
}
