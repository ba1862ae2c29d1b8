#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "whisperer/metrics.hpp"
#include "whisperer/refine.hpp"

using namespace whisperer;
using namespace whisperer::nn;

namespace {

PolicyConfig tiny_policy_config() {
  PolicyConfig cfg;
  cfg.base_channels = 2;
  cfg.channel_multipliers = {1, 2, 2, 4};
  cfg.timestep_embed_dim = 8;
  cfg.attention_dk = 4;
  cfg.global_dim = 8;
  cfg.token_channels = 8;
  cfg.diffusion_timesteps = 50;
  return cfg;
}

EncoderConfig tiny_encoder_config() {
  EncoderConfig cfg;
  cfg.height = 32;
  cfg.width = 48;
  cfg.channels = {2, 4, 8};
  cfg.bottleneck_channels = 8;
  return cfg;
}

Image random_image(int h, int w, uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (double& v : img.px) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("cosine schedule is decreasing, starts near 1, matches closed form") {
  const auto ab = cosine_schedule(1000);
  REQUIRE(ab.size() == 1000);
  CHECK(ab[0] > 0.99);
  for (size_t i = 1; i < ab.size(); ++i) CHECK(ab[i] < ab[i - 1]);

  const auto ab10 = cosine_schedule(10);
  const double s = 0.008;
  auto f = [&](double u) {
    const double c = std::cos(((u / 10.0 + s) / (1 + s)) * M_PI / 2);
    return c * c;
  };
  for (int i = 0; i < 10; ++i) {
    CHECK(ab10[static_cast<size_t>(i)] == doctest::Approx(f(i + 1) / f(0)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(cosine_schedule(0), std::invalid_argument);
}

TEST_CASE("refine timesteps are evenly spaced descending") {
  const auto t5 = refine_timesteps(1000, 5);
  CHECK(t5 == std::vector<int>{999, 749, 500, 250, 0});
  const auto t1 = refine_timesteps(1000, 1);
  CHECK(t1 == std::vector<int>{999});
  const auto t2 = refine_timesteps(50, 2);
  CHECK(t2 == std::vector<int>{49, 0});
  CHECK_THROWS_AS(refine_timesteps(10, 0), std::invalid_argument);
}

// The remaining tests need an encoder; build one by a minimal train call on a
// tiny synthetic manifest once, shared across cases.
namespace {

EncoderHandlePtr shared_encoder() {
  static EncoderHandlePtr handle = [] {
    namespace fs = std::filesystem;
    const std::string dir = (fs::temp_directory_path() / "wsp_refine_corpus").string();
    fs::remove_all(dir);
    CorpusConfig cc;
    cc.train_count = 2;
    cc.heldout_count = 2;
    cc.test_count = 1;
    cc.height = 32;
    cc.width = 48;
    cc.label_min_len = 3;
    cc.label_max_len = 4;
    cc.out_dir = dir;
    cc.seed = 5;
    const Manifest m = build_corpus(cc);
    EncoderConfig ec = tiny_encoder_config();
    ec.epochs = 1;
    ec.target_val_ssim = 2.0;  // never early-stops; single pass
    ec.seed = 3;
    return train_encoder(m, ec);
  }();
  return handle;
}

}  // namespace

TEST_CASE("zero-init policy refines to the exact identity") {
  PolicyNet net(tiny_policy_config(), Rng(3));
  const Image x0 = random_image(32, 48, 9);
  RefineOptions opts;
  opts.steps = 5;
  const RefineTrace trace = refine(x0, net, *shared_encoder(), opts);
  REQUIRE(trace.steps.size() == 5);
  CHECK(trace.output().px == x0.px);
  for (const auto& s : trace.steps) CHECK(s.x_after.px == x0.px);
  CHECK(trace.final_linf == 0.0);
  CHECK(trace.final_ssim == doctest::Approx(1.0));
  CHECK_FALSE(trace.ssim_violation);
}

TEST_CASE("random policies satisfy whisper bound and pixel range") {
  for (uint64_t net_seed = 1; net_seed <= 10; ++net_seed) {
    PolicyConfig cfg = tiny_policy_config();
    PolicyNet net(cfg, Rng(net_seed));
    // Random head so updates are nonzero.
    Rng hr(net_seed + 100);
    for (auto& p : net.params()) {
      if (p.name.rfind("head.", 0) == 0) p.var->val = randn_tensor(p.var->val.shape, hr, 0.6);
    }
    const Image x0 = random_image(32, 48, net_seed * 17);
    RefineOptions opts;
    opts.steps = 4;
    opts.epsilon = 0.1;
    opts.noise_scale = net_seed % 2 ? 0.1 : 0.0;
    opts.seed = net_seed;
    const RefineTrace trace = refine(x0, net, *shared_encoder(), opts);
    const Image* prev = &trace.x0;
    for (const auto& step : trace.steps) {
      CHECK(linf(step.x_after, *prev) <= 0.1 + 1e-6);
      CHECK_NOTHROW(check_pixel_range(step.x_after, "refine step"));
      prev = &step.x_after;
    }
  }
}

TEST_CASE("refine is deterministic given the seed, distinct across seeds") {
  PolicyConfig cfg = tiny_policy_config();
  PolicyNet net(cfg, Rng(5));
  Rng hr(55);
  for (auto& p : net.params()) {
    if (p.name.rfind("head.", 0) == 0) p.var->val = randn_tensor(p.var->val.shape, hr, 0.5);
  }
  const Image x0 = random_image(32, 48, 21);
  RefineOptions opts;
  opts.steps = 3;
  opts.noise_scale = 0.2;
  opts.seed = 42;
  const RefineTrace a = refine(x0, net, *shared_encoder(), opts);
  const RefineTrace b = refine(x0, net, *shared_encoder(), opts);
  CHECK(a.output().px == b.output().px);
  opts.seed = 43;
  const RefineTrace c = refine(x0, net, *shared_encoder(), opts);
  CHECK(a.output().px != c.output().px);
}

TEST_CASE("encoder is invoked exactly once per trace") {
  PolicyNet net(tiny_policy_config(), Rng(6));
  const Image x0 = random_image(32, 48, 31);
  EncoderHandlePtr enc = shared_encoder();
  RefineOptions opts;
  opts.steps = 5;
  const int64_t before = enc->encode_calls();
  refine(x0, net, *enc, opts);
  CHECK(enc->encode_calls() == before + 1);
}

TEST_CASE("cumulative-ball projection keeps total drift within epsilon") {
  PolicyConfig cfg = tiny_policy_config();
  PolicyNet net(cfg, Rng(8));
  Rng hr(88);
  for (auto& p : net.params()) {
    if (p.name.rfind("head.", 0) == 0) p.var->val = randn_tensor(p.var->val.shape, hr, 1.0);
  }
  const Image x0 = random_image(32, 48, 77);
  RefineOptions opts;
  opts.steps = 6;
  opts.epsilon = 0.1;
  opts.cumulative_ball = true;
  const RefineTrace trace = refine(x0, net, *shared_encoder(), opts);
  CHECK(trace.final_linf <= 0.1 + 1e-9);
}

TEST_CASE("non-finite policy output is a hard failure") {
  PolicyConfig cfg = tiny_policy_config();
  PolicyNet net(cfg, Rng(9));
  for (auto& p : net.params()) {
    if (p.name == "head.W") p.var->val.data.setConstant(std::nan(""));
  }
  const Image x0 = random_image(32, 48, 13);
  RefineOptions opts;
  CHECK_THROWS_AS(refine(x0, net, *shared_encoder(), opts), std::runtime_error);
}

TEST_CASE("refine_graph matches value-level refine when deterministic") {
  PolicyConfig cfg = tiny_policy_config();
  PolicyNet net(cfg, Rng(10));
  Rng hr(101);
  for (auto& p : net.params()) {
    if (p.name.rfind("head.", 0) == 0) p.var->val = randn_tensor(p.var->val.shape, hr, 0.4);
  }
  const Image x0 = random_image(32, 48, 55);
  EncoderHandlePtr enc = shared_encoder();
  RefineOptions opts;
  opts.steps = 3;
  const RefineTrace trace = refine(x0, net, *enc, opts);

  const PEFeatures pe = enc->encode(x0);
  Tensor x0t({1, 32, 48});
  std::copy(x0.px.begin(), x0.px.end(), x0t.data.data());
  Var tokens = constant(
      Tensor({pe.spatial_grid.dim(0), pe.spatial_grid.dim(1) * pe.spatial_grid.dim(2)},
             pe.spatial_grid.data));
  const RefineGraph rg = refine_graph(net, constant(x0t), constant(pe.global_vec), tokens, 3,
                                      cfg.epsilon, cfg.diffusion_timesteps);
  for (int64_t i = 0; i < rg.output->val.numel(); ++i) {
    CHECK(rg.output->val.data[i] == doctest::Approx(trace.output().px[static_cast<size_t>(i)])
                                        .epsilon(1e-12));
  }
}
