#include "whisperer/policy.hpp"

#include <stdexcept>

#include "whisperer/nn/checkpoint.hpp"

namespace whisperer {

using namespace nn;

void PolicyConfig::validate() const {
  if (base_channels < 1) throw std::invalid_argument("PolicyConfig: base_channels < 1");
  if (static_cast<int>(channel_multipliers.size()) != num_blocks) {
    throw std::invalid_argument("PolicyConfig: multipliers must match num_blocks");
  }
  for (size_t i = 1; i < channel_multipliers.size(); ++i) {
    if (channel_multipliers[i] < channel_multipliers[i - 1]) {
      throw std::invalid_argument("PolicyConfig: multipliers must be non-decreasing");
    }
  }
  if (epsilon <= 0.0) throw std::invalid_argument("PolicyConfig: epsilon must be positive");
  if (timestep_embed_dim % 2 != 0) {
    throw std::invalid_argument("PolicyConfig: timestep_embed_dim must be even");
  }
}

nlohmann::json PolicyConfig::to_json() const {
  return nlohmann::json{{"base_channels", base_channels},
                        {"channel_multipliers", channel_multipliers},
                        {"num_blocks", num_blocks},
                        {"timestep_embed_dim", timestep_embed_dim},
                        {"attention_heads", attention_heads},
                        {"attention_dk", attention_dk},
                        {"epsilon", epsilon},
                        {"diffusion_timesteps", diffusion_timesteps},
                        {"global_dim", global_dim},
                        {"token_channels", token_channels}};
}

PolicyConfig PolicyConfig::from_json(const nlohmann::json& j) {
  PolicyConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_multipliers = j.value("channel_multipliers", c.channel_multipliers);
  c.num_blocks = j.value("num_blocks", c.num_blocks);
  c.timestep_embed_dim = j.value("timestep_embed_dim", c.timestep_embed_dim);
  c.attention_heads = j.value("attention_heads", c.attention_heads);
  c.attention_dk = j.value("attention_dk", c.attention_dk);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.diffusion_timesteps = j.value("diffusion_timesteps", c.diffusion_timesteps);
  c.global_dim = j.value("global_dim", c.global_dim);
  c.token_channels = j.value("token_channels", c.token_channels);
  return c;
}

Tensor timestep_embedding_raw(int t, int dim) {
  if (t < 0) throw std::invalid_argument("timestep_embedding: t must be >= 0");
  return sinusoidal_embedding(t, dim);
}

namespace {
PolicyNet::ResBlock make_block(int cin, int cout, int temb_dim, int global_dim,
                               int token_dim, int dk, int heads, Rng& rng) {
  PolicyNet::ResBlock b;
  b.norm1 = GroupNormLayer(cin, std::min(4, cin));
  b.conv1 = Conv2dLayer(cout, cin, 3, 1, 1, rng);
  b.temb_proj = LinearLayer(cout, temb_dim, rng);
  b.norm2 = GroupNormLayer(cout, std::min(4, cout));
  b.film = FilmLayer(cout, global_dim, rng);
  b.conv2 = Conv2dLayer(cout, cout, 3, 1, 1, rng);
  b.has_skip = cin != cout;
  if (b.has_skip) b.skip = Conv2dLayer(cout, cin, 1, 1, 0, rng);
  b.attn = AttentionLayer(cout, token_dim, dk, heads, rng);
  return b;
}
}  // namespace

Var PolicyNet::ResBlock::forward(const Var& x, const Var& temb, const Var& global_vec,
                                 const Var& tokens) const {
  Var h = conv1.forward(silu(norm1.forward(x)));
  h = bias_chw(h, temb_proj.forward(temb));
  h = film.forward(norm2.forward(h), global_vec);
  h = conv2.forward(silu(h));
  Var res = has_skip ? skip.forward(x) : x;
  return attn.forward(add(res, h), tokens);
}

void PolicyNet::ResBlock::collect(ParamList& out, const std::string& prefix) const {
  norm1.collect(out, prefix + ".norm1");
  conv1.collect(out, prefix + ".conv1");
  temb_proj.collect(out, prefix + ".temb_proj");
  norm2.collect(out, prefix + ".norm2");
  film.collect(out, prefix + ".film");
  conv2.collect(out, prefix + ".conv2");
  if (has_skip) skip.collect(out, prefix + ".skip");
  attn.collect(out, prefix + ".attn");
}

PolicyNet::PolicyNet(const PolicyConfig& cfg, Rng rng) : cfg_(cfg) {
  cfg_.validate();
  const int td = cfg.timestep_embed_dim;
  temb_mlp1_ = LinearLayer(td, td, rng);
  temb_mlp2_ = LinearLayer(td, td, rng);

  std::vector<int> ch(cfg.num_blocks);
  for (int i = 0; i < cfg.num_blocks; ++i) ch[i] = cfg.base_channels * cfg.channel_multipliers[i];
  const int cb = ch.back();

  stem_ = Conv2dLayer(ch[0], 2, 3, 1, 1, rng);
  for (int i = 0; i < cfg.num_blocks; ++i) {
    enc_blocks_.push_back(make_block(ch[i], ch[i], td, cfg.global_dim, cfg.token_channels,
                                     cfg.attention_dk, cfg.attention_heads, rng));
    const int next = i + 1 < cfg.num_blocks ? ch[i + 1] : cb;
    downs_.push_back(Conv2dLayer(next, ch[i], 3, 2, 1, rng));
  }
  mid_block1_ = make_block(cb, cb, td, cfg.global_dim, cfg.token_channels, cfg.attention_dk,
                           cfg.attention_heads, rng);
  mid_self_attn_ = AttentionLayer(cb, cb, std::max(cfg.attention_dk, 16),
                                  cfg.attention_heads, rng);
  mid_block2_ = make_block(cb, cb, td, cfg.global_dim, cfg.token_channels, cfg.attention_dk,
                           cfg.attention_heads, rng);
  for (int i = cfg.num_blocks - 1; i >= 0; --i) {
    const int from = i + 1 < cfg.num_blocks ? ch[i + 1] : cb;
    ups_.push_back(Conv2dLayer(ch[i], from, 3, 1, 1, rng));
    dec_blocks_.push_back(make_block(2 * ch[i], ch[i], td, cfg.global_dim, cfg.token_channels,
                                     cfg.attention_dk, cfg.attention_heads, rng));
  }
  head_norm_ = GroupNormLayer(ch[0], std::min(4, ch[0]));
  head_ = Conv2dLayer(1, ch[0], 3, 1, 1, rng, /*zero_init=*/true);
}

Var PolicyNet::forward(const Var& x_t, const Var& x0, int t, const Var& global_vec,
                       const Var& tokens) const {
  if (x_t->val.ndim() != 3 || x_t->val.dim(0) != 1) {
    throw std::invalid_argument("PolicyNet: x_t must be [1,H,W]");
  }
  if (!x_t->val.same_shape(x0->val)) {
    throw std::invalid_argument("PolicyNet: x0 shape mismatch");
  }
  Var temb = constant(sinusoidal_embedding(t, cfg_.timestep_embed_dim));
  temb = temb_mlp2_.forward(silu(temb_mlp1_.forward(temb)));

  Var h = stem_.forward(concat_chan(x_t, x0));
  std::vector<Var> skips;
  for (size_t i = 0; i < enc_blocks_.size(); ++i) {
    h = enc_blocks_[i].forward(h, temb, global_vec, tokens);
    skips.push_back(h);
    h = downs_[i].forward(h);
  }
  h = mid_block1_.forward(h, temb, global_vec, tokens);
  h = mid_self_attn_.forward(h, reshape(h, {h->val.dim(0), h->val.dim(1) * h->val.dim(2)}));
  h = mid_block2_.forward(h, temb, global_vec, tokens);
  for (size_t i = 0; i < dec_blocks_.size(); ++i) {
    const Var& skip = skips[skips.size() - 1 - i];
    h = ups_[i].forward(upsample_nearest2(h));
    h = crop(h, skip->val.dim(1), skip->val.dim(2));
    h = dec_blocks_[i].forward(concat_chan(skip, h), temb, global_vec, tokens);
  }
  return head_.forward(silu(head_norm_.forward(h)));
}

Tensor PolicyNet::forward_plain(const Tensor& x_t, const Tensor& x0, int t,
                                const PEFeatures& pe) const {
  Var tokens = constant(Tensor({pe.spatial_grid.dim(0),
                                pe.spatial_grid.dim(1) * pe.spatial_grid.dim(2)},
                               pe.spatial_grid.data));
  Var out = forward(constant(x_t), constant(x0), t, constant(pe.global_vec), tokens);
  return out->val;
}

ParamList PolicyNet::params() const {
  ParamList out;
  temb_mlp1_.collect(out, "temb_mlp1");
  temb_mlp2_.collect(out, "temb_mlp2");
  stem_.collect(out, "stem");
  for (size_t i = 0; i < enc_blocks_.size(); ++i) {
    enc_blocks_[i].collect(out, "enc" + std::to_string(i));
    downs_[i].collect(out, "down" + std::to_string(i));
  }
  mid_block1_.collect(out, "mid1");
  mid_self_attn_.collect(out, "mid_attn");
  mid_block2_.collect(out, "mid2");
  for (size_t i = 0; i < dec_blocks_.size(); ++i) {
    ups_[i].collect(out, "up" + std::to_string(i));
    dec_blocks_[i].collect(out, "dec" + std::to_string(i));
  }
  head_norm_.collect(out, "head_norm");
  head_.collect(out, "head");
  return out;
}

std::string PolicyCheckpoint::digest() const { return params_digest(net->params()); }

void save_policy(const PolicyCheckpoint& ckpt, const std::string& path) {
  Checkpoint c;
  c.meta = {{"kind", "policy_unet"},
            {"config", ckpt.config.to_json()},
            {"stage", ckpt.stage},
            {"seed", ckpt.seed},
            {"training_log_ref", ckpt.training_log_ref}};
  c.tensors = snapshot(ckpt.net->params());
  save_checkpoint(path, c);
}

PolicyCheckpoint load_policy(const std::string& path) {
  Checkpoint c = load_checkpoint(path);
  if (c.meta.value("kind", "") != "policy_unet") {
    throw std::runtime_error("load_policy: wrong checkpoint kind");
  }
  PolicyCheckpoint ckpt;
  ckpt.config = PolicyConfig::from_json(c.meta.at("config"));
  ckpt.stage = c.meta.value("stage", 0);
  ckpt.seed = c.meta.value("seed", 0ULL);
  ckpt.training_log_ref = c.meta.value("training_log_ref", "");
  ckpt.net = std::make_shared<PolicyNet>(ckpt.config, Rng(0));
  load_into(c, ckpt.net->params());
  return ckpt;
}

}  // namespace whisperer
