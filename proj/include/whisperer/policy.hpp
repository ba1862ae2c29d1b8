#pragma once

#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <vector>

#include "whisperer/encoder.hpp"
#include "whisperer/nn/autograd.hpp"
#include "whisperer/nn/layers.hpp"

namespace whisperer {

struct PolicyConfig {
  int base_channels = 32;
  std::vector<int> channel_multipliers = {1, 2, 4, 8};
  int num_blocks = 4;
  int timestep_embed_dim = 64;
  int attention_heads = 1;
  int attention_dk = 8;
  double epsilon = 0.1;
  int diffusion_timesteps = 1000;
  int global_dim = 48;      // G of the perceptual encoder
  int token_channels = 48;  // d of the perceptual encoder

  void validate() const;
  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
};

// Encoder-decoder U-Net with skip concatenation. Every resolution block adds
// the timestep embedding, applies FiLM from the global PE vector and
// cross-attention over the spatial PE tokens; the bottleneck self-attends.
// The final convolution is zero-initialized, so the freshly built network is
// the zero update.
class PolicyNet {
 public:
  PolicyNet(const PolicyConfig& cfg, Rng rng);

  // x_t, x0: [1,H,W]; global: [G]; tokens: [d,N]. Returns [1,H,W] raw output
  // (noise prediction in stages 1-2, unclamped update afterwards).
  nn::Var forward(const nn::Var& x_t, const nn::Var& x0, int t, const nn::Var& global_vec,
                  const nn::Var& tokens) const;

  // Convenience value-level forward (no cond gradients).
  nn::Tensor forward_plain(const nn::Tensor& x_t, const nn::Tensor& x0, int t,
                           const PEFeatures& pe) const;

  nn::ParamList params() const;
  const PolicyConfig& config() const { return cfg_; }

  struct ResBlock {
    nn::GroupNormLayer norm1, norm2;
    nn::Conv2dLayer conv1, conv2, skip;
    bool has_skip = false;
    nn::LinearLayer temb_proj;
    nn::FilmLayer film;
    nn::AttentionLayer attn;
    nn::Var forward(const nn::Var& x, const nn::Var& temb, const nn::Var& global_vec,
                    const nn::Var& tokens) const;
    void collect(nn::ParamList& out, const std::string& prefix) const;
  };

 private:
  PolicyConfig cfg_;
  nn::LinearLayer temb_mlp1_, temb_mlp2_;
  nn::Conv2dLayer stem_;
  std::vector<ResBlock> enc_blocks_;
  std::vector<nn::Conv2dLayer> downs_;
  ResBlock mid_block1_, mid_block2_;
  nn::AttentionLayer mid_self_attn_;
  std::vector<nn::Conv2dLayer> ups_;
  std::vector<ResBlock> dec_blocks_;
  nn::GroupNormLayer head_norm_;
  nn::Conv2dLayer head_;
};

enum class CurriculumStage { kStage1 = 1, kStage2 = 2, kStage3 = 3, kStage4 = 4 };

struct PolicyCheckpoint {
  std::shared_ptr<PolicyNet> net;
  PolicyConfig config;
  int stage = 0;
  uint64_t seed = 0;
  std::string training_log_ref;

  std::string digest() const;
};

void save_policy(const PolicyCheckpoint& ckpt, const std::string& path);
PolicyCheckpoint load_policy(const std::string& path);

// Exposed block-level ops (spec surface; also used by tests).
nn::Tensor timestep_embedding_raw(int t, int dim);  // pre-MLP sinusoid

}  // namespace whisperer
