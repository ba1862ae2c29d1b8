#pragma once

#include <nlohmann/json.hpp>

#include <memory>
#include <string>

#include "whisperer/core/image.hpp"
#include "whisperer/corpus.hpp"
#include "whisperer/nn/autograd.hpp"
#include "whisperer/nn/layers.hpp"

namespace whisperer {

// Frozen perceptual-encoder output for one image: a pooled global vector and
// the pre-pool spatial feature grid, both computed from the original input.
struct PEFeatures {
  nn::Tensor global_vec;    // [G]
  nn::Tensor spatial_grid;  // [d, h, w]
};

struct EncoderConfig {
  int height = 96;
  int width = 304;
  std::vector<int> channels = {8, 16, 32};  // encoder widths before bottleneck
  int bottleneck_channels = 48;             // d; global dim G equals d (pooled)
  int batch_size = 8;
  double learning_rate = 1e-3;
  int epochs = 8;
  double target_val_ssim = 0.9;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static EncoderConfig from_json(const nlohmann::json& j);
};

class ConvAutoEncoder;

class EncoderHandle {
 public:
  EncoderHandle(std::shared_ptr<ConvAutoEncoder> net, std::string hash);

  PEFeatures encode(const Image& image) const;
  // Graph-mode encode for the trainable-PE ablation switch.
  std::pair<nn::Var, nn::Var> encode_graph(const nn::Var& image) const;
  Image reconstruct(const Image& image) const;

  std::string frozen_hash() const { return hash_; }
  // Recompute the digest from live parameters (frozenness checks).
  std::string current_digest() const;
  int global_dim() const;
  int spatial_channels() const;
  nn::ParamList params() const;
  const EncoderConfig& config() const;

  // Number of encode calls served (test instrumentation for the
  // encode-once-per-refinement contract).
  int64_t encode_calls() const { return encode_calls_; }

 private:
  std::shared_ptr<ConvAutoEncoder> net_;
  std::string hash_;
  mutable int64_t encode_calls_ = 0;
};

using EncoderHandlePtr = std::shared_ptr<EncoderHandle>;

struct EncoderTrainReport {
  double val_ssim = 0.0;
  double final_loss = 0.0;
  int epochs_run = 0;
};

// Trains the autoencoder on clean train images (MSE reconstruction), freezes
// the encoder half as the PE. Validation SSIM is measured on heldout cleans.
EncoderHandlePtr train_encoder(const Manifest& manifest, const EncoderConfig& config,
                               EncoderTrainReport* report = nullptr);

void save_encoder(const EncoderHandlePtr& handle, const std::string& path);
EncoderHandlePtr load_encoder(const std::string& path);

}  // namespace whisperer
