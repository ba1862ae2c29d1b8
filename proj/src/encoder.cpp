#include "whisperer/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "whisperer/core/rng.hpp"
#include "whisperer/metrics.hpp"
#include "whisperer/nn/checkpoint.hpp"

namespace whisperer {

using namespace nn;

nlohmann::json EncoderConfig::to_json() const {
  return nlohmann::json{{"height", height},
                        {"width", width},
                        {"channels", channels},
                        {"bottleneck_channels", bottleneck_channels},
                        {"batch_size", batch_size},
                        {"learning_rate", learning_rate},
                        {"epochs", epochs},
                        {"target_val_ssim", target_val_ssim},
                        {"seed", seed}};
}

EncoderConfig EncoderConfig::from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  c.bottleneck_channels = j.value("bottleneck_channels", c.bottleneck_channels);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.target_val_ssim = j.value("target_val_ssim", c.target_val_ssim);
  c.seed = j.value("seed", c.seed);
  return c;
}

// Plain convolutional autoencoder at /16; no skip connections, so the
// bottleneck alone carries the reconstruction.
class ConvAutoEncoder {
 public:
  ConvAutoEncoder(const EncoderConfig& cfg, Rng rng) : cfg_(cfg) {
    if (cfg.channels.size() != 3) throw std::invalid_argument("encoder: need 3 widths");
    const int c0 = cfg.channels[0], c1 = cfg.channels[1], c2 = cfg.channels[2];
    const int d = cfg.bottleneck_channels;
    enc_[0] = Conv2dLayer(c0, 1, 3, 2, 1, rng);
    enc_[1] = Conv2dLayer(c1, c0, 3, 2, 1, rng);
    enc_[2] = Conv2dLayer(c2, c1, 3, 2, 1, rng);
    enc_[3] = Conv2dLayer(d, c2, 3, 2, 1, rng);
    enorm_[0] = GroupNormLayer(c0, std::min(4, c0));
    enorm_[1] = GroupNormLayer(c1, std::min(4, c1));
    enorm_[2] = GroupNormLayer(c2, std::min(4, c2));
    dec_[0] = Conv2dLayer(c2, d, 3, 1, 1, rng);
    dec_[1] = Conv2dLayer(c1, c2, 3, 1, 1, rng);
    dec_[2] = Conv2dLayer(c0, c1, 3, 1, 1, rng);
    dec_[3] = Conv2dLayer(1, c0, 3, 1, 1, rng);
    dnorm_[0] = GroupNormLayer(c2, std::min(4, c2));
    dnorm_[1] = GroupNormLayer(c1, std::min(4, c1));
    dnorm_[2] = GroupNormLayer(c0, std::min(4, c0));
  }

  Var bottleneck(const Var& x) const {
    Var h = silu(enorm_[0].forward(enc_[0].forward(x)));
    h = silu(enorm_[1].forward(enc_[1].forward(h)));
    h = silu(enorm_[2].forward(enc_[2].forward(h)));
    return enc_[3].forward(h);
  }

  Var decode(const Var& z, int out_h, int out_w) const {
    Var h = silu(dnorm_[0].forward(dec_[0].forward(upsample_nearest2(z))));
    h = crop(h, out_h / 8, out_w / 8);
    h = silu(dnorm_[1].forward(dec_[1].forward(upsample_nearest2(h))));
    h = crop(h, out_h / 4, out_w / 4);
    h = silu(dnorm_[2].forward(dec_[2].forward(upsample_nearest2(h))));
    h = crop(h, out_h / 2, out_w / 2);
    h = dec_[3].forward(upsample_nearest2(h));
    return sigmoid_v(crop(h, out_h, out_w));
  }

  Var reconstruct_var(const Var& x) const {
    return decode(bottleneck(x), x->val.dim(1), x->val.dim(2));
  }

  ParamList params() const {
    ParamList out;
    for (int i = 0; i < 4; ++i) enc_[i].collect(out, "enc" + std::to_string(i));
    for (int i = 0; i < 3; ++i) enorm_[i].collect(out, "enorm" + std::to_string(i));
    for (int i = 0; i < 4; ++i) dec_[i].collect(out, "dec" + std::to_string(i));
    for (int i = 0; i < 3; ++i) dnorm_[i].collect(out, "dnorm" + std::to_string(i));
    return out;
  }

  const EncoderConfig& config() const { return cfg_; }

 private:
  EncoderConfig cfg_;
  Conv2dLayer enc_[4], dec_[4];
  GroupNormLayer enorm_[3], dnorm_[3];
};

namespace {

Var image_var(const Image& img) {
  Tensor t({1, img.h, img.w});
  std::copy(img.px.begin(), img.px.end(), t.data.data());
  return constant(std::move(t));
}

Image net_reconstruct(const std::shared_ptr<ConvAutoEncoder>& net, const Image& img) {
  Var r = net->reconstruct_var(image_var(img));
  Image out(img.h, img.w);
  std::copy(r->val.data.data(), r->val.data.data() + r->val.numel(), out.px.begin());
  return out;
}

}  // namespace

EncoderHandle::EncoderHandle(std::shared_ptr<ConvAutoEncoder> net, std::string hash)
    : net_(std::move(net)), hash_(std::move(hash)) {}

PEFeatures EncoderHandle::encode(const Image& image) const {
  if (image.h % 16 != 0 || image.w % 16 != 0) {
    throw std::invalid_argument("encode: image dims must be divisible by 16");
  }
  ++encode_calls_;
  Var z = net_->bottleneck(image_var(image));
  PEFeatures f;
  f.spatial_grid = z->val;
  Var g = mean_spatial(z);
  f.global_vec = g->val;
  return f;
}

std::pair<Var, Var> EncoderHandle::encode_graph(const Var& image) const {
  ++encode_calls_;
  Var z = net_->bottleneck(image);
  return {mean_spatial(z), z};
}

Image EncoderHandle::reconstruct(const Image& image) const {
  Var r = net_->reconstruct_var(image_var(image));
  Image out(image.h, image.w);
  std::copy(r->val.data.data(), r->val.data.data() + r->val.numel(), out.px.begin());
  return out;
}

std::string EncoderHandle::current_digest() const { return params_digest(net_->params()); }
int EncoderHandle::global_dim() const { return net_->config().bottleneck_channels; }
int EncoderHandle::spatial_channels() const { return net_->config().bottleneck_channels; }
ParamList EncoderHandle::params() const { return net_->params(); }
const EncoderConfig& EncoderHandle::config() const { return net_->config(); }

EncoderHandlePtr train_encoder(const Manifest& manifest, const EncoderConfig& config,
                               EncoderTrainReport* report) {
  auto net = std::make_shared<ConvAutoEncoder>(config, Rng(config.seed).child("pe_init"));
  ParamList params = net->params();
  std::vector<Var> vars;
  for (auto& p : params) vars.push_back(p.var);
  Adam opt(vars, config.learning_rate);

  std::vector<Image> train, val;
  for (const auto* e : manifest.split("train")) train.push_back(manifest.load_clean(*e));
  for (const auto* e : manifest.split("heldout")) val.push_back(manifest.load_clean(*e));
  if (train.empty()) throw std::runtime_error("train_encoder: no clean images");

  auto val_ssim = [&] {
    double total = 0.0;
    for (const auto& img : val) total += ssim(net_reconstruct(net, img), img);
    return val.empty() ? 0.0 : total / static_cast<double>(val.size());
  };

  Rng shuffle_rng = Rng(config.seed).child("pe_shuffle");
  EncoderTrainReport rep;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
    double epoch_loss = 0.0;
    int in_batch = 0;
    for (size_t step = 0; step < order.size(); ++step) {
      Var x = image_var(train[order[step]]);
      Var loss = mse(net->reconstruct_var(x), x);
      if (!std::isfinite(loss->val.data[0])) {
        throw std::runtime_error("train_encoder: non-finite loss (divergence)");
      }
      backward(loss);
      epoch_loss += loss->val.data[0];
      if (++in_batch == config.batch_size || step + 1 == order.size()) {
        for (auto& v : vars) {
          if (v->grad.numel()) v->grad.data /= static_cast<double>(in_batch);
        }
        opt.step();
        zero_grad(vars);
        in_batch = 0;
      }
    }
    rep.final_loss = epoch_loss / static_cast<double>(train.size());
    rep.val_ssim = val_ssim();
    rep.epochs_run = epoch + 1;
    std::cerr << "[train-encoder] epoch " << epoch + 1 << "/" << config.epochs
              << " loss=" << rep.final_loss << " val_ssim=" << rep.val_ssim << "\n";
    if (rep.val_ssim >= config.target_val_ssim) break;
  }
  if (report) *report = rep;
  return std::make_shared<EncoderHandle>(net, params_digest(params));
}

void save_encoder(const EncoderHandlePtr& handle, const std::string& path) {
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "pe_autoencoder"},
               {"config", handle->config().to_json()},
               {"frozen_hash", handle->frozen_hash()}};
  ckpt.tensors = snapshot(handle->params());
  save_checkpoint(path, ckpt);
}

EncoderHandlePtr load_encoder(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "pe_autoencoder") {
    throw std::runtime_error("load_encoder: wrong checkpoint kind");
  }
  EncoderConfig cfg = EncoderConfig::from_json(ckpt.meta.at("config"));
  auto net = std::make_shared<ConvAutoEncoder>(cfg, Rng(0));
  load_into(ckpt, net->params());
  const std::string hash = params_digest(net->params());
  if (hash != ckpt.meta.value("frozen_hash", hash)) {
    throw std::runtime_error("load_encoder: parameter digest mismatch");
  }
  return std::make_shared<EncoderHandle>(net, hash);
}

}  // namespace whisperer
