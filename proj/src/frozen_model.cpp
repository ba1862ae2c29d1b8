#include "whisperer/frozen_model.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>

#include <opencv2/imgcodecs.hpp>

#include "whisperer/core/digest.hpp"
#include "whisperer/core/rng.hpp"
#include "whisperer/nn/checkpoint.hpp"
#include "whisperer/nn/layers.hpp"

namespace whisperer {

using namespace nn;

double confidence_of(const std::vector<double>& per_step_probs) {
  if (per_step_probs.empty()) return 0.0;
  double log_sum = 0.0;
  for (double p : per_step_probs) {
    if (p < 0.0 || p > 1.0) throw std::out_of_range("confidence_of: prob outside [0,1]");
    if (p == 0.0) return 0.0;
    log_sum += std::log(p);
  }
  return std::exp(log_sum / static_cast<double>(per_step_probs.size()));
}

nlohmann::json CrnnConfig::to_json() const {
  return nlohmann::json{{"height", height},
                        {"width", width},
                        {"charset", charset},
                        {"conv_channels", conv_channels},
                        {"gru_hidden", gru_hidden},
                        {"batch_size", batch_size},
                        {"learning_rate", learning_rate},
                        {"epochs", epochs},
                        {"target_val_cer", target_val_cer},
                        {"seed", seed}};
}

CrnnConfig CrnnConfig::from_json(const nlohmann::json& j) {
  CrnnConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.charset = j.value("charset", c.charset);
  c.conv_channels = j.value("conv_channels", c.conv_channels);
  c.gru_hidden = j.value("gru_hidden", c.gru_hidden);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.target_val_cer = j.value("target_val_cer", c.target_val_cer);
  c.seed = j.value("seed", c.seed);
  return c;
}

// Convolutional-recurrent recognizer: 4 conv blocks with height pooling, a
// bidirectional GRU over the column sequence, per-column softmax over
// charset+blank, greedy CTC decoding.
class CrnnModel {
 public:
  CrnnModel(const CrnnConfig& cfg, Rng rng) : cfg_(cfg) {
    const auto& ch = cfg.conv_channels;
    if (ch.size() != 4) throw std::invalid_argument("CrnnModel: need 4 conv channels");
    conv_[0] = Conv2dLayer(ch[0], 1, 3, 1, 1, rng);
    conv_[1] = Conv2dLayer(ch[1], ch[0], 3, 1, 1, rng);
    conv_[2] = Conv2dLayer(ch[2], ch[1], 3, 1, 1, rng);
    conv_[3] = Conv2dLayer(ch[3], ch[2], 3, 1, 1, rng);
    for (int i = 0; i < 4; ++i) norm_[i] = GroupNormLayer(ch[i], std::min(4, ch[i]));
    const int feat = ch[3] * (cfg.height / 32);
    fwd_ = GruCell(feat, cfg.gru_hidden, rng);
    bwd_ = GruCell(feat, cfg.gru_hidden, rng);
    out_ = LinearLayer(num_classes(), 2 * cfg.gru_hidden, rng);
  }

  int num_classes() const { return static_cast<int>(cfg_.charset.size()) + 1; }
  int blank() const { return static_cast<int>(cfg_.charset.size()); }
  int seq_len() const { return cfg_.width / 8; }
  const CrnnConfig& config() const { return cfg_; }

  Var forward(const Var& image) const {
    Var x = avg_pool2(image);  // fixed 2x downsample stem
    x = max_pool(relu(norm_[0].forward(conv_[0].forward(x))), 2, 2);
    x = max_pool(relu(norm_[1].forward(conv_[1].forward(x))), 2, 2);
    x = max_pool(relu(norm_[2].forward(conv_[2].forward(x))), 2, 1);
    x = max_pool(relu(norm_[3].forward(conv_[3].forward(x))), 2, 1);
    const int c = x->val.dim(0), h = x->val.dim(1), w = x->val.dim(2);
    Var seq = transpose2d(reshape(x, {c * h, w}));  // [T, C*h]
    std::vector<Var> cols(w);
    for (int t = 0; t < w; ++t) cols[t] = reshape(slice_rows(seq, t, t + 1), {c * h});
    std::vector<Var> hf = gru_run(fwd_, cols, false);
    std::vector<Var> hb = gru_run(bwd_, cols, true);
    std::vector<Var> logit_cols(w);
    for (int t = 0; t < w; ++t) {
      Var h2 = concat_cols({reshape(hf[t], {1, cfg_.gru_hidden}),
                            reshape(hb[t], {1, cfg_.gru_hidden})});
      logit_cols[t] = reshape(out_.forward(reshape(h2, {2 * cfg_.gru_hidden})),
                              {num_classes(), 1});
    }
    return transpose2d(concat_cols(logit_cols));  // [T, classes]
  }

  OcrResult recognize_impl(const Image& img) const {
    if (img.h != cfg_.height || img.w != cfg_.width) {
      throw std::invalid_argument("recognize: image shape mismatch, expected " +
                                  std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
    }
    Tensor t({1, img.h, img.w});
    std::copy(img.px.begin(), img.px.end(), t.data.data());
    Var logits = forward(constant(std::move(t)));
    CtcDecodeResult dec = ctc_greedy_decode(logits->val, blank());
    OcrResult res;
    for (int id : dec.ids) res.text.push_back(cfg_.charset[static_cast<size_t>(id)]);
    res.per_step_probs = dec.step_probs;
    res.confidence = confidence_of(dec.step_probs);
    return res;
  }

  ParamList params() const {
    ParamList out;
    for (int i = 0; i < 4; ++i) {
      conv_[i].collect(out, "conv" + std::to_string(i));
      norm_[i].collect(out, "norm" + std::to_string(i));
    }
    fwd_.collect(out, "gru_fwd");
    bwd_.collect(out, "gru_bwd");
    out_.collect(out, "out");
    return out;
  }

  std::vector<int> encode_label(const std::string& label) const {
    std::vector<int> ids;
    ids.reserve(label.size());
    for (char c : label) {
      const size_t pos = cfg_.charset.find(c);
      if (pos == std::string::npos) {
        throw std::invalid_argument("encode_label: character outside charset");
      }
      ids.push_back(static_cast<int>(pos));
    }
    return ids;
  }

 private:
  CrnnConfig cfg_;
  Conv2dLayer conv_[4];
  GroupNormLayer norm_[4];
  GruCell fwd_, bwd_;
  LinearLayer out_;
};

namespace {

class InternalFrozenModel : public FrozenModel {
 public:
  InternalFrozenModel(std::shared_ptr<CrnnModel> model, std::string hash)
      : model_(std::move(model)), hash_(std::move(hash)) {}

  OcrResult recognize(const Image& image) const override {
    return model_->recognize_impl(image);
  }
  std::string frozen_hash() const override { return hash_; }
  std::string kind() const override { return "internal"; }
  const std::string& charset() const override { return model_->config().charset; }
  const CrnnModel& model() const { return *model_; }

 private:
  std::shared_ptr<CrnnModel> model_;
  std::string hash_;
};

// Cached 8-bit copies keep the full training split in a few tens of MB.
struct CachedImage {
  std::vector<uint8_t> px;
  int h = 0, w = 0;
  std::string label;

  Tensor tensor() const {
    Tensor t({1, h, w});
    for (size_t i = 0; i < px.size(); ++i) t.data[static_cast<int64_t>(i)] = px[i] / 255.0;
    return t;
  }
};

CachedImage cache_image(const Image& img, const std::string& label) {
  CachedImage c;
  c.h = img.h;
  c.w = img.w;
  c.label = label;
  c.px.resize(img.px.size());
  for (size_t i = 0; i < img.px.size(); ++i) {
    c.px[i] = static_cast<uint8_t>(std::lround(std::clamp(img.px[i], 0.0, 1.0) * 255.0));
  }
  return c;
}

double validation_cer(const CrnnModel& model, const std::vector<CachedImage>& val) {
  double total = 0.0;
  for (const auto& ci : val) {
    Var logits = model.forward(constant(ci.tensor()));
    CtcDecodeResult dec = ctc_greedy_decode(logits->val, model.blank());
    std::string text;
    for (int id : dec.ids) text.push_back(model.config().charset[static_cast<size_t>(id)]);
    total += cer(text, ci.label);
  }
  return val.empty() ? 1.0 : total / static_cast<double>(val.size());
}

}  // namespace

FrozenModelHandle train_frozen_ocr(const Manifest& manifest, const CrnnConfig& config,
                                   FrozenTrainReport* report) {
  auto model = std::make_shared<CrnnModel>(config, Rng(config.seed).child("crnn_init"));
  ParamList params = model->params();
  std::vector<Var> vars;
  for (auto& p : params) vars.push_back(p.var);
  Adam opt(vars, config.learning_rate);

  std::vector<CachedImage> train, val;
  for (const auto* e : manifest.split("train")) {
    train.push_back(cache_image(manifest.load_clean(*e), e->label));
  }
  for (const auto* e : manifest.split("heldout")) {
    val.push_back(cache_image(manifest.load_clean(*e), e->label));
  }
  if (train.size() < 8) throw std::runtime_error("train_frozen_ocr: insufficient data");

  Rng shuffle_rng = Rng(config.seed).child("crnn_shuffle");
  FrozenTrainReport rep;
  double smoothed = 0.0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<size_t> order(train.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);

    double epoch_loss = 0.0;
    int in_batch = 0;
    for (size_t step = 0; step < order.size(); ++step) {
      const CachedImage& ci = train[order[step]];
      Var logits = model->forward(constant(ci.tensor()));
      Var loss = ctc_loss(logits, model->encode_label(ci.label), model->blank());
      if (!std::isfinite(loss->val.data[0])) {
        throw std::runtime_error("train_frozen_ocr: non-finite loss (divergence)");
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
    smoothed = epoch_loss / static_cast<double>(train.size());
    const double vc = validation_cer(*model, val);
    rep.epoch_val_cer.push_back(vc);
    rep.epochs_run = epoch + 1;
    rep.final_loss = smoothed;
    std::cerr << "[train-frozen] epoch " << epoch + 1 << "/" << config.epochs
              << " loss=" << smoothed << " val_cer=" << vc << "\n";
    if (vc <= config.target_val_cer) break;
  }
  rep.clean_val_cer = rep.epoch_val_cer.empty() ? 1.0 : rep.epoch_val_cer.back();
  if (report) *report = rep;

  const std::string hash = params_digest(params);
  return std::make_shared<InternalFrozenModel>(model, hash);
}

void save_frozen_model(const FrozenModelHandle& handle, const std::string& path) {
  const auto* internal = dynamic_cast<const InternalFrozenModel*>(handle.get());
  if (!internal) throw std::invalid_argument("save_frozen_model: only internal models");
  Checkpoint ckpt;
  ckpt.meta = {{"kind", "crnn"},
               {"config", internal->model().config().to_json()},
               {"frozen_hash", internal->frozen_hash()}};
  ckpt.tensors = snapshot(internal->model().params());
  save_checkpoint(path, ckpt);
}

FrozenModelHandle load_frozen_model(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.meta.value("kind", "") != "crnn") {
    throw std::runtime_error("load_frozen_model: not a crnn checkpoint");
  }
  CrnnConfig cfg = CrnnConfig::from_json(ckpt.meta.at("config"));
  auto model = std::make_shared<CrnnModel>(cfg, Rng(0));
  load_into(ckpt, model->params());
  const std::string hash = params_digest(model->params());
  const std::string recorded = ckpt.meta.value("frozen_hash", hash);
  if (hash != recorded) {
    throw std::runtime_error("load_frozen_model: parameter digest mismatch");
  }
  return std::make_shared<InternalFrozenModel>(model, hash);
}

EvalSummary evaluate(const FrozenModelHandle& handle, const Manifest& manifest,
                     const std::string& split_name, const Preprocessor& preprocess) {
  std::vector<RewardRecord> records;
  for (const auto* e : manifest.split(split_name)) {
    const Image degraded = manifest.load_degraded(*e);
    Image processed = preprocess ? preprocess(degraded) : degraded;
    if (!processed.same_shape(degraded)) {
      throw std::runtime_error("evaluate: preprocessor changed image shape");
    }
    const OcrResult ocr = handle->recognize(processed);
    records.push_back(make_reward_record(ocr.text, e->label, ocr.confidence));
  }
  return summarize(std::move(records));
}

// ---------------- external adapter ----------------

namespace {

std::string base64_encode(const std::vector<uint8_t>& data) {
  static const char* table =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((data.size() + 2) / 3 * 4);
  for (size_t i = 0; i < data.size(); i += 3) {
    uint32_t v = data[i] << 16;
    if (i + 1 < data.size()) v |= data[i + 1] << 8;
    if (i + 2 < data.size()) v |= data[i + 2];
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(i + 1 < data.size() ? table[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < data.size() ? table[v & 63] : '=');
  }
  return out;
}

class ExternalOcrModel : public FrozenModel {
 public:
  ExternalOcrModel(const std::string& command, std::string charset, double timeout)
      : charset_(std::move(charset)), timeout_(timeout) {
    int to_child[2], from_child[2];
    if (pipe(to_child) != 0 || pipe(from_child) != 0) {
      throw std::runtime_error("external ocr: pipe failed");
    }
    pid_ = fork();
    if (pid_ < 0) throw std::runtime_error("external ocr: fork failed");
    if (pid_ == 0) {
      dup2(to_child[0], STDIN_FILENO);
      dup2(from_child[1], STDOUT_FILENO);
      close(to_child[0]);
      close(to_child[1]);
      close(from_child[0]);
      close(from_child[1]);
      execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(to_child[0]);
    close(from_child[1]);
    wfd_ = to_child[1];
    rfd_ = from_child[0];
    // The engine is a black box; the digest witnesses the endpoint identity.
    hash_ = sha256_hex(command.data(), command.size());
  }

  ~ExternalOcrModel() override {
    if (wfd_ >= 0) close(wfd_);
    if (rfd_ >= 0) close(rfd_);
    if (pid_ > 0) {
      kill(pid_, SIGTERM);
      int status = 0;
      waitpid(pid_, &status, 0);
    }
  }

  OcrResult recognize(const Image& image) const override {
    cv::Mat m(image.h, image.w, CV_8UC1);
    for (int y = 0; y < image.h; ++y) {
      for (int x = 0; x < image.w; ++x) {
        m.at<uint8_t>(y, x) =
            static_cast<uint8_t>(std::lround(std::clamp(image.at(y, x), 0.0, 1.0) * 255.0));
      }
    }
    std::vector<uint8_t> png;
    cv::imencode(".png", m, png);
    const std::string id = "req" + std::to_string(++req_counter_);
    nlohmann::json req{{"id", id}, {"png_b64", base64_encode(png)}};
    const std::string line = req.dump() + "\n";
    if (write(wfd_, line.data(), line.size()) != static_cast<ssize_t>(line.size())) {
      throw std::runtime_error("external ocr: write failed");
    }
    const std::string resp_line = read_line();
    nlohmann::json resp;
    try {
      resp = nlohmann::json::parse(resp_line);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("external ocr: non-JSON response line: ") + e.what());
    }
    if (resp.value("id", "") != id) {
      throw std::runtime_error("external ocr: response id mismatch");
    }
    OcrResult r;
    r.text = resp.at("text").get<std::string>();
    r.confidence = resp.at("confidence").get<double>();
    if (r.confidence < 0.0 || r.confidence > 1.0) {
      throw std::runtime_error("external ocr: confidence outside [0,1]");
    }
    return r;
  }

  std::string frozen_hash() const override { return hash_; }
  std::string kind() const override { return "external"; }
  const std::string& charset() const override { return charset_; }

 private:
  std::string read_line() const {
    std::string line;
    char c;
    const int timeout_ms = static_cast<int>(timeout_ * 1000.0);
    while (true) {
      struct pollfd pfd{rfd_, POLLIN, 0};
      const int pr = poll(&pfd, 1, timeout_ms);
      if (pr <= 0) throw std::runtime_error("external ocr: response timeout");
      const ssize_t got = read(rfd_, &c, 1);
      if (got <= 0) throw std::runtime_error("external ocr: adapter closed the stream");
      if (c == '\n') return line;
      line.push_back(c);
    }
  }

  std::string charset_;
  double timeout_;
  pid_t pid_ = -1;
  int wfd_ = -1, rfd_ = -1;
  std::string hash_;
  mutable uint64_t req_counter_ = 0;
};

}  // namespace

FrozenModelHandle connect_external_ocr(const std::string& command,
                                       const std::string& charset,
                                       double timeout_seconds) {
  return std::make_shared<ExternalOcrModel>(command, charset, timeout_seconds);
}

}  // namespace whisperer
