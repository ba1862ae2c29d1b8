#pragma once

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "whisperer/core/image.hpp"
#include "whisperer/corpus.hpp"
#include "whisperer/metrics.hpp"

namespace whisperer {

struct OcrResult {
  std::string text;
  double confidence = 0.0;          // [0,1]
  std::vector<double> per_step_probs;  // per emitted symbol, optional
};

// Geometric mean of per-step probabilities; empty -> 0.
double confidence_of(const std::vector<double>& per_step_probs);

struct CrnnConfig {
  int height = 96;
  int width = 304;
  std::string charset = kDefaultCharset;
  std::vector<int> conv_channels = {16, 32, 48, 64};
  int gru_hidden = 96;
  int batch_size = 8;
  double learning_rate = 1e-3;
  int epochs = 16;
  double target_val_cer = 0.03;  // early stop once clean validation reaches this
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static CrnnConfig from_json(const nlohmann::json& j);
};

class CrnnModel;  // internal recognizer

// A frozen recognizer: either the in-repo CRNN or an external engine speaking
// the line-delimited JSON protocol. After freezing, parameters never change;
// frozen_hash() witnesses that.
class FrozenModel {
 public:
  virtual ~FrozenModel() = default;
  virtual OcrResult recognize(const Image& image) const = 0;
  virtual std::string frozen_hash() const = 0;
  virtual std::string kind() const = 0;
  virtual const std::string& charset() const = 0;
};

using FrozenModelHandle = std::shared_ptr<const FrozenModel>;

struct FrozenTrainReport {
  double clean_val_cer = 0.0;
  double final_loss = 0.0;
  int epochs_run = 0;
  std::vector<double> epoch_val_cer;
};

// Trains the internal CRNN on *clean* images of the train split with CTC loss
// and freezes it. Validation runs on the heldout split's clean images.
FrozenModelHandle train_frozen_ocr(const Manifest& manifest, const CrnnConfig& config,
                                   FrozenTrainReport* report = nullptr);

void save_frozen_model(const FrozenModelHandle& handle, const std::string& path);
FrozenModelHandle load_frozen_model(const std::string& path);

// Runs `recognize(preprocess(degraded))` against ground truth over a split.
using Preprocessor = std::function<Image(const Image&)>;
EvalSummary evaluate(const FrozenModelHandle& handle, const Manifest& manifest,
                     const std::string& split_name, const Preprocessor& preprocess);

// External OCR adapter: spawns `command` and exchanges one JSON object per
// line. Request {"id","png_b64"}; response {"id","text","confidence"}.
FrozenModelHandle connect_external_ocr(const std::string& command,
                                       const std::string& charset,
                                       double timeout_seconds = 10.0);

}  // namespace whisperer
