#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "whisperer/corpus.hpp"
#include "whisperer/encoder.hpp"
#include "whisperer/frozen_model.hpp"
#include "whisperer/metrics.hpp"
#include "whisperer/policy.hpp"
#include "whisperer/refine.hpp"

namespace whisperer {

struct StageConfig {
  int stage = 1;
  int epochs = 2;
  double learning_rate = 2e-4;
  int batch_size = 8;
  // stage 3 only
  int seeds_per_image = 5;
  double noise_scale = 0.05;
  bool retain_all = false;
  // stage 4 only
  std::string reward_baseline_mode = "original";  // none | original

  void validate() const;
  nlohmann::json to_json() const;
  static StageConfig from_json(const nlohmann::json& j);
};

struct CurriculumConfig {
  PolicyConfig policy;
  StageConfig stage1{1, 2, 2e-4};
  StageConfig stage2{2, 2, 2e-4};
  StageConfig stage3{3, 1, 1e-4};
  StageConfig stage4{4, 3, 1e-5};
  int refine_steps = 5;
  bool trainable_pe = false;  // ablation switch; default frozen
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static CurriculumConfig from_json(const nlohmann::json& j);
};

struct BootstrapPair {
  Image degraded;
  Image improved_target;
  double r_orig = 0.0;
  double r_improved = 0.0;
  std::string image_id;
  int source_seed = 0;
  int source_step = 0;
};

struct BootstrapDataset {
  std::vector<BootstrapPair> pairs;
  std::string run_id;
  std::string frozen_model_hash;
  std::string policy_hash;
  int images_explored = 0;
  double selection_rate = 0.0;  // retained images / explored images
};

// Raised when stochastic exploration finds no improving intermediate.
class BootstrapEmptyError : public std::runtime_error {
 public:
  explicit BootstrapEmptyError(const std::string& what) : std::runtime_error(what) {}
};

struct StageTrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> step_loss;  // smoothed per-step losses (cloning gate)
};

// Stage 1: denoising-diffusion distribution learning on clean images.
PolicyCheckpoint stage1_train(const Manifest& manifest, const CurriculumConfig& cfg,
                              StageTrainLog* log = nullptr);

// Stage 2: degradation inversion — same objective conditioned on the degraded
// image (channel concat + PE features). Warm-starts from the stage-1 weights.
PolicyCheckpoint stage2_train(const Manifest& manifest, const PolicyCheckpoint& stage1,
                              const EncoderHandle& encoder, const CurriculumConfig& cfg,
                              StageTrainLog* log = nullptr);

// Stage 3: stochastic bootstrap + behavioral cloning. Explores heldout images
// with seeded noise, retains improving intermediates, clones them with L2.
std::pair<BootstrapDataset, PolicyCheckpoint> stage3_bootstrap(
    const Manifest& manifest, const PolicyCheckpoint& stage2,
    const FrozenModelHandle& frozen, const EncoderHandle& encoder,
    const CurriculumConfig& cfg, const std::string& archive_dir = "",
    StageTrainLog* log = nullptr);

// Stage 4: reward-weighted refinement (loss -w * sum_k ||delta_k||^2 with
// w = R or R - R_orig). Keeps the best heldout-reward weights across epochs.
PolicyCheckpoint stage4_refine(const Manifest& manifest, const PolicyCheckpoint& stage3,
                               const FrozenModelHandle& frozen, const EncoderHandle& encoder,
                               const CurriculumConfig& cfg, StageTrainLog* log = nullptr);

struct PolicyEvalResult {
  EvalSummary summary;
  double mean_final_linf = 0.0;
  double ssim_violation_rate = 0.0;
};

// Evaluates deterministic K-step refinement as a preprocessor over a split.
PolicyEvalResult evaluate_policy(const FrozenModelHandle& frozen, const Manifest& manifest,
                                 const std::string& split_name, const PolicyNet& policy,
                                 const EncoderHandle& encoder, int steps, double epsilon);

struct CurriculumResult {
  PolicyCheckpoint final_checkpoint;
  std::vector<EvalSummary> stage_evals;  // heldout summary after each stage
};

// Runs stages 1..4 with checkpointing under run_dir/stageN; stages whose
// checkpoints already exist are loaded, so interrupted runs resume at stage
// boundaries with identical results.
CurriculumResult run_curriculum(const Manifest& manifest, const FrozenModelHandle& frozen,
                                const EncoderHandle& encoder, const CurriculumConfig& cfg,
                                const std::string& run_dir);

// Bootstrap archive I/O (PNG pairs + JSONL index).
void save_bootstrap(const BootstrapDataset& ds, const std::string& dir);
BootstrapDataset load_bootstrap(const std::string& dir);

}  // namespace whisperer
