#pragma once

#include <string>
#include <vector>

#include "whisperer/core/image.hpp"

namespace whisperer {

// Unit-cost edit distance.
int levenshtein(const std::string& a, const std::string& b);

// Character error rate, clipped to [0,1]; truth must be non-empty.
double cer(const std::string& pred, const std::string& truth);
// Unclipped variant (can exceed 1 when the prediction is longer than truth).
double cer_raw(const std::string& pred, const std::string& truth);

// R = (1 - cer) * confidence; both inputs must lie in [0,1].
double reward(double cer_value, double confidence);

// Mean structural similarity. Gaussian window (11x11, sigma 1.5, shrunk to fit
// small images), K1=0.01, K2=0.03, data range 1. Windows fully inside the
// image (valid mode).
double ssim(const Image& a, const Image& b);

// Max absolute pixel difference.
double linf(const Image& a, const Image& b);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;  // two-sided
};

// Two-sided paired Student t-test on per-sample differences.
// Requires n >= 2 and non-identical diffs.
TTestResult paired_t_test(const std::vector<double>& diffs);

struct RewardRecord {
  double cer = 0.0;       // clipped
  double cer_raw = 0.0;   // unclipped
  double confidence = 0.0;
  double reward = 0.0;
};

RewardRecord make_reward_record(const std::string& pred, const std::string& truth,
                                double confidence);

struct EvalSummary {
  double mean_cer = 0.0;
  double mean_cer_raw = 0.0;
  double mean_confidence = 0.0;
  double mean_reward = 0.0;
  int n = 0;
  std::vector<RewardRecord> per_sample;
};

EvalSummary summarize(std::vector<RewardRecord> records);

}  // namespace whisperer
