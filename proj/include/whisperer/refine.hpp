#pragma once

#include <vector>

#include "whisperer/core/image.hpp"
#include "whisperer/encoder.hpp"
#include "whisperer/policy.hpp"

namespace whisperer {

// Cosine noise schedule: alpha_bar[i] = f(i+1)/f(0) with
// f(u) = cos^2(((u/T + s)/(1 + s)) * pi/2), s = 0.008. Monotone decreasing,
// alpha_bar[0] close to 1.
std::vector<double> cosine_schedule(int T);

// K evenly spaced schedule indices, descending from T-1 to 0 (K=1 -> {T-1}).
std::vector<int> refine_timesteps(int T, int K);

struct RefineStep {
  int t = 0;                      // schedule index fed to the policy
  double delta_preclamp_norm = 0; // L2 norm of the raw update before clamping
  Image x_after;
};

struct RefineTrace {
  Image x0;
  std::vector<RefineStep> steps;
  double noise_scale = 0.0;
  uint64_t seed = 0;
  double final_linf = 0.0;   // cumulative ||x_K - x0||_inf
  double final_ssim = 1.0;   // SSIM(x_K, x0)
  bool ssim_violation = false;  // final_ssim below the fidelity threshold

  const Image& output() const { return steps.empty() ? x0 : steps.back().x_after; }
};

struct RefineOptions {
  int steps = 5;
  double epsilon = 0.1;
  double noise_scale = 0.0;  // 0 -> deterministic
  uint64_t seed = 0;
  bool cumulative_ball = false;  // also project onto the eps-ball around x0
  double ssim_threshold = 0.95;
};

// Runs the policy for K steps: delta = clamp(policy(x_t, t, PE(x0)), -eps, eps)
// (plus seeded Gaussian exploration noise when noise_scale > 0), then
// x <- clamp(x + delta, 0, 1). The PE is computed exactly once, on x0.
RefineTrace refine(const Image& x0, const PolicyNet& policy, const EncoderHandle& encoder,
                   const RefineOptions& opts);

// Graph-mode refinement for training: gradients flow through every step.
// Returns the final state and the clamped per-step deltas.
struct RefineGraph {
  nn::Var output;                 // [1,H,W]
  std::vector<nn::Var> deltas;    // clamped updates, one per step
};
RefineGraph refine_graph(const PolicyNet& policy, const nn::Var& x0, const nn::Var& global_vec,
                         const nn::Var& tokens, int K, double epsilon, int schedule_T);

}  // namespace whisperer
