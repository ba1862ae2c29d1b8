#include "whisperer/refine.hpp"

#include <cmath>
#include <stdexcept>

#include "whisperer/metrics.hpp"

namespace whisperer {

using namespace nn;

std::vector<double> cosine_schedule(int T) {
  if (T < 1) throw std::invalid_argument("cosine_schedule: T must be >= 1");
  const double s = 0.008;
  auto f = [&](double u) {
    const double v = std::cos(((u / T + s) / (1.0 + s)) * M_PI / 2.0);
    return v * v;
  };
  const double f0 = f(0.0);
  std::vector<double> ab(static_cast<size_t>(T));
  for (int i = 0; i < T; ++i) ab[static_cast<size_t>(i)] = f(i + 1.0) / f0;
  return ab;
}

std::vector<int> refine_timesteps(int T, int K) {
  if (K < 1) throw std::invalid_argument("refine_timesteps: K must be >= 1");
  std::vector<int> ts(static_cast<size_t>(K));
  if (K == 1) {
    ts[0] = T - 1;
    return ts;
  }
  for (int k = 0; k < K; ++k) {
    ts[static_cast<size_t>(k)] =
        static_cast<int>(std::lround(static_cast<double>(T - 1) *
                                     static_cast<double>(K - 1 - k) / (K - 1)));
  }
  return ts;
}

RefineTrace refine(const Image& x0, const PolicyNet& policy, const EncoderHandle& encoder,
                   const RefineOptions& opts) {
  check_pixel_range(x0, "refine input");
  if (opts.steps < 1) throw std::invalid_argument("refine: steps must be >= 1");
  const int T = policy.config().diffusion_timesteps;
  const std::vector<double> ab = cosine_schedule(T);
  const std::vector<int> ts = refine_timesteps(T, opts.steps);

  const PEFeatures pe = encoder.encode(x0);

  Tensor x0t({1, x0.h, x0.w});
  std::copy(x0.px.begin(), x0.px.end(), x0t.data.data());
  Tensor x = x0t;

  Rng rng(opts.seed);
  RefineTrace trace;
  trace.x0 = x0;
  trace.noise_scale = opts.noise_scale;
  trace.seed = opts.seed;

  for (int k = 0; k < opts.steps; ++k) {
    const int t = ts[static_cast<size_t>(k)];
    Tensor raw = policy.forward_plain(x, x0t, t, pe);
    if (!raw.data.isFinite().all()) {
      throw std::runtime_error("refine: non-finite policy output at step " + std::to_string(k));
    }
    if (opts.noise_scale > 0.0) {
      const double sigma = opts.noise_scale * std::sqrt(1.0 - ab[static_cast<size_t>(t)]);
      for (int64_t i = 0; i < raw.numel(); ++i) raw.data[i] += sigma * rng.normal();
    }
    const double norm = std::sqrt(raw.data.square().sum());
    for (int64_t i = 0; i < raw.numel(); ++i) {
      const double delta = std::clamp(raw.data[i], -opts.epsilon, opts.epsilon);
      double v = std::clamp(x.data[i] + delta, 0.0, 1.0);
      if (opts.cumulative_ball) {
        v = std::clamp(v, std::max(0.0, x0t.data[i] - opts.epsilon),
                       std::min(1.0, x0t.data[i] + opts.epsilon));
      }
      x.data[i] = v;
    }
    RefineStep step;
    step.t = t;
    step.delta_preclamp_norm = norm;
    step.x_after = Image(x0.h, x0.w);
    std::copy(x.data.data(), x.data.data() + x.numel(), step.x_after.px.begin());
    trace.steps.push_back(std::move(step));
  }

  trace.final_linf = linf(trace.output(), x0);
  trace.final_ssim = ssim(trace.output(), x0);
  trace.ssim_violation = trace.final_ssim < opts.ssim_threshold;
  return trace;
}

RefineGraph refine_graph(const PolicyNet& policy, const Var& x0, const Var& global_vec,
                         const Var& tokens, int K, double epsilon, int schedule_T) {
  const std::vector<int> ts = refine_timesteps(schedule_T, K);
  RefineGraph g;
  Var x = x0;
  for (int k = 0; k < K; ++k) {
    Var raw = policy.forward(x, x0, ts[static_cast<size_t>(k)], global_vec, tokens);
    Var delta = clamp(raw, -epsilon, epsilon);
    g.deltas.push_back(delta);
    x = clamp(add(x, delta), 0.0, 1.0);
  }
  g.output = x;
  return g;
}

}  // namespace whisperer
