#include "whisperer/metrics.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace whisperer {

int levenshtein(const std::string& a, const std::string& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double cer_raw(const std::string& pred, const std::string& truth) {
  if (truth.empty()) throw std::invalid_argument("cer: empty truth");
  return static_cast<double>(levenshtein(pred, truth)) / static_cast<double>(truth.size());
}

double cer(const std::string& pred, const std::string& truth) {
  return std::min(cer_raw(pred, truth), 1.0);
}

double reward(double cer_value, double confidence) {
  if (cer_value < 0.0 || cer_value > 1.0 || confidence < 0.0 || confidence > 1.0) {
    throw std::out_of_range("reward: inputs must lie in [0,1]");
  }
  return (1.0 - cer_value) * confidence;
}

namespace {

std::vector<double> ssim_window(int size, double sigma) {
  std::vector<double> k(size);
  const double c = (size - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < size; ++i) {
    k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
  int win = std::min({11, a.h, a.w});
  if (win % 2 == 0) --win;
  if (win < 1) throw std::invalid_argument("ssim: image too small");
  const std::vector<double> k = ssim_window(win, 1.5);
  const double c1 = 0.01 * 0.01;
  const double c2 = 0.03 * 0.03;
  const int oh = a.h - win + 1, ow = a.w - win + 1;

  double total = 0.0;
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double mx = 0, my = 0, mxx = 0, myy = 0, mxy = 0;
      for (int dy = 0; dy < win; ++dy) {
        for (int dx = 0; dx < win; ++dx) {
          const double wgt = k[dy] * k[dx];
          const double va = a.at(y + dy, x + dx);
          const double vb = b.at(y + dy, x + dx);
          mx += wgt * va;
          my += wgt * vb;
          mxx += wgt * va * va;
          myy += wgt * vb * vb;
          mxy += wgt * va * vb;
        }
      }
      const double vx = mxx - mx * mx;
      const double vy = myy - my * my;
      const double cov = mxy - mx * my;
      const double num = (2 * mx * my + c1) * (2 * cov + c2);
      const double den = (mx * mx + my * my + c1) * (vx + vy + c2);
      total += num / den;
    }
  }
  return total / (static_cast<double>(oh) * ow);
}

double linf(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("linf: shape mismatch");
  double m = 0.0;
  for (size_t i = 0; i < a.px.size(); ++i) {
    m = std::max(m, std::abs(a.px[i] - b.px[i]));
  }
  return m;
}

TTestResult paired_t_test(const std::vector<double>& diffs) {
  const size_t n = diffs.size();
  if (n < 2) throw std::invalid_argument("paired_t_test: need n >= 2");
  const double mean = std::accumulate(diffs.begin(), diffs.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : diffs) ss += (d - mean) * (d - mean);
  const double var = ss / (n - 1);
  if (var == 0.0) throw std::invalid_argument("paired_t_test: all diffs identical");
  TTestResult r;
  r.t = mean / std::sqrt(var / n);
  boost::math::students_t dist(static_cast<double>(n - 1));
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

RewardRecord make_reward_record(const std::string& pred, const std::string& truth,
                                double confidence) {
  RewardRecord rec;
  rec.cer = cer(pred, truth);
  rec.cer_raw = cer_raw(pred, truth);
  rec.confidence = confidence;
  rec.reward = reward(rec.cer, confidence);
  return rec;
}

EvalSummary summarize(std::vector<RewardRecord> records) {
  EvalSummary s;
  s.n = static_cast<int>(records.size());
  for (const auto& r : records) {
    s.mean_cer += r.cer;
    s.mean_cer_raw += r.cer_raw;
    s.mean_confidence += r.confidence;
    s.mean_reward += r.reward;
  }
  if (s.n > 0) {
    s.mean_cer /= s.n;
    s.mean_cer_raw /= s.n;
    s.mean_confidence /= s.n;
    s.mean_reward /= s.n;
  }
  s.per_sample = std::move(records);
  return s;
}

}  // namespace whisperer
