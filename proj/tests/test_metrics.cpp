#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "whisperer/core/rng.hpp"
#include "whisperer/metrics.hpp"

using namespace whisperer;

namespace {

// Brute-force recursive edit distance, independent of the DP implementation.
int lev_oracle(const std::string& a, const std::string& b) {
  if (a.empty()) return static_cast<int>(b.size());
  if (b.empty()) return static_cast<int>(a.size());
  const int sub = lev_oracle(a.substr(1), b.substr(1)) + (a[0] == b[0] ? 0 : 1);
  const int del = lev_oracle(a.substr(1), b) + 1;
  const int ins = lev_oracle(a, b.substr(1)) + 1;
  return std::min({sub, del, ins});
}

std::vector<std::string> all_strings(const std::string& alphabet, int max_len) {
  std::vector<std::string> out{""};
  std::vector<std::string> frontier{""};
  for (int l = 0; l < max_len; ++l) {
    std::vector<std::string> next;
    for (const auto& s : frontier) {
      for (char c : alphabet) {
        next.push_back(s + c);
        out.push_back(s + c);
      }
    }
    frontier = std::move(next);
  }
  return out;
}

Image random_image(int h, int w, Rng& rng) {
  Image img(h, w);
  for (double& v : img.px) v = rng.uniform();
  return img;
}

// Windowed SSIM computed directly from the formula (valid windows, Gaussian
// weights), written independently of the implementation.
double ssim_oracle(const Image& a, const Image& b) {
  int win = std::min({11, a.h, a.w});
  if (win % 2 == 0) --win;
  std::vector<double> k(win);
  double ksum = 0;
  for (int i = 0; i < win; ++i) {
    const double d = i - (win - 1) / 2.0;
    k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    ksum += k[i];
  }
  for (double& v : k) v /= ksum;
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  int count = 0;
  for (int y = 0; y + win <= a.h; ++y) {
    for (int x = 0; x + win <= a.w; ++x) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < win; ++i) {
        for (int j = 0; j < win; ++j) {
          const double w = k[i] * k[j];
          mx += w * a.at(y + i, x + j);
          my += w * b.at(y + i, x + j);
        }
      }
      for (int i = 0; i < win; ++i) {
        for (int j = 0; j < win; ++j) {
          const double w = k[i] * k[j];
          sxx += w * (a.at(y + i, x + j) - mx) * (a.at(y + i, x + j) - mx);
          syy += w * (b.at(y + i, x + j) - my) * (b.at(y + i, x + j) - my);
          sxy += w * (a.at(y + i, x + j) - mx) * (b.at(y + i, x + j) - my);
        }
      }
      total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
               ((mx * mx + my * my + c1) * (sxx + syy + c2));
      ++count;
    }
  }
  return total / count;
}

// Student-t two-sided p via numeric integration of the density.
double t_p_oracle(double t, int dof) {
  const double v = dof;
  auto pdf = [&](double x) {
    return std::exp(std::lgamma((v + 1) / 2) - std::lgamma(v / 2)) /
           std::sqrt(v * M_PI) * std::pow(1 + x * x / v, -(v + 1) / 2);
  };
  // Simpson over [|t|, |t|+60] (tail beyond is negligible at these dofs).
  const double a = std::abs(t), b = a + 60.0;
  const int n = 20000;
  const double h = (b - a) / n;
  double s = pdf(a) + pdf(b);
  for (int i = 1; i < n; ++i) s += pdf(a + i * h) * (i % 2 ? 4 : 2);
  return 2.0 * s * h / 3.0;
}

}  // namespace

TEST_CASE("levenshtein basics") {
  CHECK(levenshtein("", "abc") == 3);
  CHECK(levenshtein("kitten", "sitting") == 3);
  CHECK(levenshtein("same", "same") == 0);
  CHECK(levenshtein("abc", "") == 3);
}

TEST_CASE("levenshtein matches recursive oracle exhaustively (len <= 4)") {
  const auto strings = all_strings("abc", 4);
  for (size_t i = 0; i < strings.size(); i += 7) {
    for (size_t j = 0; j < strings.size(); j += 5) {
      CHECK(levenshtein(strings[i], strings[j]) == lev_oracle(strings[i], strings[j]));
    }
  }
}

TEST_CASE("levenshtein symmetry and triangle inequality on fuzzed triples") {
  Rng rng(42);
  const std::string alphabet = "abcdefgh";
  for (int iter = 0; iter < 300; ++iter) {
    auto rand_str = [&] {
      std::string s;
      const int len = static_cast<int>(rng.uniform_int(9));
      for (int i = 0; i < len; ++i) s.push_back(alphabet[rng.uniform_int(alphabet.size())]);
      return s;
    };
    const std::string a = rand_str(), b = rand_str(), c = rand_str();
    CHECK(levenshtein(a, b) == levenshtein(b, a));
    CHECK(levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c));
    CHECK((levenshtein(a, b) == 0) == (a == b));
  }
}

TEST_CASE("cer basics and clipping") {
  CHECK(cer("HELLO", "HELLO") == doctest::Approx(0.0));
  CHECK(cer("", "HELLO") == doctest::Approx(1.0));
  CHECK(cer("sitting", "kitten") == doctest::Approx(0.5));
  CHECK_THROWS_AS(cer("x", ""), std::invalid_argument);
  // Raw value can exceed 1; the clipped one cannot.
  CHECK(cer_raw("aaaaaaaa", "b") == doctest::Approx(8.0));
  CHECK(cer("aaaaaaaa", "b") == doctest::Approx(1.0));
}

TEST_CASE("reward product and bounds") {
  CHECK(reward(0.0, 1.0) == doctest::Approx(1.0));
  CHECK(reward(1.0, 0.9) == doctest::Approx(0.0));
  CHECK(reward(0.7724, 0.32) == doctest::Approx(0.072832).epsilon(1e-9));
  CHECK_THROWS_AS(reward(-0.1, 0.5), std::out_of_range);
  CHECK_THROWS_AS(reward(0.1, 1.5), std::out_of_range);
  Rng rng(7);
  for (int i = 0; i < 200; ++i) {
    const double r = reward(rng.uniform(), rng.uniform());
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
}

TEST_CASE("ssim identity, distinct and oracle") {
  Rng rng(11);
  Image x = random_image(16, 20, rng);
  CHECK(ssim(x, x) == doctest::Approx(1.0));

  Image bin(12, 12, 0.0);
  for (int y = 0; y < 12; ++y)
    for (int xx = 0; xx < 12; ++xx) bin.at(y, xx) = (y + xx) % 2 ? 1.0 : 0.0;
  Image inv(12, 12);
  for (size_t i = 0; i < bin.px.size(); ++i) inv.px[i] = 1.0 - bin.px[i];
  CHECK(ssim(bin, inv) < 1.0);

  // 4x4 toy pair against the independent windowed evaluation.
  Image a(4, 4), b(4, 4);
  for (int i = 0; i < 16; ++i) {
    a.px[i] = (i % 5) / 5.0;
    b.px[i] = (i % 7) / 7.0;
  }
  CHECK(ssim(a, b) == doctest::Approx(ssim_oracle(a, b)).epsilon(1e-9));

  Image big_a = random_image(24, 30, rng), big_b = random_image(24, 30, rng);
  CHECK(ssim(big_a, big_b) == doctest::Approx(ssim_oracle(big_a, big_b)).epsilon(1e-9));
  CHECK(std::abs(ssim(big_a, big_b) - ssim(big_b, big_a)) < 1e-9);
  CHECK_THROWS_AS(ssim(a, big_a), std::invalid_argument);
}

TEST_CASE("linf basics and exhaustive oracle") {
  Rng rng(3);
  Image x = random_image(9, 13, rng);
  CHECK(linf(x, x) == doctest::Approx(0.0));
  Image y = x;
  y.at(4, 7) += 0.1;
  CHECK(linf(x, y) == doctest::Approx(0.1));
  Image a = random_image(9, 13, rng), b = random_image(9, 13, rng);
  double m = 0;
  for (size_t i = 0; i < a.px.size(); ++i) m = std::max(m, std::abs(a.px[i] - b.px[i]));
  CHECK(linf(a, b) == doctest::Approx(m));
  CHECK_THROWS_AS(linf(a, random_image(5, 5, rng)), std::invalid_argument);
}

TEST_CASE("paired t-test null, overwhelming, oracle") {
  // Symmetric tiny noise: zero mean, p ~ 1.
  std::vector<double> null_diffs;
  for (int i = 0; i < 40; ++i) null_diffs.push_back((i % 2 ? 1.0 : -1.0) * 1e-9);
  const TTestResult null_res = paired_t_test(null_diffs);
  CHECK(std::abs(null_res.t) < 1e-6);
  CHECK(null_res.p > 0.99);

  std::vector<double> strong(50);
  Rng rng(5);
  for (auto& d : strong) d = -0.1 + rng.uniform(-1e-6, 1e-6);
  CHECK(paired_t_test(strong).p < 1e-6);

  const std::vector<double> fixed = {0.3, -0.1, 0.2, 0.25, 0.05, -0.02, 0.4, 0.12, 0.18, 0.0};
  const TTestResult r = paired_t_test(fixed);
  // Independent t statistic computation.
  double mean = 0;
  for (double d : fixed) mean += d;
  mean /= fixed.size();
  double ss = 0;
  for (double d : fixed) ss += (d - mean) * (d - mean);
  const double t_expected = mean / std::sqrt(ss / (fixed.size() - 1) / fixed.size());
  CHECK(r.t == doctest::Approx(t_expected).epsilon(1e-12));
  CHECK(r.p == doctest::Approx(t_p_oracle(t_expected, 9)).epsilon(1e-6));

  CHECK_THROWS_AS(paired_t_test({1.0}), std::invalid_argument);
  CHECK_THROWS_AS(paired_t_test({0.5, 0.5, 0.5}), std::invalid_argument);
}

TEST_CASE("EvalSummary means recomputable from per_sample") {
  Rng rng(9);
  std::vector<RewardRecord> recs;
  for (int i = 0; i < 57; ++i) {
    RewardRecord r;
    r.cer = rng.uniform();
    r.cer_raw = r.cer * 1.1;
    r.confidence = rng.uniform();
    r.reward = (1 - r.cer) * r.confidence;
    recs.push_back(r);
  }
  const EvalSummary s = summarize(recs);
  CHECK(s.n == 57);
  double mc = 0, mconf = 0, mr = 0;
  for (const auto& r : s.per_sample) {
    mc += r.cer;
    mconf += r.confidence;
    mr += r.reward;
  }
  CHECK(std::abs(s.mean_cer - mc / 57) < 1e-12);
  CHECK(std::abs(s.mean_confidence - mconf / 57) < 1e-12);
  CHECK(std::abs(s.mean_reward - mr / 57) < 1e-12);
}
