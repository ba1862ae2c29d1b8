#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "whisperer/core/rng.hpp"
#include "whisperer/filters.hpp"
#include "whisperer/metrics.hpp"

using namespace whisperer;

namespace {

Image random_image(int h, int w, Rng& rng) {
  Image img(h, w);
  for (double& v : img.px) v = rng.uniform();
  return img;
}

double stddev(const Image& img) {
  double mean = 0;
  for (double v : img.px) mean += v;
  mean /= img.px.size();
  double ss = 0;
  for (double v : img.px) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / img.px.size());
}

}  // namespace

TEST_CASE("catalog has exactly the 17 fixed entries") {
  const auto& cat = filter_catalog();
  CHECK(cat.size() == 17);
  std::set<std::string> names;
  for (const auto& f : cat) names.insert(f.name);
  CHECK(names.size() == 17);
  const std::set<std::string> expected = {
      "original",       "clahe_2",        "clahe_4",        "clahe_8",
      "morph_open_3x3", "morph_open_5x5", "gamma_0.7",      "gamma_1.3",
      "gamma_1.5",      "unsharp_0.5",    "unsharp_1.0",    "unsharp_1.5",
      "bilateral_30",   "bilateral_50",   "bilateral_75",   "adaptive_mean",
      "adaptive_gaussian"};
  CHECK(names == expected);
  CHECK(is_catalog_filter("clahe_4"));
  CHECK_FALSE(is_catalog_filter("clahe_16"));
}

TEST_CASE("original is the exact identity") {
  Rng rng(1);
  const Image x = random_image(24, 31, rng);
  const Image y = apply_filter(x, "original");
  CHECK(x.px == y.px);
}

TEST_CASE("clahe of a constant image is constant") {
  Image c(32, 48, 0.42);
  const Image out = apply_filter(c, "clahe_4");
  for (double v : out.px) CHECK(v == doctest::Approx(out.px[0]).epsilon(1e-12));
}

TEST_CASE("clahe toy case matches brute-force histogram oracle") {
  // 8x8 two-level image, single tile: direct histogram equalization.
  Image img(8, 8);
  for (int i = 0; i < 64; ++i) img.px[i] = i < 32 ? 0.4 : 0.6;
  const double clip = 4.0;
  const Image out = clahe(img, clip, 1, 1);

  // Independent computation of the documented algorithm.
  const int bins = 256;
  const double area = 64.0;
  std::vector<double> hist(bins, 0.0);
  auto bin_of = [&](double v) { return std::min(bins - 1, static_cast<int>(v * bins)); };
  for (double v : img.px) hist[bin_of(v)] += 1.0;
  const double climit = std::max(1.0, clip * area / bins);
  double excess = 0;
  for (double& h : hist) {
    if (h > climit) {
      excess += h - climit;
      h = climit;
    }
  }
  for (double& h : hist) h += excess / bins;
  std::vector<double> cdf(bins);
  double acc = 0;
  for (int b = 0; b < bins; ++b) {
    acc += hist[b];
    cdf[b] = acc / area;
  }
  for (int i = 0; i < 64; ++i) {
    CHECK(out.px[i] == doctest::Approx(cdf[bin_of(img.px[i])]).epsilon(1e-12));
  }
  // Equalization pushes the two levels apart.
  CHECK(stddev(out) > stddev(img));
}

TEST_CASE("gamma filter matches pointwise exponentiation") {
  Image ramp(16, 32);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 32; ++x) ramp.at(y, x) = x / 31.0;
  const Image out = apply_filter(ramp, "gamma_0.7");
  for (size_t i = 0; i < ramp.px.size(); ++i) {
    CHECK(out.px[i] == doctest::Approx(std::pow(ramp.px[i], 0.7)).epsilon(1e-12));
  }
}

TEST_CASE("unsharp: zero amount, constant image, bright pixel") {
  Rng rng(2);
  const Image x = random_image(20, 20, rng);
  const Image same = unsharp(x, 0.0, 1.0);
  CHECK(same.px == x.px);

  Image c(16, 16, 0.7);
  const Image cs = unsharp(c, 1.5, 1.0);
  for (double v : cs.px) CHECK(v == doctest::Approx(0.7).epsilon(1e-12));

  // Single bright pixel on a 5x5 grid: direct evaluation of the formula with
  // an independently built Gaussian kernel.
  Image spot(5, 5, 0.2);
  spot.at(2, 2) = 0.8;
  const double sigma = 1.0;
  const int radius = 3;
  std::vector<double> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * n - 2 - i;
    return i;
  };
  Image tmp(5, 5), blur(5, 5);
  for (int y = 0; y < 5; ++y)
    for (int x2 = 0; x2 < 5; ++x2) {
      double a = 0;
      for (int d = -radius; d <= radius; ++d) a += k[d + radius] * spot.at(y, reflect(x2 + d, 5));
      tmp.at(y, x2) = a;
    }
  for (int y = 0; y < 5; ++y)
    for (int x2 = 0; x2 < 5; ++x2) {
      double a = 0;
      for (int d = -radius; d <= radius; ++d) a += k[d + radius] * tmp.at(reflect(y + d, 5), x2);
      blur.at(y, x2) = a;
    }
  const double expected_center = 0.8 + 1.0 * (0.8 - blur.at(2, 2));
  CHECK(expected_center > 0.8);  // sharpening raises the peak before clamping
  const Image sharp = unsharp(spot, 1.0, 1.0);
  CHECK(sharp.at(2, 2) == doctest::Approx(std::min(1.0, expected_center)).epsilon(1e-12));

  CHECK_THROWS_AS(unsharp(x, -0.5, 1.0), std::invalid_argument);
}

TEST_CASE("adaptive thresholds binarize and are idempotent on binary input") {
  Rng rng(3);
  const Image x = random_image(24, 24, rng);
  for (const char* name : {"adaptive_mean", "adaptive_gaussian"}) {
    const Image bin = apply_filter(x, name);
    for (double v : bin.px) CHECK((v == 0.0 || v == 1.0));
    const Image again = apply_filter(bin, name);
    for (double v : again.px) CHECK((v == 0.0 || v == 1.0));
  }
}

TEST_CASE("morph open removes an isolated bright speck") {
  Image img(12, 12, 0.0);
  img.at(6, 6) = 1.0;
  const Image out = apply_filter(img, "morph_open_3x3");
  CHECK(out.at(6, 6) == doctest::Approx(0.0));
}

TEST_CASE("all catalog filters: range, shape, determinism on fuzzed inputs") {
  Rng rng(4);
  for (int iter = 0; iter < 6; ++iter) {
    const Image x = random_image(24, 40, rng);
    for (const auto& f : filter_catalog()) {
      const Image a = apply_filter(x, f);
      CHECK(a.h == x.h);
      CHECK(a.w == x.w);
      CHECK_NOTHROW(check_pixel_range(a, f.name));
      const Image b = apply_filter(x, f);
      CHECK(a.px == b.px);
    }
  }
  CHECK_THROWS_AS(apply_filter(random_image(8, 8, rng), "not_a_filter"),
                  std::invalid_argument);
}

TEST_CASE("clahe argument validation") {
  Image x(16, 16, 0.5);
  CHECK_THROWS_AS(clahe(x, 0.0, 8, 8), std::invalid_argument);
  CHECK_THROWS_AS(clahe(x, 2.0, 0, 8), std::invalid_argument);
}
