#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "whisperer/corpus.hpp"
#include "whisperer/metrics.hpp"

namespace fs = std::filesystem;
using namespace whisperer;

namespace {

std::vector<uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

CorpusConfig tiny_config(const std::string& dir, uint64_t seed) {
  CorpusConfig cfg;
  cfg.train_count = 6;
  cfg.heldout_count = 3;
  cfg.test_count = 3;
  cfg.out_dir = dir;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST_CASE("render_text_image shape, range, determinism") {
  const CleanSample s = render_text_image("HELLO", "hershey_simplex", 0.0, 96, 304, 7);
  CHECK(s.image.h == 96);
  CHECK(s.image.w == 304);
  CHECK_NOTHROW(check_pixel_range(s.image, "render"));
  // Text must actually produce dark pixels on a light background.
  double mn = 1.0, mx = 0.0;
  for (double v : s.image.px) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  CHECK(mx - mn >= 0.5);
  const CleanSample s2 = render_text_image("HELLO", "hershey_simplex", 0.0, 96, 304, 7);
  CHECK(s.image.px == s2.image.px);

  const CleanSample rot = render_text_image("HELLO", "hershey_simplex", 3.5, 96, 304, 7);
  CHECK(rot.image.px != s.image.px);
}

TEST_CASE("render_text_image error paths") {
  CHECK_THROWS_AS(render_text_image("", "hershey_simplex", 0, 96, 304, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(render_text_image("HELLO", "comic_sans", 0, 96, 304, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(render_text_image("HELLO!", "hershey_simplex", 0, 96, 304, 1),
                  std::invalid_argument);
  // Canvas too small for a ten-character label.
  CHECK_THROWS_AS(render_text_image("ABCDEFGHIJ", "hershey_simplex", 0, 12, 24, 1),
                  std::invalid_argument);
}

TEST_CASE("available fonts cover the bundled set") {
  CHECK(available_fonts().size() >= 5);
  for (const auto& f : available_fonts()) {
    CHECK_NOTHROW(render_text_image("Quick7", f, 1.0, 96, 304, 3));
  }
}

TEST_CASE("sample_degradation_spec respects intervals") {
  DegradationPolicy policy;
  for (uint64_t seed = 1; seed <= 50; ++seed) {
    const DegradationSpec s = sample_degradation_spec(seed, policy);
    CHECK_NOTHROW(s.validate());
    CHECK(s.any_present());
    if (s.blur_sigma) {
      CHECK(*s.blur_sigma >= 0.5);
      CHECK(*s.blur_sigma <= 2.0);
    }
    if (s.jpeg_quality) {
      CHECK(*s.jpeg_quality >= 30);
      CHECK(*s.jpeg_quality <= 70);
    }
    if (s.elastic_alpha) {
      CHECK(*s.elastic_alpha >= 10.0);
      CHECK(*s.elastic_alpha <= 30.0);
    }
    if (s.gamma) {
      CHECK(*s.gamma >= 0.7);
      CHECK(*s.gamma <= 1.5);
    }
  }
}

TEST_CASE("sample_degradation_spec degenerate policy is rejected") {
  DegradationPolicy zero;
  zero.p_blur = zero.p_jpeg = zero.p_elastic = zero.p_morph = zero.p_gamma = zero.p_noise = 0.0;
  CHECK_THROWS_AS(sample_degradation_spec(1, zero), std::invalid_argument);
}

TEST_CASE("sampler marginal inclusion rates over 10k draws") {
  DegradationPolicy policy;
  int blur = 0, jpeg = 0, elastic = 0, morph = 0, gamma = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const DegradationSpec s = sample_degradation_spec(1000 + i, policy);
    blur += s.blur_sigma.has_value();
    jpeg += s.jpeg_quality.has_value();
    elastic += s.elastic_alpha.has_value();
    morph += s.morph_kernel != MorphKernel::kNone;
    gamma += s.gamma.has_value();
  }
  // Forced at-least-one resampling inflates marginals slightly above the raw
  // inclusion probability; 0.5 +/- 0.02 still holds.
  for (int count : {blur, jpeg, elastic, morph, gamma}) {
    CHECK(count / static_cast<double>(n) == doctest::Approx(0.5).epsilon(0.04));
    CHECK(std::abs(count / static_cast<double>(n) - 0.5) < 0.02);
  }
}

TEST_CASE("degrade: blur of a constant is the constant") {
  Image c(32, 40, 0.5);
  DegradationSpec spec;
  spec.blur_sigma = 1.5;
  spec.rng_seed = 1;
  const Image out = degrade(c, spec);
  CHECK(linf(out, c) < 1e-12);
}

TEST_CASE("degrade: lossy pipeline strictly below SSIM 1 and deterministic") {
  const CleanSample s = render_text_image("Word42", "hershey_duplex", 2.0, 96, 304, 9);
  DegradationSpec spec;
  spec.blur_sigma = 2.0;
  spec.jpeg_quality = 30;
  spec.rng_seed = 77;
  const Image d1 = degrade(s.image, spec);
  CHECK(ssim(s.image, d1) < 1.0);
  const Image d2 = degrade(s.image, spec);
  CHECK(d1.px == d2.px);

  DegradationSpec full;
  full.blur_sigma = 1.0;
  full.jpeg_quality = 45;
  full.elastic_alpha = 20.0;
  full.morph_kernel = MorphKernel::k3x3;
  full.gamma = 1.2;
  full.rng_seed = 123;
  const Image f1 = degrade(s.image, full);
  const Image f2 = degrade(s.image, full);
  CHECK(f1.px == f2.px);
  CHECK_NOTHROW(check_pixel_range(f1, "degraded"));
}

TEST_CASE("degrade rejects out-of-range spec") {
  Image c(16, 16, 0.5);
  DegradationSpec spec;
  spec.blur_sigma = 3.0;  // above the allowed interval
  CHECK_THROWS_AS(degrade(c, spec), std::out_of_range);
  DegradationSpec empty;
  CHECK_THROWS_AS(degrade(c, empty), std::out_of_range);
}

TEST_CASE("jpeg quality ordering on a text image") {
  const CleanSample s = render_text_image("Mn0pQ", "hershey_plain", 1.0, 96, 304, 4);
  const Image q30 = jpeg_roundtrip(s.image, 30);
  const Image q70 = jpeg_roundtrip(s.image, 70);
  CHECK(ssim(s.image, q30) <= ssim(s.image, q70));
}

TEST_CASE("build_corpus writes a loadable, reproducible corpus") {
  const std::string dir_a = (fs::temp_directory_path() / "wsp_corpus_a").string();
  const std::string dir_b = (fs::temp_directory_path() / "wsp_corpus_b").string();
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
  const Manifest ma = build_corpus(tiny_config(dir_a, 31));
  const Manifest mb = build_corpus(tiny_config(dir_b, 31));
  CHECK(ma.entries.size() == 12);
  CHECK(ma.split("train").size() == 6);
  CHECK(ma.split("heldout").size() == 3);
  CHECK(ma.split("test").size() == 3);

  // Reproducibility: identical manifests and identical image bytes.
  CHECK(file_bytes(fs::path(dir_a) / "manifest.jsonl") ==
        file_bytes(fs::path(dir_b) / "manifest.jsonl"));
  for (const auto& e : ma.entries) {
    CHECK(file_bytes(fs::path(dir_a) / e.clean_path) ==
          file_bytes(fs::path(dir_b) / e.clean_path));
    CHECK(file_bytes(fs::path(dir_a) / e.degraded_path) ==
          file_bytes(fs::path(dir_b) / e.degraded_path));
  }

  const Manifest loaded = load_manifest((fs::path(dir_a) / "manifest.jsonl").string());
  CHECK(loaded.entries.size() == ma.entries.size());
  for (size_t i = 0; i < loaded.entries.size(); ++i) {
    CHECK(loaded.entries[i].id == ma.entries[i].id);
    CHECK(loaded.entries[i].label == ma.entries[i].label);
  }
  // Labels round-trip exactly and images load in range.
  const Sample sample = loaded.load_sample(loaded.entries[0]);
  CHECK_NOTHROW(check_pixel_range(sample.degraded, "loaded degraded"));
  CHECK(sample.clean.label == loaded.entries[0].label);

  // Shuffle determinism.
  const auto o1 = loaded.shuffled_split("train", 5);
  const auto o2 = loaded.shuffled_split("train", 5);
  REQUIRE(o1.size() == o2.size());
  for (size_t i = 0; i < o1.size(); ++i) CHECK(o1[i]->id == o2[i]->id);
  const auto o3 = loaded.shuffled_split("train", 6);
  bool same = true;
  for (size_t i = 0; i < o1.size(); ++i) same = same && o1[i]->id == o3[i]->id;
  CHECK_FALSE(same);

  // Missing file is reported by path.
  fs::remove(fs::path(dir_a) / ma.entries[2].degraded_path);
  try {
    load_manifest((fs::path(dir_a) / "manifest.jsonl").string());
    FAIL("expected missing-file error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(ma.entries[2].degraded_path) != std::string::npos);
  }
}

TEST_CASE("build_corpus validates config") {
  CorpusConfig bad;
  bad.train_count = 0;
  bad.out_dir = (fs::temp_directory_path() / "wsp_bad").string();
  CHECK_THROWS_AS(build_corpus(bad), std::invalid_argument);
}

TEST_CASE("degradation spec JSON round trip") {
  DegradationSpec s;
  s.blur_sigma = 1.25;
  s.jpeg_quality = 42;
  s.morph_kernel = MorphKernel::k5x5;
  s.rng_seed = 99;
  const DegradationSpec r = DegradationSpec::from_json(s.to_json());
  CHECK(r.blur_sigma == s.blur_sigma);
  CHECK(r.jpeg_quality == s.jpeg_quality);
  CHECK_FALSE(r.elastic_alpha.has_value());
  CHECK(r.morph_kernel == MorphKernel::k5x5);
  CHECK(r.rng_seed == 99);
}
