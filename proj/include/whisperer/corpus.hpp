#pragma once

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "whisperer/core/image.hpp"
#include "whisperer/core/rng.hpp"

namespace whisperer {

inline const std::string kDefaultCharset =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";

// Bundled vector fonts (ids resolve to Hershey faces).
const std::vector<std::string>& available_fonts();

struct CleanSample {
  std::string id;
  Image image;  // [0,1], grayscale
  std::string label;
  std::string font_id;
  double angle_deg = 0.0;
};

enum class MorphKernel { kNone, k3x3, k5x5 };

std::string morph_kernel_name(MorphKernel k);
MorphKernel morph_kernel_from_name(const std::string& name);

struct DegradationSpec {
  std::optional<double> blur_sigma;     // [0.5, 2.0]
  std::optional<int> jpeg_quality;      // [30, 70]
  std::optional<double> elastic_alpha;  // [10, 30]
  double elastic_sigma = 4.0;           // smoothing of the displacement field (px)
  MorphKernel morph_kernel = MorphKernel::kNone;
  std::optional<double> gamma;          // [0.7, 1.5]
  std::optional<double> noise_sigma;    // [0.01, 0.08], off by default
  uint64_t rng_seed = 0;

  bool any_present() const;
  void validate() const;  // throws std::out_of_range on violations
  nlohmann::json to_json() const;
  static DegradationSpec from_json(const nlohmann::json& j);
};

struct Sample {
  CleanSample clean;
  Image degraded;
  DegradationSpec spec;
};

struct DegradationPolicy {
  double p_blur = 0.5;
  double p_jpeg = 0.5;
  double p_elastic = 0.5;
  double p_morph = 0.5;
  double p_gamma = 0.5;
  double p_noise = 0.0;  // off unless the corpus config enables noise
};

struct ManifestEntry {
  std::string id;
  std::string clean_path;     // relative to the manifest directory
  std::string degraded_path;  // relative to the manifest directory
  std::string label;
  std::string split;  // train | heldout | test
  DegradationSpec spec;
  int width = 0;
  int height = 0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::string charset = kDefaultCharset;
  int height = 0;
  int width = 0;
  std::string base_dir;  // directory of the manifest file

  std::vector<const ManifestEntry*> split(const std::string& name) const;
  const ManifestEntry& by_id(const std::string& id) const;
  // Deterministic shuffled view of a split.
  std::vector<const ManifestEntry*> shuffled_split(const std::string& name,
                                                   uint64_t seed) const;
  Image load_clean(const ManifestEntry& e) const;
  Image load_degraded(const ManifestEntry& e) const;
  Sample load_sample(const ManifestEntry& e) const;
};

struct CorpusConfig {
  int train_count = 2000;
  int heldout_count = 500;
  int test_count = 500;
  int height = 96;
  int width = 304;
  std::string charset = kDefaultCharset;
  int label_min_len = 3;
  int label_max_len = 10;
  std::vector<std::string> fonts;          // empty -> all available
  double max_abs_angle_deg = 4.0;
  double min_contrast = 0.5;
  bool enable_noise = false;
  DegradationPolicy policy;
  std::string out_dir;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
  static CorpusConfig from_json(const nlohmann::json& j);
};

// Draws `label` with the given Hershey font at `angle_deg`, fit fully inside
// the canvas, dark text on a light background. Deterministic in all inputs.
CleanSample render_text_image(const std::string& label, const std::string& font_id,
                              double angle_deg, int height, int width, uint64_t seed,
                              const std::string& charset = kDefaultCharset,
                              double min_contrast = 0.5);

DegradationSpec sample_degradation_spec(uint64_t rng_seed, const DegradationPolicy& policy);

// Applies blur -> elastic -> morphology -> gamma -> noise -> JPEG, in that
// fixed order, then snaps to the 8-bit grid. Deterministic in (image, spec).
Image degrade(const Image& image, const DegradationSpec& spec);

// Generates the corpus on disk (PNG images + JSONL manifest) and returns it.
Manifest build_corpus(const CorpusConfig& config);

// Loads a manifest and verifies every referenced image exists.
Manifest load_manifest(const std::string& path);

void save_manifest(const Manifest& m, const std::string& path);

}  // namespace whisperer
