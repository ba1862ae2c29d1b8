#include "whisperer/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "whisperer/filters.hpp"

#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;

namespace whisperer {

namespace {

const std::map<std::string, int>& font_table() {
  static const std::map<std::string, int> table = {
      {"hershey_simplex", cv::FONT_HERSHEY_SIMPLEX},
      {"hershey_plain", cv::FONT_HERSHEY_PLAIN},
      {"hershey_duplex", cv::FONT_HERSHEY_DUPLEX},
      {"hershey_complex", cv::FONT_HERSHEY_COMPLEX},
      {"hershey_triplex", cv::FONT_HERSHEY_TRIPLEX},
      {"hershey_complex_small", cv::FONT_HERSHEY_COMPLEX_SMALL},
  };
  return table;
}

}  // namespace

const std::vector<std::string>& available_fonts() {
  static const std::vector<std::string> fonts = [] {
    std::vector<std::string> f;
    for (const auto& [name, id] : font_table()) f.push_back(name);
    return f;
  }();
  return fonts;
}

std::string morph_kernel_name(MorphKernel k) {
  switch (k) {
    case MorphKernel::kNone: return "none";
    case MorphKernel::k3x3: return "3x3";
    case MorphKernel::k5x5: return "5x5";
  }
  throw std::logic_error("morph_kernel_name: bad enum");
}

MorphKernel morph_kernel_from_name(const std::string& name) {
  if (name == "none") return MorphKernel::kNone;
  if (name == "3x3") return MorphKernel::k3x3;
  if (name == "5x5") return MorphKernel::k5x5;
  throw std::invalid_argument("morph_kernel_from_name: " + name);
}

bool DegradationSpec::any_present() const {
  return blur_sigma || jpeg_quality || elastic_alpha || gamma || noise_sigma ||
         morph_kernel != MorphKernel::kNone;
}

void DegradationSpec::validate() const {
  if (!any_present()) throw std::out_of_range("DegradationSpec: no degradation present");
  if (blur_sigma && (*blur_sigma < 0.5 || *blur_sigma > 2.0)) {
    throw std::out_of_range("DegradationSpec: blur_sigma outside [0.5,2.0]");
  }
  if (jpeg_quality && (*jpeg_quality < 30 || *jpeg_quality > 70)) {
    throw std::out_of_range("DegradationSpec: jpeg_quality outside [30,70]");
  }
  if (elastic_alpha && (*elastic_alpha < 10.0 || *elastic_alpha > 30.0)) {
    throw std::out_of_range("DegradationSpec: elastic_alpha outside [10,30]");
  }
  if (elastic_alpha && elastic_sigma <= 0.0) {
    throw std::out_of_range("DegradationSpec: elastic_sigma must be positive");
  }
  if (gamma && (*gamma < 0.7 || *gamma > 1.5)) {
    throw std::out_of_range("DegradationSpec: gamma outside [0.7,1.5]");
  }
  if (noise_sigma && (*noise_sigma < 0.01 || *noise_sigma > 0.08)) {
    throw std::out_of_range("DegradationSpec: noise_sigma outside [0.01,0.08]");
  }
}

nlohmann::json DegradationSpec::to_json() const {
  nlohmann::json j;
  if (blur_sigma) j["blur_sigma"] = *blur_sigma;
  if (jpeg_quality) j["jpeg_quality"] = *jpeg_quality;
  if (elastic_alpha) {
    j["elastic_alpha"] = *elastic_alpha;
    j["elastic_sigma"] = elastic_sigma;
  }
  j["morph_kernel"] = morph_kernel_name(morph_kernel);
  if (gamma) j["gamma"] = *gamma;
  if (noise_sigma) j["noise_sigma"] = *noise_sigma;
  j["rng_seed"] = rng_seed;
  return j;
}

DegradationSpec DegradationSpec::from_json(const nlohmann::json& j) {
  DegradationSpec s;
  if (j.contains("blur_sigma")) s.blur_sigma = j["blur_sigma"].get<double>();
  if (j.contains("jpeg_quality")) s.jpeg_quality = j["jpeg_quality"].get<int>();
  if (j.contains("elastic_alpha")) s.elastic_alpha = j["elastic_alpha"].get<double>();
  if (j.contains("elastic_sigma")) s.elastic_sigma = j["elastic_sigma"].get<double>();
  s.morph_kernel = morph_kernel_from_name(j.value("morph_kernel", "none"));
  if (j.contains("gamma")) s.gamma = j["gamma"].get<double>();
  if (j.contains("noise_sigma")) s.noise_sigma = j["noise_sigma"].get<double>();
  s.rng_seed = j.value("rng_seed", 0ULL);
  return s;
}

// ---------------- rendering ----------------

CleanSample render_text_image(const std::string& label, const std::string& font_id,
                              double angle_deg, int height, int width, uint64_t seed,
                              const std::string& charset, double min_contrast) {
  if (label.empty()) throw std::invalid_argument("render_text_image: empty label");
  for (char c : label) {
    if (charset.find(c) == std::string::npos) {
      throw std::invalid_argument(std::string("render_text_image: character '") + c +
                                  "' not in charset");
    }
  }
  auto it = font_table().find(font_id);
  if (it == font_table().end()) {
    throw std::invalid_argument("render_text_image: unknown font_id " + font_id);
  }
  const int face = it->second;

  Rng rng(seed);
  const double bg = rng.uniform(0.86, 1.0);
  const double fg = rng.uniform(0.0, 0.22);
  if (bg - fg < min_contrast) {
    throw std::logic_error("render_text_image: contrast below configured minimum");
  }
  const int thickness = 1 + static_cast<int>(rng.uniform_int(2));

  const int bg8 = static_cast<int>(std::lround(bg * 255.0));
  const int fg8 = static_cast<int>(std::lround(fg * 255.0));

  // Fit the text fully inside the canvas, leaving margin for rotation.
  const double rad = std::abs(angle_deg) * CV_PI / 180.0;
  int base = 0;
  const cv::Size unit = cv::getTextSize(label, face, 1.0, thickness, &base);
  if (unit.width <= 0 || unit.height <= 0) {
    throw std::invalid_argument("render_text_image: font produced empty glyphs");
  }
  double scale = 2.0;
  cv::Size ts;
  for (int iter = 0;; ++iter) {
    ts = cv::Size(static_cast<int>(unit.width * scale), static_cast<int>(unit.height * scale));
    const double rot_w = ts.width * std::cos(rad) + (ts.height + base * scale) * std::sin(rad);
    const double rot_h = ts.width * std::sin(rad) + (ts.height + base * scale) * std::cos(rad);
    if (rot_w <= width * 0.9 && rot_h <= height * 0.72) break;
    scale *= 0.93;
    if (iter > 80 || scale * unit.height < 6.0) {
      throw std::invalid_argument("render_text_image: text does not fit at requested size");
    }
  }

  cv::Mat canvas(height, width, CV_8UC1, cv::Scalar(bg8));
  const cv::Point org((width - ts.width) / 2, (height + ts.height) / 2);
  cv::putText(canvas, label, org, face, scale, cv::Scalar(fg8), thickness, cv::LINE_AA);

  if (angle_deg != 0.0) {
    const cv::Point2f center(width / 2.0f, height / 2.0f);
    cv::Mat rot = cv::getRotationMatrix2D(center, angle_deg, 1.0);
    cv::Mat rotated;
    cv::warpAffine(canvas, rotated, rot, canvas.size(), cv::INTER_LINEAR,
                   cv::BORDER_CONSTANT, cv::Scalar(bg8));
    canvas = rotated;
  }

  CleanSample out;
  out.image = Image(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      out.image.at(y, x) = canvas.at<uint8_t>(y, x) / 255.0;
    }
  }
  out.label = label;
  out.font_id = font_id;
  out.angle_deg = angle_deg;
  return out;
}

// ---------------- degradation ----------------

DegradationSpec sample_degradation_spec(uint64_t rng_seed, const DegradationPolicy& policy) {
  const double total = policy.p_blur + policy.p_jpeg + policy.p_elastic + policy.p_morph +
                       policy.p_gamma + policy.p_noise;
  if (total <= 0.0) {
    throw std::invalid_argument("sample_degradation_spec: degenerate policy (all zero)");
  }
  Rng rng(rng_seed);
  DegradationSpec s;
  s.rng_seed = rng_seed;
  do {
    s.blur_sigma.reset();
    s.jpeg_quality.reset();
    s.elastic_alpha.reset();
    s.gamma.reset();
    s.noise_sigma.reset();
    s.morph_kernel = MorphKernel::kNone;
    if (rng.bernoulli(policy.p_blur)) s.blur_sigma = rng.uniform(0.5, 2.0);
    if (rng.bernoulli(policy.p_jpeg)) {
      s.jpeg_quality = 30 + static_cast<int>(rng.uniform_int(41));  // [30,70]
    }
    if (rng.bernoulli(policy.p_elastic)) {
      s.elastic_alpha = rng.uniform(10.0, 30.0);
      s.elastic_sigma = 4.0;
    }
    if (rng.bernoulli(policy.p_morph)) {
      s.morph_kernel = rng.bernoulli(0.5) ? MorphKernel::k3x3 : MorphKernel::k5x5;
    }
    if (rng.bernoulli(policy.p_gamma)) s.gamma = rng.uniform(0.7, 1.5);
    if (rng.bernoulli(policy.p_noise)) s.noise_sigma = rng.uniform(0.01, 0.08);
  } while (!s.any_present());
  return s;
}

namespace {

Image elastic_transform(const Image& img, double alpha, double sigma, uint64_t seed) {
  Rng rng = Rng(seed).child("elastic");
  Image fx(img.h, img.w), fy(img.h, img.w);
  for (size_t i = 0; i < fx.px.size(); ++i) fx.px[i] = rng.uniform(-1.0, 1.0);
  for (size_t i = 0; i < fy.px.size(); ++i) fy.px[i] = rng.uniform(-1.0, 1.0);
  fx = gaussian_blur(fx, sigma);
  fy = gaussian_blur(fy, sigma);

  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      const double sx = x + alpha * fx.at(y, x);
      const double sy = y + alpha * fy.at(y, x);
      const double cx = std::min(static_cast<double>(img.w - 1), std::max(0.0, sx));
      const double cy = std::min(static_cast<double>(img.h - 1), std::max(0.0, sy));
      const int x0 = static_cast<int>(cx), y0 = static_cast<int>(cy);
      const int x1 = std::min(x0 + 1, img.w - 1), y1 = std::min(y0 + 1, img.h - 1);
      const double tx = cx - x0, ty = cy - y0;
      out.at(y, x) = (1 - ty) * ((1 - tx) * img.at(y0, x0) + tx * img.at(y0, x1)) +
                     ty * ((1 - tx) * img.at(y1, x0) + tx * img.at(y1, x1));
    }
  }
  return out;
}

}  // namespace

Image degrade(const Image& image, const DegradationSpec& spec) {
  check_pixel_range(image, "degrade input");
  spec.validate();
  Image img = image;
  if (spec.blur_sigma) {
    img = gaussian_blur(img, *spec.blur_sigma);
  }
  if (spec.elastic_alpha) {
    img = elastic_transform(img, *spec.elastic_alpha, spec.elastic_sigma, spec.rng_seed);
  }
  if (spec.morph_kernel != MorphKernel::kNone) {
    img = morph_open(img, spec.morph_kernel == MorphKernel::k3x3 ? 3 : 5);
  }
  if (spec.gamma) {
    for (double& v : img.px) v = std::pow(std::max(0.0, v), *spec.gamma);
  }
  if (spec.noise_sigma) {
    Rng rng = Rng(spec.rng_seed).child("noise");
    for (double& v : img.px) v += rng.normal(0.0, *spec.noise_sigma);
    img = clamp01(img);
  }
  if (spec.jpeg_quality) {
    img = jpeg_roundtrip(img, *spec.jpeg_quality);
  }
  return clamp01(img);
}

// ---------------- manifest ----------------

std::vector<const ManifestEntry*> Manifest::split(const std::string& name) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries) {
    if (e.split == name) out.push_back(&e);
  }
  return out;
}

const ManifestEntry& Manifest::by_id(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.id == id) return e;
  }
  throw std::out_of_range("Manifest: no entry with id " + id);
}

std::vector<const ManifestEntry*> Manifest::shuffled_split(const std::string& name,
                                                           uint64_t seed) const {
  std::vector<const ManifestEntry*> out = split(name);
  Rng rng(seed);
  for (size_t i = out.size(); i > 1; --i) {
    const size_t j = rng.uniform_int(i);
    std::swap(out[i - 1], out[j]);
  }
  return out;
}

Image Manifest::load_clean(const ManifestEntry& e) const {
  return load_png((fs::path(base_dir) / e.clean_path).string());
}

Image Manifest::load_degraded(const ManifestEntry& e) const {
  return load_png((fs::path(base_dir) / e.degraded_path).string());
}

Sample Manifest::load_sample(const ManifestEntry& e) const {
  Sample s;
  s.clean.id = e.id;
  s.clean.image = load_clean(e);
  s.clean.label = e.label;
  s.degraded = load_degraded(e);
  s.spec = e.spec;
  return s;
}

namespace {

nlohmann::json entry_to_json(const ManifestEntry& e) {
  return nlohmann::json{{"id", e.id},
                        {"clean_path", e.clean_path},
                        {"degraded_path", e.degraded_path},
                        {"label", e.label},
                        {"split", e.split},
                        {"spec", e.spec.to_json()},
                        {"width", e.width},
                        {"height", e.height}};
}

ManifestEntry entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.id = j.at("id").get<std::string>();
  e.clean_path = j.at("clean_path").get<std::string>();
  e.degraded_path = j.at("degraded_path").get<std::string>();
  e.label = j.at("label").get<std::string>();
  e.split = j.at("split").get<std::string>();
  e.spec = DegradationSpec::from_json(j.at("spec"));
  e.width = j.at("width").get<int>();
  e.height = j.at("height").get<int>();
  return e;
}

}  // namespace

void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_manifest: cannot open " + path);
  for (const auto& e : m.entries) {
    out << entry_to_json(e).dump() << "\n";
  }
  if (!out) throw std::runtime_error("save_manifest: write failed");
  nlohmann::json meta{{"charset", m.charset}, {"height", m.height}, {"width", m.width}};
  std::ofstream mo((fs::path(path).parent_path() / "corpus_meta.json").string(),
                   std::ios::trunc);
  mo << meta.dump(2) << "\n";
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_manifest: cannot open " + path);
  Manifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error("load_manifest: parse error at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
    m.entries.push_back(entry_from_json(j));
  }
  // Validate ids unique and files present.
  std::vector<std::string> ids;
  for (const auto& e : m.entries) {
    ids.push_back(e.id);
    for (const std::string& rel : {e.clean_path, e.degraded_path}) {
      const fs::path p = fs::path(m.base_dir) / rel;
      if (!fs::exists(p)) {
        throw std::runtime_error("load_manifest: missing image file " + p.string());
      }
    }
    m.height = e.height;
    m.width = e.width;
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) {
    throw std::runtime_error("load_manifest: duplicate ids");
  }
  const fs::path meta_path = fs::path(m.base_dir) / "corpus_meta.json";
  if (fs::exists(meta_path)) {
    std::ifstream mi(meta_path);
    nlohmann::json meta = nlohmann::json::parse(mi);
    m.charset = meta.value("charset", kDefaultCharset);
    m.height = meta.value("height", m.height);
    m.width = meta.value("width", m.width);
  }
  return m;
}

nlohmann::json CorpusConfig::to_json() const {
  return nlohmann::json{{"train_count", train_count},
                        {"heldout_count", heldout_count},
                        {"test_count", test_count},
                        {"height", height},
                        {"width", width},
                        {"charset", charset},
                        {"label_min_len", label_min_len},
                        {"label_max_len", label_max_len},
                        {"fonts", fonts},
                        {"max_abs_angle_deg", max_abs_angle_deg},
                        {"min_contrast", min_contrast},
                        {"enable_noise", enable_noise},
                        {"p_blur", policy.p_blur},
                        {"p_jpeg", policy.p_jpeg},
                        {"p_elastic", policy.p_elastic},
                        {"p_morph", policy.p_morph},
                        {"p_gamma", policy.p_gamma},
                        {"p_noise", policy.p_noise},
                        {"out_dir", out_dir},
                        {"seed", seed}};
}

CorpusConfig CorpusConfig::from_json(const nlohmann::json& j) {
  CorpusConfig c;
  c.train_count = j.value("train_count", c.train_count);
  c.heldout_count = j.value("heldout_count", c.heldout_count);
  c.test_count = j.value("test_count", c.test_count);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.charset = j.value("charset", c.charset);
  c.label_min_len = j.value("label_min_len", c.label_min_len);
  c.label_max_len = j.value("label_max_len", c.label_max_len);
  c.fonts = j.value("fonts", c.fonts);
  c.max_abs_angle_deg = j.value("max_abs_angle_deg", c.max_abs_angle_deg);
  c.min_contrast = j.value("min_contrast", c.min_contrast);
  c.enable_noise = j.value("enable_noise", c.enable_noise);
  c.policy.p_blur = j.value("p_blur", c.policy.p_blur);
  c.policy.p_jpeg = j.value("p_jpeg", c.policy.p_jpeg);
  c.policy.p_elastic = j.value("p_elastic", c.policy.p_elastic);
  c.policy.p_morph = j.value("p_morph", c.policy.p_morph);
  c.policy.p_gamma = j.value("p_gamma", c.policy.p_gamma);
  c.policy.p_noise = j.value("p_noise", c.policy.p_noise);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.seed = j.value("seed", c.seed);
  return c;
}

Manifest build_corpus(const CorpusConfig& config) {
  if (config.train_count <= 0 || config.heldout_count <= 0 || config.test_count <= 0) {
    throw std::invalid_argument("build_corpus: counts per split must be positive");
  }
  if (config.out_dir.empty()) throw std::invalid_argument("build_corpus: out_dir empty");
  const fs::path root(config.out_dir);
  fs::create_directories(root / "images");

  const std::vector<std::string>& fonts =
      config.fonts.empty() ? available_fonts() : config.fonts;
  DegradationPolicy policy = config.policy;
  if (!config.enable_noise) policy.p_noise = 0.0;

  Manifest m;
  m.charset = config.charset;
  m.height = config.height;
  m.width = config.width;
  m.base_dir = root.string();

  const Rng master(config.seed);
  const std::vector<std::pair<std::string, int>> splits = {
      {"train", config.train_count},
      {"heldout", config.heldout_count},
      {"test", config.test_count}};
  for (const auto& [split, count] : splits) {
    for (int i = 0; i < count; ++i) {
      std::ostringstream ids;
      ids << split << "_" << std::setw(6) << std::setfill('0') << i;
      const std::string id = ids.str();
      Rng rng = master.child(id);

      const int len = config.label_min_len +
                      static_cast<int>(rng.uniform_int(
                          static_cast<uint64_t>(config.label_max_len - config.label_min_len + 1)));
      std::string label;
      for (int k = 0; k < len; ++k) {
        label.push_back(config.charset[rng.uniform_int(config.charset.size())]);
      }
      const std::string font = fonts[rng.uniform_int(fonts.size())];
      const double angle = rng.uniform(-config.max_abs_angle_deg, config.max_abs_angle_deg);
      const uint64_t render_seed = rng.next_u64();
      const uint64_t spec_seed = rng.next_u64();

      CleanSample clean = render_text_image(label, font, angle, config.height, config.width,
                                            render_seed, config.charset, config.min_contrast);
      clean.id = id;
      clean.image = quantize(clean.image, 8);
      const DegradationSpec spec = sample_degradation_spec(spec_seed, policy);
      const Image degraded = degrade(clean.image, spec);

      ManifestEntry e;
      e.id = id;
      e.clean_path = "images/" + id + "_clean.png";
      e.degraded_path = "images/" + id + "_degraded.png";
      e.label = label;
      e.split = split;
      e.spec = spec;
      e.width = config.width;
      e.height = config.height;
      save_png(clean.image, (root / e.clean_path).string(), 8);
      save_png(degraded, (root / e.degraded_path).string(), 8);
      m.entries.push_back(std::move(e));
    }
  }
  save_manifest(m, (root / "manifest.jsonl").string());
  return m;
}

}  // namespace whisperer
