#include "whisperer/filters.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace whisperer {

const std::vector<FilterSpec>& filter_catalog() {
  static const std::vector<FilterSpec> catalog = [] {
    std::vector<FilterSpec> c;
    c.push_back({"original", {}});
    for (double clip : {2.0, 4.0, 8.0}) {
      c.push_back({"clahe_" + std::to_string(static_cast<int>(clip)),
                   {{"clip_limit", clip}, {"tiles", 8}}});
    }
    for (int k : {3, 5}) {
      c.push_back({"morph_open_" + std::to_string(k) + "x" + std::to_string(k),
                   {{"kernel", static_cast<double>(k)}}});
    }
    for (const char* g : {"0.7", "1.3", "1.5"}) {
      c.push_back({std::string("gamma_") + g, {{"gamma", std::stod(g)}}});
    }
    for (const char* a : {"0.5", "1.0", "1.5"}) {
      c.push_back({std::string("unsharp_") + a,
                   {{"amount", std::stod(a)}, {"blur_sigma", 1.0}}});
    }
    for (int s : {30, 50, 75}) {
      c.push_back({"bilateral_" + std::to_string(s),
                   {{"sigma", static_cast<double>(s)}, {"diameter", 9}}});
    }
    c.push_back({"adaptive_mean", {{"block_size", 11}, {"offset", 2.0 / 255.0}}});
    c.push_back({"adaptive_gaussian", {{"block_size", 11}, {"offset", 2.0 / 255.0}}});
    return c;
  }();
  return catalog;
}

bool is_catalog_filter(const std::string& name) {
  for (const auto& f : filter_catalog()) {
    if (f.name == name) return true;
  }
  return false;
}

Image gamma_correct(const Image& image, double gamma) {
  Image out = image;
  for (double& v : out.px) v = std::pow(std::max(0.0, v), gamma);
  return out;
}

Image unsharp(const Image& image, double amount, double blur_sigma) {
  if (amount < 0.0) throw std::invalid_argument("unsharp: negative amount");
  const Image blurred = gaussian_blur(image, blur_sigma);
  Image out(image.h, image.w);
  for (size_t i = 0; i < out.px.size(); ++i) {
    out.px[i] = std::clamp(image.px[i] + amount * (image.px[i] - blurred.px[i]), 0.0, 1.0);
  }
  return out;
}

namespace {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

Image min_filter(const Image& img, int k) {
  const int r = k / 2;
  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double m = 1.0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          m = std::min(m, img.at(clampi(y + dy, 0, img.h - 1), clampi(x + dx, 0, img.w - 1)));
        }
      }
      out.at(y, x) = m;
    }
  }
  return out;
}

Image max_filter(const Image& img, int k) {
  const int r = k / 2;
  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double m = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          m = std::max(m, img.at(clampi(y + dy, 0, img.h - 1), clampi(x + dx, 0, img.w - 1)));
        }
      }
      out.at(y, x) = m;
    }
  }
  return out;
}

}  // namespace

Image morph_open(const Image& image, int kernel) {
  if (kernel != 3 && kernel != 5) throw std::invalid_argument("morph_open: kernel must be 3 or 5");
  return max_filter(min_filter(image, kernel), kernel);
}

// Contrast-limited adaptive histogram equalization over a tile grid.
// Per tile, 256-bin histogram; counts above clip_limit * area / 256 are
// clipped and the excess redistributed uniformly; a pixel maps to the
// bilinear blend of the neighbouring tiles' CDF values.
Image clahe(const Image& image, double clip_limit, int tiles_y, int tiles_x) {
  if (clip_limit <= 0.0) throw std::invalid_argument("clahe: clip_limit must be positive");
  if (tiles_y < 1 || tiles_x < 1) throw std::invalid_argument("clahe: bad tile grid");
  constexpr int kBins = 256;
  const int H = image.h, W = image.w;
  tiles_y = std::min(tiles_y, H);
  tiles_x = std::min(tiles_x, W);

  auto bin_of = [](double v) {
    return std::min(kBins - 1, static_cast<int>(std::max(0.0, v) * kBins));
  };

  // Per-tile equalization LUTs (value in [0,1] per bin).
  std::vector<std::vector<double>> lut(static_cast<size_t>(tiles_y) * tiles_x);
  for (int ti = 0; ti < tiles_y; ++ti) {
    const int y0 = ti * H / tiles_y, y1 = (ti + 1) * H / tiles_y;
    for (int tj = 0; tj < tiles_x; ++tj) {
      const int x0 = tj * W / tiles_x, x1 = (tj + 1) * W / tiles_x;
      const double area = static_cast<double>(y1 - y0) * (x1 - x0);
      std::vector<double> hist(kBins, 0.0);
      for (int y = y0; y < y1; ++y) {
        for (int x = x0; x < x1; ++x) hist[bin_of(image.at(y, x))] += 1.0;
      }
      const double climit = std::max(1.0, clip_limit * area / kBins);
      double excess = 0.0;
      for (double& hcount : hist) {
        if (hcount > climit) {
          excess += hcount - climit;
          hcount = climit;
        }
      }
      const double add = excess / kBins;
      double cdf = 0.0;
      auto& l = lut[static_cast<size_t>(ti) * tiles_x + tj];
      l.resize(kBins);
      for (int b = 0; b < kBins; ++b) {
        cdf += hist[b] + add;
        l[b] = cdf / area;
      }
    }
  }

  Image out(H, W);
  for (int y = 0; y < H; ++y) {
    // Tile-center coordinates for interpolation.
    const double fy = (y + 0.5) * tiles_y / H - 0.5;
    const int i0 = clampi(static_cast<int>(std::floor(fy)), 0, tiles_y - 1);
    const int i1 = clampi(i0 + 1, 0, tiles_y - 1);
    const double wy = std::clamp(fy - std::floor(fy), 0.0, 1.0);
    const double ty = fy < 0 ? 0.0 : (fy > tiles_y - 1 ? 1.0 : wy);
    for (int x = 0; x < W; ++x) {
      const double fx = (x + 0.5) * tiles_x / W - 0.5;
      const int j0 = clampi(static_cast<int>(std::floor(fx)), 0, tiles_x - 1);
      const int j1 = clampi(j0 + 1, 0, tiles_x - 1);
      const double wx = std::clamp(fx - std::floor(fx), 0.0, 1.0);
      const double tx = fx < 0 ? 0.0 : (fx > tiles_x - 1 ? 1.0 : wx);
      const int b = bin_of(image.at(y, x));
      const double v00 = lut[static_cast<size_t>(i0) * tiles_x + j0][b];
      const double v01 = lut[static_cast<size_t>(i0) * tiles_x + j1][b];
      const double v10 = lut[static_cast<size_t>(i1) * tiles_x + j0][b];
      const double v11 = lut[static_cast<size_t>(i1) * tiles_x + j1][b];
      out.at(y, x) = (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
    }
  }
  return out;
}

Image bilateral(const Image& image, double sigma, int diameter) {
  if (sigma <= 0.0) throw std::invalid_argument("bilateral: sigma must be positive");
  const int r = diameter / 2;
  const double sigma_space = sigma;          // pixels
  const double sigma_color = sigma / 255.0;  // value scale of [0,1] images
  Image out(image.h, image.w);
  std::vector<double> spatial((2 * r + 1) * (2 * r + 1));
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      spatial[(dy + r) * (2 * r + 1) + dx + r] =
          std::exp(-0.5 * (dy * dy + dx * dx) / (sigma_space * sigma_space));
    }
  }
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      const double center = image.at(y, x);
      double acc = 0.0, wsum = 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const double v = image.at(clampi(y + dy, 0, image.h - 1), clampi(x + dx, 0, image.w - 1));
          const double dc = v - center;
          const double w = spatial[(dy + r) * (2 * r + 1) + dx + r] *
                           std::exp(-0.5 * dc * dc / (sigma_color * sigma_color));
          acc += w * v;
          wsum += w;
        }
      }
      out.at(y, x) = acc / wsum;
    }
  }
  return out;
}

Image adaptive_threshold(const Image& image, bool gaussian, int block_size, double offset) {
  const int r = block_size / 2;
  std::vector<double> k(block_size, 1.0 / block_size);
  if (gaussian) {
    const double sigma = 0.3 * ((block_size - 1) * 0.5 - 1.0) + 0.8;
    double sum = 0.0;
    for (int i = 0; i < block_size; ++i) {
      k[i] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
      sum += k[i];
    }
    for (double& v : k) v /= sum;
  }
  // Separable weighted local mean with replicate border.
  Image tmp(image.h, image.w);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      double acc = 0.0;
      for (int d = -r; d <= r; ++d) acc += k[d + r] * image.at(y, clampi(x + d, 0, image.w - 1));
      tmp.at(y, x) = acc;
    }
  }
  Image mean_img(image.h, image.w);
  for (int y = 0; y < image.h; ++y) {
    for (int x = 0; x < image.w; ++x) {
      double acc = 0.0;
      for (int d = -r; d <= r; ++d) acc += k[d + r] * tmp.at(clampi(y + d, 0, image.h - 1), x);
      mean_img.at(y, x) = acc;
    }
  }
  Image out(image.h, image.w);
  for (size_t i = 0; i < out.px.size(); ++i) {
    out.px[i] = image.px[i] > mean_img.px[i] - offset ? 1.0 : 0.0;
  }
  return out;
}

Image apply_filter(const Image& image, const FilterSpec& spec) {
  check_pixel_range(image, "apply_filter input");
  const std::string& n = spec.name;
  auto param = [&](const std::string& key) {
    auto it = spec.params.find(key);
    if (it == spec.params.end()) {
      throw std::invalid_argument("apply_filter: " + n + " missing param " + key);
    }
    return it->second;
  };
  if (n == "original") return image;
  if (n.rfind("clahe_", 0) == 0) {
    const int tiles = static_cast<int>(param("tiles"));
    return clahe(image, param("clip_limit"), tiles, tiles);
  }
  if (n.rfind("morph_open_", 0) == 0) {
    return morph_open(image, static_cast<int>(param("kernel")));
  }
  if (n.rfind("gamma_", 0) == 0) return gamma_correct(image, param("gamma"));
  if (n.rfind("unsharp_", 0) == 0) return unsharp(image, param("amount"), param("blur_sigma"));
  if (n.rfind("bilateral_", 0) == 0) {
    return bilateral(image, param("sigma"), static_cast<int>(param("diameter")));
  }
  if (n == "adaptive_mean") {
    return adaptive_threshold(image, false, static_cast<int>(param("block_size")),
                              param("offset"));
  }
  if (n == "adaptive_gaussian") {
    return adaptive_threshold(image, true, static_cast<int>(param("block_size")),
                              param("offset"));
  }
  throw std::invalid_argument("apply_filter: unknown filter " + n);
}

Image apply_filter(const Image& image, const std::string& name) {
  for (const auto& f : filter_catalog()) {
    if (f.name == name) return apply_filter(image, f);
  }
  throw std::invalid_argument("apply_filter: unknown filter " + name);
}

}  // namespace whisperer
