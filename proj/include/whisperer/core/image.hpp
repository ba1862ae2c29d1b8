#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace whisperer {

// Single-channel image with pixel values in [0,1], row-major.
struct Image {
  int h = 0;
  int w = 0;
  std::vector<double> px;

  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : h(height), w(width), px(static_cast<size_t>(height) * width, fill) {}

  double& at(int y, int x) { return px[static_cast<size_t>(y) * w + x]; }
  double at(int y, int x) const { return px[static_cast<size_t>(y) * w + x]; }
  size_t size() const { return px.size(); }
  bool same_shape(const Image& o) const { return h == o.h && w == o.w; }
};

// Throws std::invalid_argument if any pixel is outside [0,1] or non-finite.
void check_pixel_range(const Image& img, const std::string& context);

Image clamp01(const Image& img);

// Snap pixels to the 8-bit / 16-bit grid (round(v * scale) / scale). Keeps
// stored PNGs and in-memory values bit-identical.
Image quantize(const Image& img, int bits);

// Separable Gaussian blur, reflect border, kernel radius = max(1, ceil(3*sigma)).
Image gaussian_blur(const Image& img, double sigma);

// Lossless PNG I/O. bits must be 8 or 16.
void save_png(const Image& img, const std::string& path, int bits = 8);
Image load_png(const std::string& path);

// In-memory JPEG encode/decode round trip at the given quality (1..100).
Image jpeg_roundtrip(const Image& img, int quality);

}  // namespace whisperer
