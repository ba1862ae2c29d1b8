#include "whisperer/core/image.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace whisperer {

void check_pixel_range(const Image& img, const std::string& context) {
  for (double v : img.px) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw std::invalid_argument(context + ": pixel value " + std::to_string(v) +
                                  " outside [0,1]");
    }
  }
}

Image clamp01(const Image& img) {
  Image out = img;
  for (double& v : out.px) v = std::min(1.0, std::max(0.0, v));
  return out;
}

Image quantize(const Image& img, int bits) {
  const double scale = bits == 16 ? 65535.0 : 255.0;
  Image out = img;
  for (double& v : out.px) {
    double q = std::round(std::min(1.0, std::max(0.0, v)) * scale);
    v = q / scale;
  }
  return out;
}

namespace {

std::vector<double> gaussian_kernel(double sigma, int& radius) {
  radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[i + radius] = v;
    sum += v;
  }
  for (double& v : k) v /= sum;
  return k;
}

inline int reflect(int i, int n) {
  // Reflect-101 border: -1 -> 1, n -> n-2.
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

}  // namespace

Image gaussian_blur(const Image& img, double sigma) {
  if (sigma <= 0.0) return img;
  int radius = 0;
  const std::vector<double> k = gaussian_kernel(sigma, radius);
  Image tmp(img.h, img.w);
  // Horizontal pass.
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) {
        acc += k[d + radius] * img.at(y, reflect(x + d, img.w));
      }
      tmp.at(y, x) = acc;
    }
  }
  Image out(img.h, img.w);
  // Vertical pass.
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double acc = 0.0;
      for (int d = -radius; d <= radius; ++d) {
        acc += k[d + radius] * tmp.at(reflect(y + d, img.h), x);
      }
      out.at(y, x) = acc;
    }
  }
  return out;
}

namespace {

cv::Mat to_mat8(const Image& img) {
  cv::Mat m(img.h, img.w, CV_8UC1);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double v = std::min(1.0, std::max(0.0, img.at(y, x)));
      m.at<uint8_t>(y, x) = static_cast<uint8_t>(std::lround(v * 255.0));
    }
  }
  return m;
}

cv::Mat to_mat16(const Image& img) {
  cv::Mat m(img.h, img.w, CV_16UC1);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x) {
      double v = std::min(1.0, std::max(0.0, img.at(y, x)));
      m.at<uint16_t>(y, x) = static_cast<uint16_t>(std::lround(v * 65535.0));
    }
  }
  return m;
}

Image from_mat(const cv::Mat& m) {
  Image img(m.rows, m.cols);
  if (m.type() == CV_8UC1) {
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) img.at(y, x) = m.at<uint8_t>(y, x) / 255.0;
  } else if (m.type() == CV_16UC1) {
    for (int y = 0; y < m.rows; ++y)
      for (int x = 0; x < m.cols; ++x) img.at(y, x) = m.at<uint16_t>(y, x) / 65535.0;
  } else {
    throw std::runtime_error("from_mat: unsupported mat type");
  }
  return img;
}

}  // namespace

void save_png(const Image& img, const std::string& path, int bits) {
  cv::Mat m = bits == 16 ? to_mat16(img) : to_mat8(img);
  if (!cv::imwrite(path, m)) {
    throw std::runtime_error("save_png: failed to write " + path);
  }
}

Image load_png(const std::string& path) {
  cv::Mat m = cv::imread(path, cv::IMREAD_UNCHANGED);
  if (m.empty()) {
    throw std::runtime_error("load_png: failed to read " + path);
  }
  if (m.channels() != 1) {
    cv::Mat gray;
    cv::cvtColor(m, gray, cv::COLOR_BGR2GRAY);
    m = gray;
  }
  return from_mat(m);
}

Image jpeg_roundtrip(const Image& img, int quality) {
  if (quality < 1 || quality > 100) {
    throw std::out_of_range("jpeg_roundtrip: quality outside [1,100]");
  }
  cv::Mat m = to_mat8(img);
  std::vector<uint8_t> buf;
  std::vector<int> params = {cv::IMWRITE_JPEG_QUALITY, quality};
  if (!cv::imencode(".jpg", m, buf, params)) {
    throw std::runtime_error("jpeg_roundtrip: encode failed");
  }
  cv::Mat dec = cv::imdecode(buf, cv::IMREAD_GRAYSCALE);
  if (dec.empty()) {
    throw std::runtime_error("jpeg_roundtrip: decode failed");
  }
  return from_mat(dec);
}

}  // namespace whisperer
