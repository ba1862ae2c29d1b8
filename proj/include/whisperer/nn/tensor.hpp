#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace whisperer::nn {

// Dense row-major tensor of doubles. Shapes are small vectors like {C,H,W}.
struct Tensor {
  std::vector<int> shape;
  Eigen::ArrayXd data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data = Eigen::ArrayXd::Zero(numel_of(shape));
  }
  Tensor(std::vector<int> s, Eigen::ArrayXd d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape)) {
      throw std::invalid_argument("Tensor: data size does not match shape");
    }
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  int64_t numel() const { return data.size(); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape.size()); }

  double& operator[](int64_t i) { return data[i]; }
  double operator[](int64_t i) const { return data[i]; }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    t.data.setConstant(v);
    return t;
  }
  static Tensor scalar(double v) { return full({1}, v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// View a rank-2 tensor (or explicit rows/cols) as an Eigen row-major matrix.
inline MatMap as_matrix(Tensor& t, int rows, int cols) {
  if (static_cast<int64_t>(rows) * cols != t.numel()) {
    throw std::invalid_argument("as_matrix: bad view " + t.shape_str());
  }
  return MatMap(t.data.data(), rows, cols);
}
inline ConstMatMap as_matrix(const Tensor& t, int rows, int cols) {
  if (static_cast<int64_t>(rows) * cols != t.numel()) {
    throw std::invalid_argument("as_matrix: bad view " + t.shape_str());
  }
  return ConstMatMap(t.data.data(), rows, cols);
}

}  // namespace whisperer::nn
