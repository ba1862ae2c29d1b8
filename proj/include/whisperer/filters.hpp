#pragma once

#include <map>
#include <string>
#include <vector>

#include "whisperer/core/image.hpp"

namespace whisperer {

struct FilterSpec {
  std::string name;
  std::map<std::string, double> params;
};

// The fixed 17-entry catalog (identity, CLAHE clip {2,4,8}, morph open
// {3x3,5x5}, gamma {0.7,1.3,1.5}, unsharp {0.5,1.0,1.5}, bilateral
// {30,50,75}, adaptive mean, adaptive Gaussian).
const std::vector<FilterSpec>& filter_catalog();

bool is_catalog_filter(const std::string& name);

// Applies a catalog filter by spec. Pure, shape-preserving, output in [0,1].
Image apply_filter(const Image& image, const FilterSpec& spec);
Image apply_filter(const Image& image, const std::string& name);

// Individual filters (exposed for direct use and testing).
Image unsharp(const Image& image, double amount, double blur_sigma);
Image clahe(const Image& image, double clip_limit, int tiles_y, int tiles_x);
Image gamma_correct(const Image& image, double gamma);
Image morph_open(const Image& image, int kernel);
Image bilateral(const Image& image, double sigma, int diameter = 9);
Image adaptive_threshold(const Image& image, bool gaussian, int block_size = 11,
                         double offset = 2.0 / 255.0);

}  // namespace whisperer
