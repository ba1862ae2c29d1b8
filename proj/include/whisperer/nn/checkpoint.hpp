#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <utility>
#include <vector>

#include "whisperer/nn/layers.hpp"
#include "whisperer/nn/tensor.hpp"

namespace whisperer::nn {

// Parameter archive: a JSON header (free-form meta + tensor index) followed by
// raw little-endian doubles in index order.
struct Checkpoint {
  nlohmann::json meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// SHA-256 over parameter names and values in list order; the frozen-model and
// encoder "frozen hash" and the policy digest all use this.
std::string params_digest(const ParamList& params);

// Copy checkpoint tensors into live parameters (by name; throws on mismatch).
void load_into(const Checkpoint& ckpt, const ParamList& params);
// Snapshot live parameters into a tensor list.
std::vector<std::pair<std::string, Tensor>> snapshot(const ParamList& params);

}  // namespace whisperer::nn
