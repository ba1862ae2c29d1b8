#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace whisperer {

// SHA-256 hex digest of a byte buffer.
std::string sha256_hex(const void* data, size_t len);

// Incremental hasher for checkpoints (parameters hashed in a fixed order).
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, size_t len);
  void update_doubles(const std::vector<double>& v);
  std::string hex();  // finalizes; hasher becomes unusable afterwards

 private:
  void* ctx_ = nullptr;
  bool done_ = false;
};

}  // namespace whisperer
