#include "whisperer/core/digest.hpp"

#include <openssl/evp.h>

#include <cstring>
#include <stdexcept>

namespace whisperer {

namespace {
std::string to_hex(const unsigned char* buf, size_t n) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (size_t i = 0; i < n; ++i) {
    out.push_back(digits[buf[i] >> 4]);
    out.push_back(digits[buf[i] & 0xf]);
  }
  return out;
}
}  // namespace

std::string sha256_hex(const void* data, size_t len) {
  Sha256 h;
  h.update(data, len);
  return h.hex();
}

Sha256::Sha256() {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("Sha256: init failed");
  }
  ctx_ = ctx;
}

Sha256::~Sha256() {
  if (ctx_) EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_));
}

void Sha256::update(const void* data, size_t len) {
  if (done_) throw std::logic_error("Sha256: update after finalize");
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, len);
}

void Sha256::update_doubles(const std::vector<double>& v) {
  update(v.data(), v.size() * sizeof(double));
}

std::string Sha256::hex() {
  if (done_) throw std::logic_error("Sha256: already finalized");
  unsigned char buf[EVP_MAX_MD_SIZE];
  unsigned int n = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), buf, &n);
  done_ = true;
  return to_hex(buf, n);
}

}  // namespace whisperer
