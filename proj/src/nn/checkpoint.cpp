#include "whisperer/nn/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "whisperer/core/digest.hpp"

namespace whisperer::nn {

namespace {
constexpr char kMagic[4] = {'W', 'S', 'P', 'C'};
constexpr uint32_t kVersion = 1;
}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw std::out_of_range("Checkpoint: missing tensor " + name);
}

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  nlohmann::json header;
  header["meta"] = ckpt.meta;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : ckpt.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape}});
  }
  header["tensors"] = index;
  const std::string hs = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    out.write(kMagic, 4);
    uint32_t ver = kVersion;
    out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    uint64_t len = hs.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(t.data.data()),
                static_cast<std::streamsize>(t.numel() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw std::runtime_error("save_checkpoint: rename failed for " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kVersion) throw std::runtime_error("load_checkpoint: unsupported version");
  uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string hs(len, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(len));
  nlohmann::json header = nlohmann::json::parse(hs);

  Checkpoint ckpt;
  ckpt.meta = header.at("meta");
  for (const auto& e : header.at("tensors")) {
    std::vector<int> shape = e.at("shape").get<std::vector<int>>();
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(double)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated tensor data in " + path);
    ckpt.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return ckpt;
}

std::string params_digest(const ParamList& params) {
  Sha256 h;
  for (const auto& p : params) {
    h.update(p.name.data(), p.name.size());
    h.update(p.var->val.data.data(), p.var->val.numel() * sizeof(double));
  }
  return h.hex();
}

void load_into(const Checkpoint& ckpt, const ParamList& params) {
  if (ckpt.tensors.size() != params.size()) {
    throw std::runtime_error("load_into: parameter count mismatch");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.tensors[i];
    if (name != params[i].name || t.shape != params[i].var->val.shape) {
      throw std::runtime_error("load_into: mismatch at " + params[i].name);
    }
    params[i].var->val = t;
  }
}

std::vector<std::pair<std::string, Tensor>> snapshot(const ParamList& params) {
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.name, p.var->val);
  return out;
}

}  // namespace whisperer::nn
