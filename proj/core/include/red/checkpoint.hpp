#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "red/tensor.hpp"

namespace red {

/// Named-tensor container behind the "REDC" binary format:
/// magic "REDC", u32 version, metadata block, u32 tensor count, then per
/// tensor: name (u32 length + UTF-8 bytes), u32 rank, u64 dims, raw
/// little-endian f64 payload. Round-trips bit-exactly.
class Checkpoint {
 public:
  static constexpr std::uint32_t kVersion = 1;

  std::map<std::string, std::string> metadata;

  void add(std::string name, Tensor tensor);
  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Tensor>>& tensors() const { return tensors_; }

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

  const std::string& meta(const std::string& key) const;
  std::string meta_or(const std::string& key, std::string fallback) const;

 private:
  std::vector<std::pair<std::string, Tensor>> tensors_;
};

}  // namespace red
