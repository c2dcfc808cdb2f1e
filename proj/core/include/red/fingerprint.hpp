#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "red/tensor.hpp"

namespace red {

/// FNV-1a 64-bit running hash. Canonical little-endian byte order so
/// fingerprints are stable across the pipeline.
class Fnv1a {
 public:
  Fnv1a& update(const void* bytes, std::size_t len);
  Fnv1a& update(std::string_view s) { return update(s.data(), s.size()); }
  Fnv1a& update_u64(std::uint64_t v);
  Fnv1a& update_f64(double v);
  Fnv1a& update(const Tensor& t);

  std::uint64_t digest() const { return state_; }
  std::string hex() const;

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

std::string fingerprint_tensor(const Tensor& t);
std::string fingerprint_string(std::string_view s);

}  // namespace red
