#include "red/fingerprint.hpp"

#include <bit>
#include <cstring>

#include "red/rng.hpp"

namespace red {

namespace {
constexpr std::uint64_t kPrime = 0x100000001b3ULL;
}

Fnv1a& Fnv1a::update(const void* bytes, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < len; ++i) {
    state_ ^= p[i];
    state_ *= kPrime;
  }
  return *this;
}

Fnv1a& Fnv1a::update_u64(std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  return update(buf, 8);
}

Fnv1a& Fnv1a::update_f64(double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  return update_u64(bits);
}

Fnv1a& Fnv1a::update(const Tensor& t) {
  update_u64(t.rank());
  for (std::size_t d : t.shape()) update_u64(d);
  for (std::size_t i = 0; i < t.size(); ++i) update_f64(t[i]);
  return *this;
}

std::string Fnv1a::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  std::uint64_t v = state_;
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

std::string fingerprint_tensor(const Tensor& t) { return Fnv1a().update(t).hex(); }

std::string fingerprint_string(std::string_view s) { return Fnv1a().update(s).hex(); }

std::uint64_t hash_label(std::string_view label) { return Fnv1a().update(label).digest(); }

}  // namespace red
