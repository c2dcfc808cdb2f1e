#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "red/tensor.hpp"

namespace red {

/// Frozen token embedding table. Stands in for a fixed pretrained language
/// encoder: values are seeded Gaussians and never receive gradients. The
/// fingerprint identifies the table across the whole pipeline; every stage
/// built on top of it re-checks the fingerprint before use.
class EmbeddingTable {
 public:
  EmbeddingTable(std::size_t vocab_size, std::size_t dim, std::uint64_t seed);
  EmbeddingTable(Tensor table, std::uint64_t seed);

  std::size_t vocab_size() const { return table_.shape()[0]; }
  std::size_t dim() const { return table_.shape()[1]; }
  const Tensor& table() const { return table_; }
  const std::string& fingerprint() const { return fingerprint_; }
  std::uint64_t seed() const { return seed_; }

  /// Row i of the result is the table row for tokens[i], exactly.
  Tensor embed_tokens(std::span<const int> tokens) const;

  /// Arithmetic mean over token rows; the pooled query feature r.
  Tensor pool_query(std::span<const int> tokens) const;

 private:
  Tensor table_;  // vocab_size x dim
  std::string fingerprint_;
  std::uint64_t seed_ = 0;
};

Tensor pool_rows(const Tensor& token_embeddings);

}  // namespace red
