#include "red/embedding.hpp"

#include <stdexcept>

#include "red/fingerprint.hpp"
#include "red/rng.hpp"

namespace red {

EmbeddingTable::EmbeddingTable(std::size_t vocab_size, std::size_t dim, std::uint64_t seed)
    : seed_(seed) {
  if (vocab_size == 0 || dim == 0) throw std::invalid_argument("embedding: empty table");
  Rng rng(derive_seed(seed, "embedding-table"));
  Tensor t({vocab_size, dim});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  table_ = std::move(t);
  fingerprint_ = fingerprint_tensor(table_);
}

EmbeddingTable::EmbeddingTable(Tensor table, std::uint64_t seed) : table_(std::move(table)), seed_(seed) {
  if (table_.rank() != 2) throw std::invalid_argument("embedding: table must be rank-2");
  fingerprint_ = fingerprint_tensor(table_);
}

Tensor EmbeddingTable::embed_tokens(std::span<const int> tokens) const {
  if (tokens.empty()) throw std::invalid_argument("embedding: empty query rejected");
  const std::size_t d = dim();
  Tensor out({tokens.size(), d});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab_size()) {
      throw std::invalid_argument("embedding: token id " + std::to_string(tokens[i]) +
                                  " out of range for vocab " + std::to_string(vocab_size()));
    }
    const double* row = table_.data() + static_cast<std::size_t>(tokens[i]) * d;
    std::copy(row, row + d, out.data() + i * d);
  }
  return out;
}

Tensor pool_rows(const Tensor& token_embeddings) {
  if (token_embeddings.rank() != 2 || token_embeddings.rows() == 0) {
    throw std::invalid_argument("pool_query: need at least one token row");
  }
  const std::size_t m = token_embeddings.rows(), d = token_embeddings.cols();
  Tensor out({d});
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < d; ++c) out[c] += token_embeddings(r, c);
  for (std::size_t c = 0; c < d; ++c) out[c] /= static_cast<double>(m);
  return out;
}

Tensor EmbeddingTable::pool_query(std::span<const int> tokens) const {
  return pool_rows(embed_tokens(tokens));
}

}  // namespace red
