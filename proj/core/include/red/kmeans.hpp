#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "red/checkpoint.hpp"
#include "red/tensor.hpp"

namespace red {

enum class DictMetric { kEuclidean, kCosine };

const char* metric_name(DictMetric metric);
DictMetric metric_from_name(const std::string& name);

struct KMeansResult {
  Tensor centers;                      // n_clusters x dim
  std::vector<std::size_t> assignment;
  std::vector<double> inertia_trace;   // per Lloyd iteration, non-increasing
  double inertia = 0.0;
  std::size_t iterations = 0;
};

/// Seeded k-means++ initialization followed by Lloyd iterations to an
/// assignment fixed point (or 100 iterations). Empty clusters are re-seeded
/// from the point farthest from its center, deterministically.
KMeansResult kmeans_cluster(const Tensor& points, std::size_t n_clusters, std::uint64_t seed,
                            std::size_t max_iterations = 100);

/// The frozen backdoor-adjustment dictionary: cluster centers of substitute
/// confounders with a uniform empirical prior. Never updated after
/// construction; the content hash is re-verified at every training epoch.
struct ConfounderDictionary {
  Tensor centers;              // n x latent_dim
  std::vector<double> prior;   // uniform 1/n
  DictMetric metric = DictMetric::kEuclidean;
  std::string embedder_fingerprint;
  std::string ae_fingerprint;
  std::uint64_t seed = 0;

  std::size_t size() const { return centers.rank() == 2 ? centers.shape()[0] : 0; }
  std::size_t dim() const { return centers.rank() == 2 ? centers.shape()[1] : 0; }

  void validate() const;
  std::string content_hash() const;

  void save(Checkpoint& ckpt, const std::string& prefix = "dict/") const;
  static ConfounderDictionary load(const Checkpoint& ckpt, const std::string& prefix = "dict/");
};

/// Cluster substitute-confounder latents into the dictionary. Cosine metric
/// is euclidean k-means on length-normalized latents.
ConfounderDictionary build_dictionary(const Tensor& latents, std::size_t n_clusters,
                                      DictMetric metric, std::uint64_t seed,
                                      const std::string& embedder_fingerprint,
                                      const std::string& ae_fingerprint);

}  // namespace red
