#include "red/kmeans.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "red/fingerprint.hpp"
#include "red/rng.hpp"

namespace red {

const char* metric_name(DictMetric metric) {
  return metric == DictMetric::kEuclidean ? "euclidean" : "cosine";
}

DictMetric metric_from_name(const std::string& name) {
  if (name == "euclidean") return DictMetric::kEuclidean;
  if (name == "cosine") return DictMetric::kCosine;
  throw std::invalid_argument("unknown dictionary metric: " + name);
}

namespace {

double sq_dist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

}  // namespace

KMeansResult kmeans_cluster(const Tensor& points, std::size_t n_clusters, std::uint64_t seed,
                            std::size_t max_iterations) {
  if (points.rank() != 2) throw std::invalid_argument("kmeans: points must be rank-2");
  const std::size_t m = points.rows(), d = points.cols();
  if (n_clusters == 0 || n_clusters > m) {
    throw std::invalid_argument("kmeans: need 1 <= clusters <= points, got " +
                                std::to_string(n_clusters) + " clusters for " + std::to_string(m) +
                                " points");
  }

  KMeansResult result;
  result.centers = Tensor({n_clusters, d});
  Rng rng(derive_seed(seed, "kmeans-init"));

  // k-means++ seeding
  std::vector<std::size_t> chosen;
  chosen.push_back(rng.next_index(m));
  std::vector<double> d2(m, std::numeric_limits<double>::infinity());
  while (chosen.size() < n_clusters) {
    const double* last = points.data() + chosen.back() * d;
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points.data() + i * d, last, d));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.next_index(m);  // all remaining points coincide with a center
    } else {
      const double u = rng.uniform(0.0, total);
      double acc = 0.0;
      pick = m - 1;
      for (std::size_t i = 0; i < m; ++i) {
        acc += d2[i];
        if (u < acc) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
  }
  for (std::size_t k = 0; k < n_clusters; ++k) {
    std::copy(points.data() + chosen[k] * d, points.data() + (chosen[k] + 1) * d,
              result.centers.data() + k * d);
  }

  result.assignment.assign(m, 0);
  std::vector<std::size_t> counts(n_clusters, 0);

  for (std::size_t iter = 0; iter < max_iterations; ++iter) {
    // assignment step; ties resolve to the lowest cluster index
    bool changed = iter == 0;
    double inertia = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < n_clusters; ++k) {
        const double dist = sq_dist(points.data() + i * d, result.centers.data() + k * d, d);
        if (dist < best_d) {
          best_d = dist;
          best = k;
        }
      }
      if (result.assignment[i] != best) {
        result.assignment[i] = best;
        changed = true;
      }
      inertia += best_d;
    }
    result.inertia_trace.push_back(inertia);
    result.inertia = inertia;
    result.iterations = iter + 1;
    if (!changed && iter > 0) break;

    // update step
    std::fill(result.centers.data(), result.centers.data() + result.centers.size(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < m; ++i) {
      const std::size_t k = result.assignment[i];
      counts[k] += 1;
      double* center = result.centers.data() + k * d;
      const double* p = points.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) center[c] += p[c];
    }
    for (std::size_t k = 0; k < n_clusters; ++k) {
      if (counts[k] == 0) continue;
      double* center = result.centers.data() + k * d;
      for (std::size_t c = 0; c < d; ++c) center[c] /= static_cast<double>(counts[k]);
    }
    // empty-cluster repair: re-seed from the point farthest from its center
    for (std::size_t k = 0; k < n_clusters; ++k) {
      if (counts[k] > 0) continue;
      std::size_t farthest = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < m; ++i) {
        const double dist = sq_dist(points.data() + i * d,
                                    result.centers.data() + result.assignment[i] * d, d);
        if (dist > far_d) {
          far_d = dist;
          farthest = i;
        }
      }
      std::copy(points.data() + farthest * d, points.data() + (farthest + 1) * d,
                result.centers.data() + k * d);
      counts[k] = 1;
    }
  }
  return result;
}

void ConfounderDictionary::validate() const {
  if (centers.rank() != 2 || centers.rows() == 0) {
    throw std::invalid_argument("dictionary: centers must be a non-empty rank-2 tensor");
  }
  if (!centers.all_finite()) throw std::invalid_argument("dictionary: non-finite centers");
  const std::size_t n = centers.rows(), d = centers.cols();
  if (prior.size() != n) throw std::invalid_argument("dictionary: prior length mismatch");
  double sum = 0.0;
  for (double p : prior) {
    if (p < 0) throw std::invalid_argument("dictionary: negative prior");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("dictionary: prior must sum to 1");
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (sq_dist(centers.data() + i * d, centers.data() + j * d, d) == 0.0) {
        throw std::invalid_argument("dictionary: degenerate clustering, centers " +
                                    std::to_string(i) + " and " + std::to_string(j) +
                                    " are identical");
      }
    }
  }
}

std::string ConfounderDictionary::content_hash() const {
  Fnv1a h;
  h.update(centers);
  for (double p : prior) h.update_f64(p);
  h.update(metric_name(metric));
  return h.hex();
}

void ConfounderDictionary::save(Checkpoint& ckpt, const std::string& prefix) const {
  ckpt.add(prefix + "centers", centers);
  ckpt.add(prefix + "prior", Tensor::from_vector(prior));
  ckpt.metadata[prefix + "metric"] = metric_name(metric);
  ckpt.metadata[prefix + "n"] = std::to_string(size());
  ckpt.metadata[prefix + "seed"] = std::to_string(seed);
  ckpt.metadata[prefix + "embedder_fingerprint"] = embedder_fingerprint;
  ckpt.metadata[prefix + "ae_fingerprint"] = ae_fingerprint;
  ckpt.metadata[prefix + "content_hash"] = content_hash();
}

ConfounderDictionary ConfounderDictionary::load(const Checkpoint& ckpt, const std::string& prefix) {
  ConfounderDictionary dict;
  dict.centers = ckpt.tensor(prefix + "centers");
  const Tensor& p = ckpt.tensor(prefix + "prior");
  dict.prior.assign(p.data(), p.data() + p.size());
  dict.metric = metric_from_name(ckpt.meta(prefix + "metric"));
  dict.seed = std::stoull(ckpt.meta(prefix + "seed"));
  dict.embedder_fingerprint = ckpt.meta(prefix + "embedder_fingerprint");
  dict.ae_fingerprint = ckpt.meta(prefix + "ae_fingerprint");
  if (dict.content_hash() != ckpt.meta(prefix + "content_hash")) {
    throw std::runtime_error("dictionary: content hash mismatch on load");
  }
  dict.validate();
  return dict;
}

ConfounderDictionary build_dictionary(const Tensor& latents, std::size_t n_clusters,
                                      DictMetric metric, std::uint64_t seed,
                                      const std::string& embedder_fingerprint,
                                      const std::string& ae_fingerprint) {
  Tensor points = latents;
  if (metric == DictMetric::kCosine) {
    const std::size_t m = points.rows(), d = points.cols();
    for (std::size_t i = 0; i < m; ++i) {
      double* row = points.data() + i * d;
      double norm = 0.0;
      for (std::size_t c = 0; c < d; ++c) norm += row[c] * row[c];
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (std::size_t c = 0; c < d; ++c) row[c] /= norm;
      }
    }
  }
  KMeansResult km = kmeans_cluster(points, n_clusters, seed);
  ConfounderDictionary dict;
  dict.centers = std::move(km.centers);
  dict.prior.assign(n_clusters, 1.0 / static_cast<double>(n_clusters));
  dict.metric = metric;
  dict.seed = seed;
  dict.embedder_fingerprint = embedder_fingerprint;
  dict.ae_fingerprint = ae_fingerprint;
  dict.validate();
  return dict;
}

}  // namespace red
