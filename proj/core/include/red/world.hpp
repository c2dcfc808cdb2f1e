#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "red/rng.hpp"
#include "red/tensor.hpp"

namespace red {

/// Parameters of the synthetic grounding world. The generative process is a
/// causal graph with an unobserved context id g driving the image background,
/// the query's context tokens, and the referent's location prior.
struct WorldSpec {
  std::size_t grid_h = 8;
  std::size_t grid_w = 8;
  std::size_t n_nouns = 12;
  std::size_t n_attributes = 6;
  std::size_t n_context_tokens = 16;
  std::size_t n_contexts = 8;            // number of confounder values
  double bias_strength = 5.0;            // peakedness of the location prior
  double context_query_rate = 0.8;       // probability context tokens join the query
  std::size_t feature_dim = 32;
  double noise_sigma = 0.1;
  std::uint64_t seed = 1;

  std::size_t ctx_tokens_per_query = 2;
  std::size_t distractor_min = 2;
  std::size_t distractor_max = 5;
  double background_scale = 1.0;

  std::size_t cells() const { return grid_h * grid_w; }
  std::size_t vocab_size() const { return n_attributes + n_nouns + n_context_tokens; }
  int attribute_token(std::size_t a) const { return static_cast<int>(a); }
  int noun_token(std::size_t n) const { return static_cast<int>(n_attributes + n); }
  int context_token(std::size_t c) const { return static_cast<int>(n_attributes + n_nouns + c); }

  void validate() const;
};

struct Box {
  double cx = 0, cy = 0, w = 0, h = 0;
};

double iou(const Box& a, const Box& b);

struct PlacedObject {
  std::size_t noun = 0;
  std::size_t attribute = 0;
  std::size_t cell = 0;
  Box box;
};

struct Scene {
  std::size_t confounder_id = 0;
  std::vector<PlacedObject> objects;
  std::size_t referent_index = 0;

  const PlacedObject& referent() const { return objects[referent_index]; }
};

enum class SplitKind { kConfounded, kShifted };

const char* split_name(SplitKind split);
SplitKind split_from_name(const std::string& name);

constexpr std::size_t kNoConfounder = static_cast<std::size_t>(-1);

/// One grounding instance. confounder_id is evaluation-only metadata; model
/// loaders never see it.
struct Sample {
  Tensor feature_map;            // grid_h x grid_w x feature_dim
  std::vector<int> query_tokens;
  std::size_t gt_cell = 0;
  Box gt_box;
  std::size_t confounder_id = kNoConfounder;
};

/// A WorldSpec bound to its frozen seeded content: visual embeddings for
/// nouns/attributes, per-context backgrounds, context token pools, anchors.
class World {
 public:
  explicit World(WorldSpec spec);

  const WorldSpec& spec() const { return spec_; }

  std::size_t anchor_cell(std::size_t g, std::size_t noun) const;
  std::size_t shifted_context(std::size_t g) const;  // seeded derangement

  /// Probability of each grid cell for an object of this noun under context g.
  std::vector<double> location_prior(std::size_t g, std::size_t noun, SplitKind split) const;

  Scene sample_scene(SplitKind split, Rng& rng) const;
  Tensor render_feature_map(const Scene& scene, Rng& rng) const;
  std::vector<int> compose_query(const Scene& scene, Rng& rng) const;

  Sample make_sample(SplitKind split, std::uint64_t sample_seed) const;
  std::vector<Sample> generate_split(SplitKind split, std::size_t n, std::uint64_t root_seed) const;

  const std::vector<double>& noun_feature(std::size_t n) const { return noun_features_.at(n); }
  const std::vector<double>& attribute_feature(std::size_t a) const { return attr_features_.at(a); }
  const std::vector<double>& context_background(std::size_t g) const { return backgrounds_.at(g); }
  std::vector<int> context_tokens_of(std::size_t g) const;

  double cell_center_x(std::size_t cell) const;
  double cell_center_y(std::size_t cell) const;

 private:
  WorldSpec spec_;
  std::vector<std::vector<double>> noun_features_;
  std::vector<std::vector<double>> attr_features_;
  std::vector<std::vector<double>> backgrounds_;
  std::vector<std::size_t> derangement_;  // context id permutation for the shifted split
};

}  // namespace red
