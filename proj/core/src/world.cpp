#include "red/world.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace red {

void WorldSpec::validate() const {
  if (grid_h * grid_w < 4) throw std::invalid_argument("world: grid must have at least 4 cells");
  if (n_contexts < 2) throw std::invalid_argument("world: need at least 2 contexts");
  if (n_nouns < 2 || n_attributes < 2) {
    throw std::invalid_argument("world: need at least 2 nouns and 2 attributes");
  }
  if (n_context_tokens < n_contexts) {
    throw std::invalid_argument("world: need at least one context token per context");
  }
  if (feature_dim == 0) throw std::invalid_argument("world: feature_dim must be positive");
  if (bias_strength < 0) throw std::invalid_argument("world: bias_strength must be >= 0");
  if (context_query_rate < 0 || context_query_rate > 1) {
    throw std::invalid_argument("world: context_query_rate must be in [0,1]");
  }
  if (distractor_min < 2 || distractor_max < distractor_min) {
    throw std::invalid_argument("world: bad distractor range");
  }
  if (1 + distractor_max > cells()) {
    throw std::invalid_argument("world: grid too small to place requested objects");
  }
}

double iou(const Box& a, const Box& b) {
  if (a.w < 0 || a.h < 0 || b.w < 0 || b.h < 0) {
    throw std::invalid_argument("iou: negative box extent");
  }
  const double ax0 = a.cx - a.w / 2, ax1 = a.cx + a.w / 2;
  const double ay0 = a.cy - a.h / 2, ay1 = a.cy + a.h / 2;
  const double bx0 = b.cx - b.w / 2, bx1 = b.cx + b.w / 2;
  const double by0 = b.cy - b.h / 2, by1 = b.cy + b.h / 2;
  const double ix = std::max(0.0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const double iy = std::max(0.0, std::min(ay1, by1) - std::max(ay0, by0));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  if (uni <= 0.0) return 0.0;  // degenerate zero-area boxes
  return inter / uni;
}

const char* split_name(SplitKind split) {
  return split == SplitKind::kConfounded ? "confounded" : "shifted";
}

SplitKind split_from_name(const std::string& name) {
  if (name == "confounded") return SplitKind::kConfounded;
  if (name == "shifted") return SplitKind::kShifted;
  throw std::invalid_argument("unknown split kind: " + name);
}

namespace {

std::vector<double> frozen_vector(std::uint64_t seed, std::size_t dim, double scale) {
  Rng rng(seed);
  std::vector<double> v(dim);
  const double comp = scale / std::sqrt(static_cast<double>(dim));
  for (double& x : v) x = rng.normal(0.0, comp);
  return v;
}

}  // namespace

World::World(WorldSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const std::size_t f = spec_.feature_dim;
  noun_features_.reserve(spec_.n_nouns);
  for (std::size_t n = 0; n < spec_.n_nouns; ++n) {
    noun_features_.push_back(frozen_vector(derive_seed(spec_.seed, "vis-noun", n), f, 1.0));
  }
  attr_features_.reserve(spec_.n_attributes);
  for (std::size_t a = 0; a < spec_.n_attributes; ++a) {
    attr_features_.push_back(frozen_vector(derive_seed(spec_.seed, "vis-attr", a), f, 1.0));
  }
  backgrounds_.reserve(spec_.n_contexts);
  for (std::size_t g = 0; g < spec_.n_contexts; ++g) {
    backgrounds_.push_back(
        frozen_vector(derive_seed(spec_.seed, "vis-background", g), f, spec_.background_scale));
  }
  // Sattolo's algorithm: a single-cycle permutation, hence a derangement.
  derangement_.resize(spec_.n_contexts);
  for (std::size_t i = 0; i < spec_.n_contexts; ++i) derangement_[i] = i;
  Rng rng(derive_seed(spec_.seed, "context-derangement"));
  for (std::size_t i = spec_.n_contexts - 1; i > 0; --i) {
    const std::size_t j = rng.next_index(i);
    std::swap(derangement_[i], derangement_[j]);
  }
}

double World::cell_center_x(std::size_t cell) const {
  const std::size_t col = cell % spec_.grid_w;
  return (static_cast<double>(col) + 0.5) / static_cast<double>(spec_.grid_w);
}

double World::cell_center_y(std::size_t cell) const {
  const std::size_t row = cell / spec_.grid_w;
  return (static_cast<double>(row) + 0.5) / static_cast<double>(spec_.grid_h);
}

std::size_t World::anchor_cell(std::size_t g, std::size_t noun) const {
  if (g >= spec_.n_contexts || noun >= spec_.n_nouns) {
    throw std::invalid_argument("anchor_cell: context or noun id out of range");
  }
  return derive_seed(spec_.seed, "anchor", g * spec_.n_nouns + noun) % spec_.cells();
}

std::size_t World::shifted_context(std::size_t g) const {
  if (g >= spec_.n_contexts) throw std::invalid_argument("shifted_context: id out of range");
  return derangement_[g];
}

std::vector<double> World::location_prior(std::size_t g, std::size_t noun, SplitKind split) const {
  if (g >= spec_.n_contexts || noun >= spec_.n_nouns) {
    throw std::invalid_argument("location_prior: context or noun id out of range");
  }
  const std::size_t ge = split == SplitKind::kShifted ? shifted_context(g) : g;
  const std::size_t anchor = anchor_cell(ge, noun);
  const std::size_t n = spec_.cells();
  std::vector<double> prior(n);
  if (spec_.bias_strength == 0.0) {
    std::fill(prior.begin(), prior.end(), 1.0 / static_cast<double>(n));
    return prior;
  }
  const double ax = cell_center_x(anchor), ay = cell_center_y(anchor);
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < n; ++c) {
    const double dx = cell_center_x(c) - ax;
    const double dy = cell_center_y(c) - ay;
    prior[c] = -spec_.bias_strength * std::sqrt(dx * dx + dy * dy);
    mx = std::max(mx, prior[c]);
  }
  double z = 0.0;
  for (double& p : prior) {
    p = std::exp(p - mx);
    z += p;
  }
  for (double& p : prior) p /= z;
  return prior;
}

namespace {

std::size_t sample_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform(0.0, 1.0);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

}  // namespace

Scene World::sample_scene(SplitKind split, Rng& rng) const {
  Scene scene;
  scene.confounder_id = rng.next_index(spec_.n_contexts);
  const std::size_t g = scene.confounder_id;

  const std::size_t ref_noun = rng.next_index(spec_.n_nouns);
  const std::size_t ref_attr = rng.next_index(spec_.n_attributes);
  const std::size_t n_distractors =
      spec_.distractor_min + rng.next_index(spec_.distractor_max - spec_.distractor_min + 1);

  // Referent identity must stay unique: distractors never repeat the
  // (noun, attribute) pair. The first two are confusable on purpose: one
  // shares the noun, one shares the attribute.
  std::vector<std::pair<std::size_t, std::size_t>> identities;
  identities.emplace_back(ref_noun, ref_attr);
  {
    std::size_t other_attr = rng.next_index(spec_.n_attributes - 1);
    if (other_attr >= ref_attr) ++other_attr;
    identities.emplace_back(ref_noun, other_attr);
    std::size_t other_noun = rng.next_index(spec_.n_nouns - 1);
    if (other_noun >= ref_noun) ++other_noun;
    identities.emplace_back(other_noun, ref_attr);
  }
  while (identities.size() < 1 + n_distractors) {
    const std::size_t n = rng.next_index(spec_.n_nouns);
    const std::size_t a = rng.next_index(spec_.n_attributes);
    if (n == ref_noun && a == ref_attr) continue;  // rejection keeps the referent unique
    identities.emplace_back(n, a);
  }

  std::vector<bool> occupied(spec_.cells(), false);
  scene.referent_index = 0;
  for (std::size_t i = 0; i < identities.size(); ++i) {
    const auto [noun, attr] = identities[i];
    const std::vector<double> prior = location_prior(g, noun, split);
    std::size_t cell = 0;
    bool placed = false;
    for (int attempt = 0; attempt < 64; ++attempt) {
      cell = sample_categorical(prior, rng);
      if (!occupied[cell]) {
        placed = true;
        break;
      }
    }
    if (!placed) {  // fall back to the first free cell; grid capacity was validated
      for (std::size_t c = 0; c < occupied.size(); ++c) {
        if (!occupied[c]) {
          cell = c;
          break;
        }
      }
    }
    occupied[cell] = true;

    PlacedObject obj;
    obj.noun = noun;
    obj.attribute = attr;
    obj.cell = cell;
    const double cw = 1.0 / static_cast<double>(spec_.grid_w);
    const double ch = 1.0 / static_cast<double>(spec_.grid_h);
    obj.box.cx = cell_center_x(cell) + rng.uniform(-0.15, 0.15) * cw;
    obj.box.cy = cell_center_y(cell) + rng.uniform(-0.15, 0.15) * ch;
    obj.box.w = cw * std::exp(rng.uniform(-0.1, 0.1));
    obj.box.h = ch * std::exp(rng.uniform(-0.1, 0.1));
    scene.objects.push_back(obj);
  }
  return scene;
}

Tensor World::render_feature_map(const Scene& scene, Rng& rng) const {
  const std::size_t h = spec_.grid_h, w = spec_.grid_w, f = spec_.feature_dim;
  const std::vector<double>& bg = backgrounds_.at(scene.confounder_id);
  Tensor map({h, w, f});
  for (std::size_t c = 0; c < h * w; ++c) {
    double* cell = map.data() + c * f;
    for (std::size_t d = 0; d < f; ++d) cell[d] = bg[d] + rng.normal(0.0, spec_.noise_sigma);
  }
  for (const PlacedObject& obj : scene.objects) {
    double* cell = map.data() + obj.cell * f;
    const std::vector<double>& nf = noun_features_[obj.noun];
    const std::vector<double>& af = attr_features_[obj.attribute];
    for (std::size_t d = 0; d < f; ++d) cell[d] += nf[d] + af[d];
  }
  return map;
}

std::vector<int> World::context_tokens_of(std::size_t g) const {
  std::vector<int> pool;
  for (std::size_t t = g; t < spec_.n_context_tokens; t += spec_.n_contexts) {
    pool.push_back(spec_.context_token(t));
  }
  return pool;
}

std::vector<int> World::compose_query(const Scene& scene, Rng& rng) const {
  const PlacedObject& ref = scene.referent();
  std::vector<int> tokens{spec_.attribute_token(ref.attribute), spec_.noun_token(ref.noun)};
  const bool with_context =
      spec_.context_query_rate > 0.0 && rng.uniform(0.0, 1.0) < spec_.context_query_rate;
  if (with_context) {
    const std::vector<int> pool = context_tokens_of(scene.confounder_id);
    for (std::size_t k = 0; k < spec_.ctx_tokens_per_query; ++k) {
      tokens.push_back(pool[rng.next_index(pool.size())]);
    }
  }
  return tokens;
}

Sample World::make_sample(SplitKind split, std::uint64_t sample_seed) const {
  Rng rng(sample_seed);
  const Scene scene = sample_scene(split, rng);
  Sample s;
  s.feature_map = render_feature_map(scene, rng);
  s.query_tokens = compose_query(scene, rng);
  s.gt_cell = scene.referent().cell;
  s.gt_box = scene.referent().box;
  s.confounder_id = scene.confounder_id;
  return s;
}

std::vector<Sample> World::generate_split(SplitKind split, std::size_t n,
                                          std::uint64_t root_seed) const {
  if (n < 1) throw std::invalid_argument("generate_split: n must be >= 1");
  std::vector<Sample> samples;
  samples.reserve(n);
  // per-sample seeds keyed by (root, split, index): output is independent of
  // generation order or thread count
  for (std::size_t i = 0; i < n; ++i) {
    samples.push_back(make_sample(split, derive_seed(root_seed, split_name(split), i)));
  }
  return samples;
}

}  // namespace red
