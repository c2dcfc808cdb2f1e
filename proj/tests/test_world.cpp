#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "red/bias_audit.hpp"
#include "red/dataset_io.hpp"
#include "red/embedding.hpp"
#include "red/world.hpp"

using namespace red;

namespace {

WorldSpec small_spec() {
  WorldSpec spec;
  spec.grid_h = 4;
  spec.grid_w = 4;
  spec.n_nouns = 4;
  spec.n_attributes = 3;
  spec.n_context_tokens = 8;
  spec.n_contexts = 4;
  spec.feature_dim = 8;
  spec.seed = 5;
  return spec;
}

// chi-square two-sample test statistic over cell histograms
double chi_square_p_upper_bound(const std::vector<std::size_t>& a,
                                const std::vector<std::size_t>& b) {
  // Pearson statistic for homogeneity of two multinomials; returns a rough
  // p-value via the Wilson-Hilferty chi-square approximation
  const std::size_t k = a.size();
  double na = 0, nb = 0;
  for (std::size_t i = 0; i < k; ++i) {
    na += static_cast<double>(a[i]);
    nb += static_cast<double>(b[i]);
  }
  double stat = 0.0;
  std::size_t df = 0;
  for (std::size_t i = 0; i < k; ++i) {
    const double tot = static_cast<double>(a[i] + b[i]);
    if (tot == 0) continue;
    df += 1;
    const double ea = tot * na / (na + nb);
    const double eb = tot * nb / (na + nb);
    stat += (a[i] - ea) * (a[i] - ea) / ea + (b[i] - eb) * (b[i] - eb) / eb;
  }
  if (df > 0) df -= 1;
  // Wilson-Hilferty: (X/df)^(1/3) approx normal
  const double z = (std::cbrt(stat / df) - (1.0 - 2.0 / (9.0 * df))) /
                   std::sqrt(2.0 / (9.0 * df));
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace

TEST_CASE("spec validation rejects bad worlds") {
  WorldSpec spec = small_spec();
  spec.grid_h = 1;
  spec.grid_w = 2;
  CHECK_THROWS(World{spec});
  spec = small_spec();
  spec.n_contexts = 1;
  CHECK_THROWS(World{spec});
  spec = small_spec();
  spec.distractor_max = 100;  // more objects than grid cells
  CHECK_THROWS(World{spec});
}

TEST_CASE("zero bias yields exactly uniform location priors") {
  WorldSpec spec = small_spec();
  spec.bias_strength = 0.0;
  World world(spec);
  for (std::size_t g = 0; g < spec.n_contexts; ++g) {
    for (auto split : {SplitKind::kConfounded, SplitKind::kShifted}) {
      const auto prior = world.location_prior(g, 1, split);
      for (double p : prior) CHECK(p == 1.0 / 16.0);
    }
  }
}

TEST_CASE("strong bias peaks the prior exactly at the anchor") {
  WorldSpec spec = small_spec();
  spec.bias_strength = 50.0;
  World world(spec);
  for (std::size_t g = 0; g < spec.n_contexts; ++g) {
    for (std::size_t noun = 0; noun < spec.n_nouns; ++noun) {
      const auto prior = world.location_prior(g, noun, SplitKind::kConfounded);
      const std::size_t argmax =
          std::max_element(prior.begin(), prior.end()) - prior.begin();
      CHECK(argmax == world.anchor_cell(g, noun));
      double sum = 0.0;
      for (double p : prior) sum += p;
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  CHECK_THROWS(world.location_prior(spec.n_contexts, 0, SplitKind::kConfounded));
}

TEST_CASE("the shifted split breaks the context-anchor association") {
  WorldSpec spec = small_spec();
  World world(spec);
  // derangement: no context maps to itself
  for (std::size_t g = 0; g < spec.n_contexts; ++g) {
    CHECK(world.shifted_context(g) != g);
  }
  // priors differ for at least one (g, noun)
  bool any_differ = false;
  for (std::size_t g = 0; g < spec.n_contexts && !any_differ; ++g) {
    for (std::size_t noun = 0; noun < spec.n_nouns && !any_differ; ++noun) {
      const auto a = world.location_prior(g, noun, SplitKind::kConfounded);
      const auto b = world.location_prior(g, noun, SplitKind::kShifted);
      for (std::size_t c = 0; c < a.size(); ++c) {
        if (std::abs(a[c] - b[c]) > 1e-12) {
          any_differ = true;
          break;
        }
      }
    }
  }
  CHECK(any_differ);
}

TEST_CASE("generate_split is deterministic and samples satisfy their invariants") {
  WorldSpec spec = small_spec();
  World world(spec);
  const auto samples = world.generate_split(SplitKind::kConfounded, 40, 77);
  const auto again = world.generate_split(SplitKind::kConfounded, 40, 77);
  REQUIRE(samples.size() == 40);
  CHECK_THROWS(world.generate_split(SplitKind::kConfounded, 0, 1));

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Sample& s = samples[i];
    // determinism, bit for bit
    CHECK(max_abs_diff(s.feature_map, again[i].feature_map) == 0.0);
    CHECK(s.query_tokens == again[i].query_tokens);
    CHECK(s.gt_cell == again[i].gt_cell);
    // box center inside the gt cell
    const std::size_t col = s.gt_cell % spec.grid_w;
    const std::size_t row = s.gt_cell / spec.grid_w;
    CHECK(s.gt_box.cx >= static_cast<double>(col) / 4.0);
    CHECK(s.gt_box.cx <= static_cast<double>(col + 1) / 4.0);
    CHECK(s.gt_box.cy >= static_cast<double>(row) / 4.0);
    CHECK(s.gt_box.cy <= static_cast<double>(row + 1) / 4.0);
    // query starts with attribute then noun token
    REQUIRE(s.query_tokens.size() >= 2);
    CHECK(s.query_tokens[0] < static_cast<int>(spec.n_attributes));
    CHECK(s.query_tokens[1] >= static_cast<int>(spec.n_attributes));
    CHECK(s.query_tokens[1] < static_cast<int>(spec.n_attributes + spec.n_nouns));
    CHECK(s.confounder_id < spec.n_contexts);
  }
}

TEST_CASE("scenes keep referents unique and object cells distinct") {
  WorldSpec spec = small_spec();
  World world(spec);
  Rng rng(123);
  for (int trial = 0; trial < 50; ++trial) {
    const Scene scene = world.sample_scene(SplitKind::kConfounded, rng);
    std::set<std::size_t> cells;
    const auto& ref = scene.referent();
    for (std::size_t i = 0; i < scene.objects.size(); ++i) {
      const auto& obj = scene.objects[i];
      CHECK(cells.insert(obj.cell).second);  // all cells distinct
      if (i != scene.referent_index) {
        CHECK((obj.noun != ref.noun || obj.attribute != ref.attribute));
      }
    }
    CHECK(scene.objects.size() >= 1 + spec.distractor_min);
    CHECK(scene.objects.size() <= 1 + spec.distractor_max);
  }
}

TEST_CASE("render: noiseless object cell equals the embedding sum") {
  WorldSpec spec = small_spec();
  spec.noise_sigma = 0.0;
  spec.background_scale = 0.0;  // zeroed context background
  World world(spec);
  Scene scene;
  scene.confounder_id = 1;
  scene.objects.push_back(PlacedObject{2, 1, 5, Box{0.4, 0.4, 0.2, 0.2}});
  scene.referent_index = 0;
  Rng rng(9);
  Tensor map = world.render_feature_map(scene, rng);
  const auto& nf = world.noun_feature(2);
  const auto& af = world.attribute_feature(1);
  for (std::size_t d = 0; d < spec.feature_dim; ++d) {
    CHECK(map[5 * spec.feature_dim + d] == doctest::Approx(nf[d] + af[d]).epsilon(1e-15));
    CHECK(map[0 * spec.feature_dim + d] == 0.0);  // empty cell = zeroed background
  }
}

TEST_CASE("render: empty scene is pure background; backgrounds differ per context") {
  WorldSpec spec = small_spec();
  spec.noise_sigma = 0.0;
  World world(spec);
  Scene empty;
  empty.confounder_id = 2;
  empty.referent_index = 0;
  Rng rng(9);
  Tensor map = world.render_feature_map(empty, rng);
  const auto& bg = world.context_background(2);
  for (std::size_t c = 0; c < spec.cells(); ++c) {
    for (std::size_t d = 0; d < spec.feature_dim; ++d) {
      CHECK(map[c * spec.feature_dim + d] == bg[d]);
    }
  }
  Scene other = empty;
  other.confounder_id = 3;
  Tensor map2 = world.render_feature_map(other, rng);
  CHECK(max_abs_diff(map, map2) > 1e-6);
}

TEST_CASE("compose_query context rates") {
  WorldSpec spec = small_spec();
  World world(spec);
  Rng rng(33);

  Scene scene;
  scene.confounder_id = 1;
  scene.objects.push_back(PlacedObject{0, 0, 0, {}});
  scene.referent_index = 0;

  {
    WorldSpec s0 = spec;
    s0.context_query_rate = 0.0;
    World w0(s0);
    for (int i = 0; i < 20; ++i) {
      const auto q = w0.compose_query(scene, rng);
      CHECK(q.size() == 2);  // exactly [attribute, noun]
    }
  }
  {
    WorldSpec s1 = spec;
    s1.context_query_rate = 1.0;
    World w1(s1);
    const auto pool = w1.context_tokens_of(1);
    for (int i = 0; i < 20; ++i) {
      const auto q = w1.compose_query(scene, rng);
      CHECK(q.size() == 2 + s1.ctx_tokens_per_query);
      bool has_ctx = false;
      for (int t : q) {
        if (std::find(pool.begin(), pool.end(), t) != pool.end()) has_ctx = true;
      }
      CHECK(has_ctx);
    }
    // different context, same referent: context tokens differ
    Scene scene2 = scene;
    scene2.confounder_id = 3;
    const auto pool2 = w1.context_tokens_of(3);
    const auto q2 = w1.compose_query(scene2, rng);
    for (int t : q2) {
      CHECK(std::find(pool.begin(), pool.end(), t) == pool.end());
    }
    (void)pool2;
  }
}

TEST_CASE("causal-graph fidelity: within a context stratum, context tokens are "
          "independent of location") {
  WorldSpec spec = small_spec();
  spec.context_query_rate = 0.5;
  World world(spec);
  const auto samples = world.generate_split(SplitKind::kConfounded, 4000, 2024);
  // within each g: compare gt_cell histograms of queries with vs without
  // context tokens
  for (std::size_t g = 0; g < spec.n_contexts; ++g) {
    std::vector<std::size_t> with_ctx(spec.cells(), 0), without_ctx(spec.cells(), 0);
    for (const Sample& s : samples) {
      if (s.confounder_id != g) continue;
      const bool has_ctx = s.query_tokens.size() > 2;
      (has_ctx ? with_ctx : without_ctx)[s.gt_cell] += 1;
    }
    const double p = chi_square_p_upper_bound(with_ctx, without_ctx);
    INFO("stratum ", g, " p=", p);
    CHECK(p > 0.01);
  }
}

TEST_CASE("beta = 0 makes confounded and shifted splits statistically alike") {
  WorldSpec spec = small_spec();
  spec.bias_strength = 0.0;
  World world(spec);
  const auto a = world.generate_split(SplitKind::kConfounded, 5000, 5);
  const auto b = world.generate_split(SplitKind::kShifted, 5000, 6);
  for (std::size_t noun = 0; noun < spec.n_nouns; ++noun) {
    const int tok = spec.noun_token(noun);
    std::vector<std::size_t> ha(spec.cells(), 0), hb(spec.cells(), 0);
    for (const Sample& s : a) {
      if (std::find(s.query_tokens.begin(), s.query_tokens.end(), tok) != s.query_tokens.end()) {
        ha[s.gt_cell] += 1;
      }
    }
    for (const Sample& s : b) {
      if (std::find(s.query_tokens.begin(), s.query_tokens.end(), tok) != s.query_tokens.end()) {
        hb[s.gt_cell] += 1;
      }
    }
    const double p = chi_square_p_upper_bound(ha, hb);
    INFO("noun ", noun, " p=", p);
    CHECK(p > 0.01);
  }
}

TEST_CASE("mutual information between noun and location grows with bias strength") {
  auto mi_estimate = [](const std::vector<Sample>& samples, const WorldSpec& spec) {
    const std::size_t cells = spec.cells();
    std::vector<double> joint(spec.n_nouns * cells, 0.0), pn(spec.n_nouns, 0.0), pc(cells, 0.0);
    for (const Sample& s : samples) {
      const std::size_t noun = static_cast<std::size_t>(s.query_tokens[1]) - spec.n_attributes;
      joint[noun * cells + s.gt_cell] += 1.0;
      pn[noun] += 1.0;
      pc[s.gt_cell] += 1.0;
    }
    const double n = static_cast<double>(samples.size());
    double mi = 0.0;
    for (std::size_t i = 0; i < spec.n_nouns; ++i) {
      for (std::size_t c = 0; c < cells; ++c) {
        const double pj = joint[i * cells + c] / n;
        if (pj <= 0) continue;
        mi += pj * std::log(pj * n * n / (pn[i] * pc[c]));
      }
    }
    return mi;
  };
  std::vector<double> mis;
  for (double beta : {0.0, 1.0, 5.0}) {
    WorldSpec spec = small_spec();
    spec.bias_strength = beta;
    World world(spec);
    mis.push_back(mi_estimate(world.generate_split(SplitKind::kConfounded, 4000, 9), spec));
  }
  CHECK(mis[0] <= mis[1]);
  CHECK(mis[1] <= mis[2]);
}

TEST_CASE("embedding lookups are exact rows and pooling is a mean") {
  EmbeddingTable table(10, 6, 99);
  CHECK(table.fingerprint().size() == 16);
  const Tensor rows = table.embed_tokens(std::vector<int>{3, 3, 7});
  REQUIRE(rows.rows() == 3);
  for (std::size_t c = 0; c < 6; ++c) {
    CHECK(rows(0, c) == table.table()(3, c));
    CHECK(rows(1, c) == rows(0, c));
    CHECK(rows(2, c) == table.table()(7, c));
  }
  CHECK_THROWS(table.embed_tokens(std::vector<int>{10}));
  CHECK_THROWS(table.embed_tokens(std::vector<int>{}));

  // mean pooling examples
  Tensor two({2, 2}, {1.0, 0.0, -1.0, 0.0});
  Tensor pooled = pool_rows(two);
  CHECK(pooled[0] == 0.0);
  CHECK(pooled[1] == 0.0);
  Tensor three({3, 2}, {1, 0, 0, 1, 1, 1});
  Tensor p3 = pool_rows(three);
  CHECK(p3[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(p3[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

  // permutation invariance of the pooled query
  const Tensor a = table.pool_query(std::vector<int>{1, 4, 8});
  const Tensor b = table.pool_query(std::vector<int>{8, 1, 4});
  CHECK(max_abs_diff(a, b) < 1e-15);
}

TEST_CASE("jsonl round trip and meta stripping") {
  WorldSpec spec = small_spec();
  World world(spec);
  const auto samples = world.generate_split(SplitKind::kConfounded, 12, 4);
  const auto path = std::filesystem::temp_directory_path() / "red_test_split.jsonl";
  write_jsonl(path, samples);

  const auto kept = read_jsonl(path, MetaPolicy::kKeep);
  REQUIRE(kept.size() == samples.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    CHECK(kept[i].confounder_id == samples[i].confounder_id);
    CHECK(kept[i].gt_cell == samples[i].gt_cell);
    CHECK(kept[i].query_tokens == samples[i].query_tokens);
    CHECK(max_abs_diff(kept[i].feature_map, samples[i].feature_map) == 0.0);
  }
  const auto stripped = read_jsonl(path);
  for (const Sample& s : stripped) CHECK(s.confounder_id == kNoConfounder);
  std::filesystem::remove(path);
}

TEST_CASE("iou cases") {
  CHECK(iou(Box{0.5, 0.5, 0.2, 0.2}, Box{0.5, 0.5, 0.2, 0.2}) == doctest::Approx(1.0));
  CHECK(iou(Box{0.1, 0.1, 0.1, 0.1}, Box{0.9, 0.9, 0.1, 0.1}) == 0.0);
  // corner boxes (0,0)-(2,2) and (1,1)-(3,3) in a 3-unit frame: IoU = 1/7
  CHECK(iou(Box{1.0, 1.0, 2.0, 2.0}, Box{2.0, 2.0, 2.0, 2.0}) ==
        doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  CHECK(iou(Box{0, 0, 0, 0}, Box{0, 0, 0, 0}) == 0.0);  // degenerate
  CHECK_THROWS(iou(Box{0, 0, -1, 1}, Box{0, 0, 1, 1}));
}

TEST_CASE("bias audit: single occurrence and arithmetic means") {
  WorldSpec spec = small_spec();
  std::vector<Sample> samples(2);
  samples[0].query_tokens = {0, spec.noun_token(1)};
  samples[0].gt_box = Box{0.2, 0.3, 0.1, 0.1};
  samples[0].gt_cell = 0;
  samples[1].query_tokens = {1, spec.noun_token(1)};
  samples[1].gt_box = Box{0.6, 0.5, 0.2, 0.2};
  samples[1].gt_cell = 5;

  BiasReport one = token_location_stats({samples.data(), 1}, spec.noun_token(1), 4, 4);
  CHECK(one.n == 1);
  CHECK(one.mean_box.cx == 0.2);

  BiasReport both = token_location_stats({samples.data(), 2}, spec.noun_token(1), 4, 4);
  CHECK(both.n == 2);
  CHECK(both.mean_box.cx == doctest::Approx(0.4).epsilon(1e-15));
  double hist_sum = 0.0;
  for (double v : both.x_histogram) hist_sum += v;
  CHECK(hist_sum == doctest::Approx(1.0).epsilon(1e-9));

  CHECK_THROWS(token_location_stats({samples.data(), 2}, spec.noun_token(3), 4, 4));
}

TEST_CASE("concentration is zero iff the cell histogram is uniform") {
  WorldSpec spec = small_spec();
  std::vector<Sample> samples;
  for (std::size_t c = 0; c < spec.cells(); ++c) {
    Sample s;
    s.query_tokens = {0, spec.noun_token(0)};
    s.gt_cell = c;
    s.gt_box = Box{0.5, 0.5, 0.2, 0.2};
    samples.push_back(s);
  }
  BiasReport uniform = token_location_stats(samples, spec.noun_token(0), 4, 4);
  CHECK(uniform.concentration == doctest::Approx(0.0).epsilon(1e-12));

  samples.resize(4);  // all mass on 4 cells: strictly positive KL
  for (auto& s : samples) s.gt_cell = 3;
  BiasReport peaked = token_location_stats(samples, spec.noun_token(0), 4, 4);
  CHECK(peaked.concentration > 1.0);
}

TEST_CASE("biased split concentrates; unbiased split does not") {
  WorldSpec spec = small_spec();
  spec.bias_strength = 5.0;
  World biased(spec);
  WorldSpec spec0 = spec;
  spec0.bias_strength = 0.0;
  World unbiased(spec0);

  const auto hot = biased.generate_split(SplitKind::kConfounded, 5000, 11);
  const auto flat = unbiased.generate_split(SplitKind::kConfounded, 5000, 11);
  const auto hot_summary = split_bias_summary(hot, spec);
  const auto flat_summary = split_bias_summary(flat, spec0);

  CHECK(hot_summary.aggregate_concentration >= 5.0 * flat_summary.aggregate_concentration);
  // derived bound: the plug-in KL of ~1000 draws over 16 cells stays small
  for (const auto& r : flat_summary.per_noun) {
    INFO("noun token ", r.token, " concentration ", r.concentration);
    CHECK(r.concentration < 0.05);
  }
  // sorted by concentration descending
  for (std::size_t i = 1; i < hot_summary.per_noun.size(); ++i) {
    CHECK(hot_summary.per_noun[i - 1].concentration >= hot_summary.per_noun[i].concentration);
  }
  // occurrence-weighted aggregate matches a direct recomputation
  double acc = 0.0, w = 0.0;
  for (const auto& r : hot_summary.per_noun) {
    acc += static_cast<double>(r.n) * r.concentration;
    w += static_cast<double>(r.n);
  }
  CHECK(hot_summary.aggregate_concentration == doctest::Approx(acc / w).epsilon(1e-9));
}

TEST_CASE("audit reports round-trip through csv and json") {
  WorldSpec spec = small_spec();
  World world(spec);
  const auto samples = world.generate_split(SplitKind::kConfounded, 200, 21);
  const auto summary = split_bias_summary(samples, spec);
  REQUIRE_FALSE(summary.per_noun.empty());

  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path();
  emit_report(summary.per_noun, dir / "red_bias.json", ReportFormat::kJson);
  const auto from_json = parse_report(dir / "red_bias.json", ReportFormat::kJson);
  emit_report(from_json, dir / "red_bias.csv", ReportFormat::kCsv);
  const auto from_csv = parse_report(dir / "red_bias.csv", ReportFormat::kCsv);

  REQUIRE(from_csv.size() == summary.per_noun.size());
  for (std::size_t i = 0; i < from_csv.size(); ++i) {
    CHECK(from_csv[i].token == summary.per_noun[i].token);
    CHECK(from_csv[i].n == summary.per_noun[i].n);
    CHECK(from_csv[i].concentration ==
          doctest::Approx(summary.per_noun[i].concentration).epsilon(1e-12));
    CHECK(from_csv[i].mean_box.cx == doctest::Approx(summary.per_noun[i].mean_box.cx).epsilon(1e-12));
    for (std::size_t b = 0; b < from_csv[i].x_histogram.size(); ++b) {
      CHECK(from_csv[i].x_histogram[b] ==
            doctest::Approx(summary.per_noun[i].x_histogram[b]).epsilon(1e-12));
    }
  }

  // header-only CSV for an empty report list
  emit_report({}, dir / "red_bias_empty.csv", ReportFormat::kCsv);
  const auto empty = parse_report(dir / "red_bias_empty.csv", ReportFormat::kCsv);
  CHECK(empty.empty());
  fs::remove(dir / "red_bias.json");
  fs::remove(dir / "red_bias.csv");
  fs::remove(dir / "red_bias_empty.csv");
}
