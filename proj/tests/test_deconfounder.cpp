#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "red/autoencoder.hpp"
#include "red/embedding.hpp"
#include "red/kmeans.hpp"
#include "red/pipeline.hpp"
#include "red/red_attention.hpp"
#include "red/rng.hpp"
#include "red/world.hpp"

using namespace red;

namespace {

Tensor constant_rows(std::size_t m, const std::vector<double>& row) {
  Tensor t({m, row.size()});
  for (std::size_t r = 0; r < m; ++r) {
    std::copy(row.begin(), row.end(), t.data() + r * row.size());
  }
  return t;
}

// brute-force optimal k-means inertia by enumerating all assignments
double brute_force_inertia(const Tensor& points, std::size_t k) {
  const std::size_t m = points.rows(), d = points.cols();
  std::vector<std::size_t> assign(m, 0);
  double best = std::numeric_limits<double>::infinity();
  const std::size_t total = static_cast<std::size_t>(std::pow(static_cast<double>(k), m));
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code;
    for (std::size_t i = 0; i < m; ++i) {
      assign[i] = c % k;
      c /= k;
    }
    std::vector<double> sums(k * d, 0.0);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < m; ++i) {
      counts[assign[i]] += 1;
      for (std::size_t j = 0; j < d; ++j) sums[assign[i] * d + j] += points(i, j);
    }
    double inertia = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        const double mean = sums[assign[i] * d + j] / static_cast<double>(counts[assign[i]]);
        const double diff = points(i, j) - mean;
        inertia += diff * diff;
      }
    }
    best = std::min(best, inertia);
  }
  return best;
}

double best_of_seeds_inertia(const Tensor& points, std::size_t k) {
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    best = std::min(best, kmeans_cluster(points, k, seed).inertia);
  }
  return best;
}

AutoEncoderConfig quick_ae_config() {
  AutoEncoderConfig cfg;
  cfg.latent_dim = 4;
  cfg.hidden = 32;
  cfg.epochs = 60;
  cfg.batch = 32;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("autoencoder rejects under-determined fits") {
  AutoEncoderConfig cfg = quick_ae_config();
  Tensor tiny({cfg.latent_dim * 10 - 1, 8});
  CHECK_THROWS(AutoEncoder::train(tiny, cfg, "fp"));
}

TEST_CASE("autoencoder reconstructs a constant dataset to ~zero loss") {
  AutoEncoderConfig cfg = quick_ae_config();
  Tensor data = constant_rows(64, {0.4, -0.2, 0.9, 0.0, 0.3, -0.7, 0.1, 0.5});
  AutoEncoder ae = AutoEncoder::train(data, cfg, "fp");
  CHECK(ae.final_loss() < 1e-4);
  Tensor recon = ae.reconstruct(data);
  for (std::size_t c = 0; c < 8; ++c) {
    CHECK(recon(0, c) == doctest::Approx(data(0, c)).epsilon(0.05));
  }
}

TEST_CASE("linear autoencoder with full-width latent reaches ~zero loss") {
  AutoEncoderConfig cfg = quick_ae_config();
  cfg.activation = "linear";
  cfg.latent_dim = 6;
  cfg.epochs = 400;
  cfg.lr = 3e-3;
  Rng rng(5);
  Tensor data({80, 6});
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = rng.normal(0.0, 0.5);
  AutoEncoder ae = AutoEncoder::train(data, cfg, "fp");
  CHECK(ae.final_loss() < 1e-3);
}

TEST_CASE("autoencoder training is deterministic and the loss curve trends down") {
  Rng rng(8);
  Tensor data({120, 8});
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = rng.normal();
  AutoEncoderConfig cfg = quick_ae_config();
  AutoEncoder a = AutoEncoder::train(data, cfg, "fp");
  AutoEncoder b = AutoEncoder::train(data, cfg, "fp");
  CHECK(a.fingerprint() == b.fingerprint());
  Tensor za = a.encode(data), zb = b.encode(data);
  CHECK(max_abs_diff(za, zb) == 0.0);

  // smoothed over a 10-epoch window, the loss curve does not increase
  const auto& curve = a.loss_curve();
  REQUIRE(curve.size() == cfg.epochs);
  auto window_mean = [&](std::size_t start) {
    double s = 0.0;
    for (std::size_t i = start; i < start + 10; ++i) s += curve[i];
    return s / 10.0;
  };
  for (std::size_t start = 10; start + 10 <= curve.size(); start += 10) {
    CHECK(window_mean(start) <= window_mean(start - 10) * 1.02);
  }
}

TEST_CASE("divergent training aborts with a diagnostic") {
  AutoEncoderConfig cfg = quick_ae_config();
  cfg.lr = 1e18;  // guaranteed blow-up
  cfg.epochs = 50;
  Rng rng(4);
  Tensor data({60, 6});
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = rng.normal(0.0, 100.0);
  CHECK_THROWS_AS(AutoEncoder::train(data, cfg, "fp"), std::runtime_error);
}

TEST_CASE("encode_corpus enforces the embedder fingerprint chain") {
  AutoEncoderConfig cfg = quick_ae_config();
  Tensor data = constant_rows(40, {1, 2, 3, 4, 5, 6});
  AutoEncoder ae = AutoEncoder::train(data, cfg, "the-real-embedder");
  CHECK_THROWS_AS(encode_corpus(ae, data, "some-other-embedder"), std::runtime_error);
  Tensor z = encode_corpus(ae, data, "the-real-embedder");
  CHECK(z.rows() == 40);
  CHECK(z.cols() == cfg.latent_dim);
  // duplicate inputs give duplicate latents
  for (std::size_t c = 0; c < cfg.latent_dim; ++c) CHECK(z(0, c) == z(39, c));
}

TEST_CASE("trained encoder on real queries has no collapsed dimensions") {
  WorldSpec spec;
  spec.seed = 17;
  World world(spec);
  EmbeddingTable embedder(spec.vocab_size(), 32, 7);
  const auto samples = world.generate_split(SplitKind::kConfounded, 400, 3);
  Tensor pooled = pooled_ae_inputs(samples, embedder, false);
  AutoEncoderConfig cfg;
  cfg.latent_dim = 8;
  cfg.hidden = 64;
  cfg.epochs = 40;
  cfg.seed = 2;
  AutoEncoder ae = AutoEncoder::train(pooled, cfg, embedder.fingerprint());
  Tensor z = encode_corpus(ae, pooled, embedder.fingerprint());
  for (std::size_t c = 0; c < cfg.latent_dim; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t r = 0; r < z.rows(); ++r) mean += z(r, c);
    mean /= static_cast<double>(z.rows());
    for (std::size_t r = 0; r < z.rows(); ++r) var += (z(r, c) - mean) * (z(r, c) - mean);
    var /= static_cast<double>(z.rows());
    INFO("latent dim ", c, " variance ", var);
    CHECK(var > 1e-6);
  }
}

TEST_CASE("residual independence report") {
  AutoEncoderConfig cfg = quick_ae_config();
  CHECK_THROWS(residual_independence_report(
      AutoEncoder::train(constant_rows(40, {1, 2, 3, 4}), cfg, "fp"),
      constant_rows(10, {1, 2, 3, 4})));  // < 30 queries rejected

  // correlated raw features: residuals after a trained AE decorrelate
  Rng rng(12);
  Tensor data({300, 6});
  for (std::size_t r = 0; r < 300; ++r) {
    const double shared = rng.normal();
    for (std::size_t c = 0; c < 6; ++c) data(r, c) = shared + 0.3 * rng.normal();
  }
  AutoEncoderConfig cfg2 = quick_ae_config();
  cfg2.latent_dim = 4;
  cfg2.epochs = 120;
  AutoEncoder trained = AutoEncoder::train(data, cfg2, "fp");
  const auto report = residual_independence_report(trained, data);
  CHECK(report.raw_mean_abs_offdiag > 0.5);
  CHECK(report.residual_mean_abs_offdiag < report.raw_mean_abs_offdiag);
  CHECK(report.pass);
}

TEST_CASE("kmeans: two clear 1-d clusters match the brute-force optimum") {
  Tensor points({4, 1}, {0.0, 1.0, 10.0, 11.0});
  KMeansResult km = kmeans_cluster(points, 2, 1);
  std::vector<double> centers{km.centers[0], km.centers[1]};
  std::sort(centers.begin(), centers.end());
  CHECK(centers[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(centers[1] == doctest::Approx(10.5).epsilon(1e-15));
  CHECK(km.inertia == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(km.inertia == doctest::Approx(brute_force_inertia(points, 2)).epsilon(1e-12));
}

TEST_CASE("kmeans equals brute force on small fixtures, best of 5 seeds") {
  Rng rng(77);
  for (int trial = 0; trial < 6; ++trial) {
    const std::size_t m = 5 + static_cast<std::size_t>(trial % 4);  // 5..8 points
    const std::size_t k = 2 + static_cast<std::size_t>(trial % 2);  // 2..3 clusters
    Tensor points({m, 2});
    for (std::size_t i = 0; i < points.size(); ++i) points[i] = rng.uniform(-3, 3);
    const double brute = brute_force_inertia(points, k);
    const double lloyd = best_of_seeds_inertia(points, k);
    INFO("trial ", trial, ": brute ", brute, " lloyd ", lloyd);
    CHECK(lloyd <= brute * (1.0 + 1e-9) + 1e-12);
    CHECK(lloyd >= brute - 1e-9);
  }
}

TEST_CASE("kmeans inertia is non-increasing across lloyd iterations") {
  Rng rng(31);
  Tensor points({60, 3});
  for (std::size_t i = 0; i < points.size(); ++i) points[i] = rng.normal();
  KMeansResult km = kmeans_cluster(points, 5, 3);
  for (std::size_t i = 1; i < km.inertia_trace.size(); ++i) {
    CHECK(km.inertia_trace[i] <= km.inertia_trace[i - 1] + 1e-12);
  }
}

TEST_CASE("kmeans edge cases") {
  Tensor points({3, 2}, {0, 0, 1, 0, 0, 1});
  // as many clusters as distinct points: centers are the points, inertia 0
  KMeansResult km = kmeans_cluster(points, 3, 9);
  CHECK(km.inertia == 0.0);
  CHECK_THROWS(kmeans_cluster(points, 4, 1));

  // all-identical points cannot form a valid dictionary
  Tensor same = constant_rows(6, {2.0, 2.0});
  CHECK_THROWS(build_dictionary(same, 2, DictMetric::kEuclidean, 1, "e", "a"));
}

TEST_CASE("dictionary construction, prior, and immutability hash") {
  Rng rng(15);
  Tensor latents({50, 4});
  for (std::size_t i = 0; i < latents.size(); ++i) latents[i] = rng.normal();
  ConfounderDictionary dict = build_dictionary(latents, 5, DictMetric::kEuclidean, 2, "emb", "ae");
  CHECK(dict.size() == 5);
  for (double p : dict.prior) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
  const std::string h = dict.content_hash();
  dict.centers(0, 0) += 1e-9;
  CHECK(dict.content_hash() != h);  // any mutation shows up in the hash

  // cosine metric clusters on normalized latents: centers of row-normalized
  // points coincide with euclidean clustering of normalized rows
  ConfounderDictionary cos = build_dictionary(latents, 5, DictMetric::kCosine, 2, "emb", "ae");
  Tensor normalized = latents;
  for (std::size_t r = 0; r < 50; ++r) {
    double norm = 0.0;
    for (std::size_t c = 0; c < 4; ++c) norm += normalized(r, c) * normalized(r, c);
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < 4; ++c) normalized(r, c) /= norm;
  }
  ConfounderDictionary eun = build_dictionary(normalized, 5, DictMetric::kEuclidean, 2, "emb", "ae");
  CHECK(max_abs_diff(cos.centers, eun.centers) < 1e-15);
}

TEST_CASE("attention weights: simplex, symmetry and hand values") {
  const std::size_t d_r = 4, d_g = 3, d_a = 2;

  SUBCASE("single entry gives alpha = [1]") {
    ConfounderDictionary dict;
    dict.centers = Tensor({1, d_g}, {1, 2, 3});
    dict.prior = {1.0};
    RedParams p = RedParams::init(d_r, d_g, d_a, 5);
    Tensor alpha = attention_weights(Tensor::from_vector({1, 0, 0, 0}), dict, p);
    REQUIRE(alpha.size() == 1);
    CHECK(alpha[0] == doctest::Approx(1.0).epsilon(1e-15));
  }

  SUBCASE("identical entries and uniform prior give uniform alpha") {
    ConfounderDictionary dict;
    dict.centers = Tensor({3, d_g});
    for (std::size_t j = 0; j < 3; ++j) {
      dict.centers(j, 0) = 1.0;
      dict.centers(j, 1) = -2.0;
      dict.centers(j, 2) = 0.5;
    }
    dict.prior = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    RedParams p = RedParams::init(d_r, d_g, d_a, 5);
    Tensor alpha = attention_weights(Tensor::from_vector({0.3, -1, 2, 0.7}), dict, p);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(alpha[j] == doctest::Approx(1.0 / 3).epsilon(1e-12));
    }
  }

  SUBCASE("scores (0, ln 3) with uniform prior give alpha = (0.25, 0.75)") {
    // build a configuration whose scores are exactly (0, ln 3): W_q^T r = e_1,
    // keys (0, ...) and (ln 3 * sqrt(d_a), ...)
    ConfounderDictionary dict;
    dict.centers = Tensor({2, 1}, {0.0, 1.0});
    dict.prior = {0.5, 0.5};
    RedParams p;
    p.wq = Tensor({1, 1}, {1.0});
    p.wk = Tensor({1, 1}, {std::log(3.0) * 1.0});  // d_a = 1, sqrt(d_a) = 1
    p.wv = Tensor({1, 1}, {1.0});
    p.wo = Tensor({2, 1});
    Tensor alpha = attention_weights(Tensor::from_vector({1.0}), dict, p);
    CHECK(alpha[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(alpha[1] == doctest::Approx(0.75).epsilon(1e-12));
  }

  SUBCASE("alpha stays on the simplex for random instances") {
    Rng rng(6);
    ConfounderDictionary dict;
    dict.centers = Tensor({7, d_g});
    for (std::size_t i = 0; i < dict.centers.size(); ++i) dict.centers[i] = rng.normal();
    dict.prior.assign(7, 1.0 / 7);
    RedParams p = RedParams::init(d_r, d_g, d_a, 9);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor r({d_r});
      for (std::size_t i = 0; i < d_r; ++i) r[i] = rng.normal(0, 3);
      Tensor alpha = attention_weights(r, dict, p);
      double sum = 0.0;
      for (std::size_t j = 0; j < alpha.size(); ++j) {
        CHECK(alpha[j] >= 0.0);
        sum += alpha[j];
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("prior folding: log-prior softmax equals prior-weighted renormalization") {
  Rng rng(41);
  const std::size_t d_r = 6, d_g = 4, d_a = 3, n = 5;
  ConfounderDictionary dict;
  dict.centers = Tensor({n, d_g});
  for (std::size_t i = 0; i < dict.centers.size(); ++i) dict.centers[i] = rng.normal();
  dict.prior = {0.4, 0.3, 0.15, 0.1, 0.05};
  RedParams p = RedParams::init(d_r, d_g, d_a, 1);
  Tensor r({d_r});
  for (std::size_t i = 0; i < d_r; ++i) r[i] = rng.normal();

  Tensor alpha = attention_weights(r, dict, p);

  // recompute: softmax(s) ⊙ prior, renormalized
  Tensor q = eval_primitive(Primitive::kMatMul,
                            std::vector<Tensor>{r.reshaped({1, d_r}), p.wq});
  OpAttrs tb;
  tb.transpose_b = true;
  Tensor k = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{dict.centers, p.wk});
  Tensor scores = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{q, k}, tb);
  Tensor plain({n});
  for (std::size_t j = 0; j < n; ++j) plain[j] = scores[j] / std::sqrt(static_cast<double>(d_a));
  Tensor sm = eval_primitive(Primitive::kSoftmaxLastAxis, std::vector<Tensor>{plain});
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += sm[j] * dict.prior[j];
  for (std::size_t j = 0; j < n; ++j) {
    CHECK(alpha[j] == doctest::Approx(sm[j] * dict.prior[j] / z).epsilon(1e-9));
  }
}

TEST_CASE("deconfound: identity projection reproduces r; N=1 fixes the context") {
  const std::size_t d_r = 5, d_g = 3, d_a = 4;
  ConfounderDictionary dict;
  dict.centers = Tensor({1, d_g}, {0.5, -1.0, 2.0});
  dict.prior = {1.0};
  RedParams p = RedParams::identity_passthrough(d_r, d_g, d_a);
  Tensor r = Tensor::from_vector({1, 2, 3, 4, 5});
  Tensor rp = deconfound(r, dict, p);
  REQUIRE(rp.size() == d_r);
  for (std::size_t i = 0; i < d_r; ++i) CHECK(rp[i] == r[i]);  // bitwise

  // with N = 1 the context is W_v^T g regardless of alpha
  RedParams q = RedParams::init(d_r, d_g, d_a, 3);
  Tape tape;
  RedParamIds ids{tape.constant(q.wq), tape.constant(q.wk), tape.constant(q.wv),
                  tape.constant(q.wo)};
  RedForward fwd = deconfound_batch(tape, tape.constant(r.reshaped({1, d_r})), dict, ids);
  Tensor ctx = tape.value(fwd.context);
  Tensor expected = eval_primitive(Primitive::kMatMul,
                                   std::vector<Tensor>{dict.centers.reshaped({d_g}), q.wv});
  CHECK(max_abs_diff(ctx.reshaped({d_a}), expected) < 1e-12);
}

TEST_CASE("deconfound matches a hand-rolled dense evaluation on a fixed instance") {
  // d_r = d_g = d_a = 2, N = 2, every weight written out
  ConfounderDictionary dict;
  dict.centers = Tensor({2, 2}, {1.0, 0.0, 0.0, 1.0});
  dict.prior = {0.5, 0.5};
  RedParams p;
  p.wq = Tensor({2, 2}, {0.3, -0.1, 0.2, 0.5});
  p.wk = Tensor({2, 2}, {1.0, 0.4, -0.6, 0.2});
  p.wv = Tensor({2, 2}, {0.7, 0.0, 0.1, -0.3});
  p.wo = Tensor({4, 2}, {0.5, 0.1, -0.2, 0.3, 0.8, -0.5, 0.0, 0.25});
  const Tensor r = Tensor::from_vector({0.9, -1.1});

  // straight-line arithmetic with scalars only
  const double q0 = r[0] * 0.3 + r[1] * 0.2, q1 = r[0] * -0.1 + r[1] * 0.5;
  const double k00 = 1.0, k01 = 0.4;         // key of center 0
  const double k10 = -0.6, k11 = 0.2;        // key of center 1
  const double inv = 1.0 / std::sqrt(2.0);
  const double s0 = (q0 * k00 + q1 * k01) * inv + std::log(0.5);
  const double s1 = (q0 * k10 + q1 * k11) * inv + std::log(0.5);
  const double mx = std::max(s0, s1);
  const double e0 = std::exp(s0 - mx), e1 = std::exp(s1 - mx);
  const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
  const double v00 = 0.7, v01 = 0.0;
  const double v10 = 0.1, v11 = -0.3;
  const double c0 = a0 * v00 + a1 * v10, c1 = a0 * v01 + a1 * v11;
  const double cat[4] = {r[0], r[1], c0, c1};
  double expect[2] = {0, 0};
  const double wo[4][2] = {{0.5, 0.1}, {-0.2, 0.3}, {0.8, -0.5}, {0.0, 0.25}};
  for (int i = 0; i < 4; ++i) {
    expect[0] += cat[i] * wo[i][0];
    expect[1] += cat[i] * wo[i][1];
  }

  Tensor rp = deconfound(r, dict, p);
  CHECK(rp[0] == doctest::Approx(expect[0]).epsilon(1e-12));
  CHECK(rp[1] == doctest::Approx(expect[1]).epsilon(1e-12));
}

TEST_CASE("backdoor sum: deconfound equals the alpha-weighted per-entry fusion") {
  // linearity in the value path: r' == sum_j alpha_j * W_o^T concat(r, W_v^T g_j)
  Rng rng(19);
  const std::size_t d_r = 6, d_g = 4, d_a = 3, n = 8;
  ConfounderDictionary dict;
  dict.centers = Tensor({n, d_g});
  for (std::size_t i = 0; i < dict.centers.size(); ++i) dict.centers[i] = rng.normal();
  dict.prior.assign(n, 1.0 / n);
  RedParams p = RedParams::init(d_r, d_g, d_a, 8);
  Tensor r({d_r});
  for (std::size_t i = 0; i < d_r; ++i) r[i] = rng.normal();

  Tensor alpha = attention_weights(r, dict, p);
  Tensor expected({d_r});
  for (std::size_t j = 0; j < n; ++j) {
    Tensor gj({d_g});
    for (std::size_t c = 0; c < d_g; ++c) gj[c] = dict.centers(j, c);
    Tensor vj = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{gj, p.wv});
    Tensor cat = eval_primitive(Primitive::kConcatLastAxis, std::vector<Tensor>{r, vj});
    Tensor fj = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{cat, p.wo});
    for (std::size_t i = 0; i < d_r; ++i) expected[i] += alpha[j] * fj[i];
  }
  Tensor rp = deconfound(r, dict, p);
  CHECK(max_abs_diff(rp, expected) < 1e-9);

  // with W_q = 0, alpha equals the prior exactly and the sum is the explicit
  // prior-weighted backdoor expectation
  RedParams zq = p;
  zq.wq = Tensor({d_r, d_a});
  Tensor alpha_prior = attention_weights(r, dict, zq);
  for (std::size_t j = 0; j < n; ++j) {
    CHECK(alpha_prior[j] == doctest::Approx(dict.prior[j]).epsilon(1e-12));
  }
}

TEST_CASE("dictionary gradients stay isolated during deconfound training") {
  Rng rng(23);
  const std::size_t d_r = 6, d_g = 3, d_a = 4, n = 5;
  ConfounderDictionary dict;
  dict.centers = Tensor({n, d_g});
  for (std::size_t i = 0; i < dict.centers.size(); ++i) dict.centers[i] = rng.normal();
  dict.prior.assign(n, 1.0 / n);
  const std::string before = dict.content_hash();

  RedParams p = RedParams::init(d_r, d_g, d_a, 4);
  Tensor r({1, d_r});
  for (std::size_t i = 0; i < d_r; ++i) r[i] = rng.normal();

  for (int step = 0; step < 5; ++step) {
    Tape tape;
    RedParamIds ids{tape.parameter(p.wq), tape.parameter(p.wk), tape.parameter(p.wv),
                    tape.parameter(p.wo)};
    RedForward fwd = deconfound_batch(tape, tape.constant(r), dict, ids);
    ValueId loss = tape.sum_all(tape.mul(fwd.rprime, fwd.rprime));
    GradientMap grads = tape.backward(loss);
    // gradient flows into every projection
    CHECK(grads.at(ids.wo).size() == p.wo.size());
    std::vector<Tensor*> params{&p.wq, &p.wk, &p.wv, &p.wo};
    std::vector<const Tensor*> gs{&grads.at(ids.wq), &grads.at(ids.wk), &grads.at(ids.wv),
                                  &grads.at(ids.wo)};
    OptimizerState opt = OptimizerState::sgd(0.1);
    optimizer_step(opt, params, gs);
  }
  CHECK(dict.content_hash() == before);
}
