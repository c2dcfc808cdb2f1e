#include <benchmark/benchmark.h>

#include "red/autodiff.hpp"
#include "red/grounder.hpp"
#include "red/pipeline.hpp"
#include "red/rng.hpp"

using namespace red;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

struct BenchFixture {
  ExperimentConfig config;
  World world;
  EmbeddingTable embedder;
  std::vector<Sample> samples;
  AutoEncoder ae;
  ConfounderDictionary dict;
  ModelBundle bundle;

  BenchFixture()
      : world(world_for_run(config, 1)),
        embedder(embedder_for_run(config, 1)),
        samples(world.generate_split(SplitKind::kConfounded, 192, 99)),
        ae(AutoEncoder::train(pooled_ae_inputs(samples, embedder, false),
                              [] {
                                AutoEncoderConfig c;
                                c.epochs = 2;
                                return c;
                              }(),
                              embedder.fingerprint())),
        dict(build_dictionary(encode_corpus(ae, pooled_ae_inputs(samples, embedder, false),
                                            embedder.fingerprint()),
                              10, DictMetric::kEuclidean, 7, embedder.fingerprint(),
                              ae.fingerprint())),
        bundle([&] {
          TrainOptions options;
          options.mode = DeconfoundMode::kRed;
          options.config.epochs = 0;
          return train_grounder(samples, embedder, &dict, options);
        }()) {}
};

BenchFixture& fixture() {
  static BenchFixture f;
  return f;
}

}  // namespace

static void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Tensor a = random_tensor({n, n}, 1);
  Tensor b = random_tensor({n, n}, 2);
  for (auto _ : state) {
    Tensor c = eval_primitive(Primitive::kMatMul, std::vector<Tensor>{a, b});
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_GrounderForward(benchmark::State& state) {
  BenchFixture& f = fixture();
  std::size_t i = 0;
  for (auto _ : state) {
    const Sample& s = f.samples[i++ % f.samples.size()];
    Tensor r = f.embedder.pool_query(s.query_tokens);
    Prediction p = grounder_forward(s.feature_map, r, f.bundle.grounder, f.bundle.grid_h,
                                    f.bundle.grid_w);
    benchmark::DoNotOptimize(p.cell_probs.data());
  }
}
BENCHMARK(BM_GrounderForward);

static void BM_GrounderForwardRed(benchmark::State& state) {
  BenchFixture& f = fixture();
  std::size_t i = 0;
  for (auto _ : state) {
    const Sample& s = f.samples[i++ % f.samples.size()];
    Tensor r = f.embedder.pool_query(s.query_tokens);
    Tensor rp = deconfound(r, f.dict, *f.bundle.red);
    Prediction p = grounder_forward(s.feature_map, rp, f.bundle.grounder, f.bundle.grid_h,
                                    f.bundle.grid_w);
    benchmark::DoNotOptimize(p.cell_probs.data());
  }
}
BENCHMARK(BM_GrounderForwardRed);

static void BM_Deconfound(benchmark::State& state) {
  BenchFixture& f = fixture();
  Tensor r = f.embedder.pool_query(f.samples[0].query_tokens);
  for (auto _ : state) {
    Tensor rp = deconfound(r, f.dict, *f.bundle.red);
    benchmark::DoNotOptimize(rp.data());
  }
}
BENCHMARK(BM_Deconfound);

static void BM_TrainEpoch(benchmark::State& state) {
  BenchFixture& f = fixture();
  for (auto _ : state) {
    TrainOptions options;
    options.mode = DeconfoundMode::kRed;
    options.config.epochs = 1;
    ModelBundle b = train_grounder(f.samples, f.embedder, &f.dict, options);
    benchmark::DoNotOptimize(b.grounder.w1.data());
  }
}
BENCHMARK(BM_TrainEpoch)->Unit(benchmark::kMillisecond);
