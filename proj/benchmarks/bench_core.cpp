#include <benchmark/benchmark.h>

#include "nestnet/data.hpp"
#include "nestnet/losses.hpp"
#include "nestnet/trainer.hpp"

using namespace nestnet;

namespace {

EncoderConfig bench_config() {
  EncoderConfig cfg;
  cfg.depth_max = 4;
  cfg.d_model = 16;
  cfg.ffn_max = 64;
  cfg.heads = 2;
  cfg.conv_kernel = 3;
  cfg.vocab = 11;
  cfg.d_in = 8;
  return cfg;
}

Grid bench_grid() {
  Grid g;
  g.depths = {2, 4};
  g.widths = {32, 64};
  g.precisions = {4, 8};
  return g;
}

Tensor bench_feats(std::size_t frames) {
  Rng rng(7);
  Tensor t = Tensor::zeros({frames, 8});
  for (double& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

static void BM_GraphMatmul(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  Tensor a = Tensor::zeros({n, n}), b = Tensor::zeros({n, n});
  for (double& v : a.values()) v = rng.uniform(-1, 1);
  for (double& v : b.values()) v = rng.uniform(-1, 1);
  for (auto _ : state) {
    Graph g(false);
    const NodeId y = g.matmul(g.input("a", a), g.input("b", b));
    benchmark::DoNotOptimize(g.val(y).data());
  }
}
BENCHMARK(BM_GraphMatmul)->Arg(16)->Arg(64);

static void BM_EncoderForward(benchmark::State& state) {
  Rng rng(2);
  SupernetModel model =
      SupernetModel::init(bench_config(), bench_grid(), MaskPolicy::leading, rng);
  const Tensor feats = bench_feats(18);
  const SubnetSpec spec{4, 64, 8};
  for (auto _ : state) {
    benchmark::DoNotOptimize(model.frame_log_posteriors(feats, spec).data());
  }
}
BENCHMARK(BM_EncoderForward);

static void BM_CtcLoss(benchmark::State& state) {
  Rng rng(3);
  Tensor lp = Tensor::zeros({24, 11});
  for (double& v : lp.values()) v = rng.uniform(-3.0, 0.0);
  const std::vector<std::int32_t> target{3, 1, 4, 1, 5};
  for (auto _ : state) {
    Graph g(false);
    const NodeId loss = ctc_loss(g, g.input("lp", lp), target);
    GradMap grads = g.gradients(loss);
    benchmark::DoNotOptimize(grads);
  }
}
BENCHMARK(BM_CtcLoss);

static void BM_TrainStep(benchmark::State& state) {
  CorpusMeta meta;
  meta.seed = 42;
  meta.n_train = 64;
  meta.n_dev = 4;
  meta.n_test = 4;
  const ToyCorpus corpus = generate_corpus(meta);
  TrainSetup setup;
  setup.encoder = bench_config();
  setup.grid = bench_grid();
  setup.train.mode = TrainMode::all_in_one_kl;
  setup.train.batch_size = 16;
  setup.train.total_steps = 1u << 20;

  Rng init(splitmix64(43)), data(splitmix64(44)), sample(splitmix64(45));
  SupernetModel model =
      SupernetModel::init(setup.encoder, setup.grid, setup.policy, init);
  AdamState opt;
  for (const ParamInfo& info : param_inventory(model.config)) {
    opt.m.emplace(info.name, Tensor::zeros(info.shape));
    opt.v.emplace(info.name, Tensor::zeros(info.shape));
  }
  for (const auto& [key, value] : model.scales) {
    (void)value;
    opt.m.emplace(key, Tensor::zeros({1}));
    opt.v.emplace(key, Tensor::zeros({1}));
  }
  std::uint64_t step = 0;
  for (auto _ : state) {
    std::vector<std::size_t> idx(setup.train.batch_size);
    for (auto& i : idx) i = data.index(corpus.meta.n_train);
    const Batch batch = make_batch(corpus, idx);
    const StepMetrics m =
        train_step(model, opt, batch, setup, ++step, sample);
    benchmark::DoNotOptimize(m.total);
  }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
