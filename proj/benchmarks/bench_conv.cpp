#include <benchmark/benchmark.h>

#include <random>

#include "dilseg/infer.hpp"
#include "dilseg/model.hpp"
#include "dilseg/netspec.hpp"
#include "dilseg/ops.hpp"
#include "dilseg/synth.hpp"
#include "dilseg/train.hpp"

using namespace dilseg;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint32_t seed) {
  Tensor t(std::move(shape));
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  for (auto& v : t.data) v = dist(gen);
  return t;
}

void BM_Conv2dDilated(benchmark::State& state) {
  const int rate = static_cast<int>(state.range(0));
  const Tensor x = random_tensor({1, 32, 76, 76}, 1);
  const Tensor w = random_tensor({32, 32, 3, 3}, 2);
  const Tensor b = random_tensor({32}, 3);
  const ConvParams params = ConvParams::with_rate(3, rate, Padding::SameZero);
  for (auto _ : state)
    benchmark::DoNotOptimize(conv2d(x, w, b, params));
}
BENCHMARK(BM_Conv2dDilated)->Arg(1)->Arg(2)->Arg(4);

void BM_TrainStep(benchmark::State& state) {
  static const std::vector<std::string> presets = {"front-s", "front-s-d",
                                                   "front-s-d-lfe"};
  const std::string name = presets[static_cast<std::size_t>(state.range(0))];
  SceneConfig sc;
  sc.extent = 128;
  sc.count_min = 10;
  sc.count_max = 16;
  sc.seed = 1;
  auto scenes = std::make_shared<std::vector<Scene>>();
  scenes->push_back(generate_scene(sc));
  const PatchSet patches = sample_patches(scenes, 64, 1);

  Model model = init_model(preset(name, Scale::Micro), 1);
  TrainConfig cfg;
  cfg.steps = 1;
  cfg.batch = 1;
  OptimizerState opt;
  for (auto _ : state) {
    cfg.steps = static_cast<int>(opt.step) + 1;
    benchmark::DoNotOptimize(train(model, patches, cfg, opt));
  }
  state.SetLabel(name);
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Arg(2)->Unit(benchmark::kMillisecond);

void BM_PredictScene(benchmark::State& state) {
  const Model model = init_model(preset("front-s-d", Scale::Micro), 1);
  const Tensor image = random_tensor({3, 256, 256}, 4);
  for (auto _ : state)
    benchmark::DoNotOptimize(predict_scene(model, image));
}
BENCHMARK(BM_PredictScene)->Unit(benchmark::kMillisecond);

}  // namespace

int main(int argc, char** argv) {
  ensure_fast_blas(argv);
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  return 0;
}
