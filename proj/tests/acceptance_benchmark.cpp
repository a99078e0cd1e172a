// Acceptance criterion 7: directional small-object benchmark.
//
// Trains the micro front-s, front-s-d, and front-s-d-lfe presets on the
// default synthetic dataset (64 train / 16 test scenes of 256x256, objects
// 3-12 px, 20k sampled patches, 10k Adam steps, batch 1) over 3 seeds, then
// compares the mean average recall over the Very small + Small size bins.
// Pass requires front-s-d-lfe >= front-s + 0.05 and front-s-d >= front-s.
// Thresholds were fixed by a pre-build pilot at this exact configuration.

#include <chrono>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "dilseg/metrics.hpp"
#include "dilseg/model.hpp"
#include "dilseg/netspec.hpp"
#include "dilseg/synth.hpp"
#include "dilseg/tensor.hpp"
#include "dilseg/train.hpp"

using namespace dilseg;

namespace {

double small_object_ar(const MetricsReport& report) {
  double sum = 0;
  int n = 0;
  for (int bin : {0, 1}) {  // Very small, Small
    if (report.ar_bins[bin]) {
      sum += *report.ar_bins[bin];
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

}  // namespace

int main(int, char** argv) {
  ensure_fast_blas(argv);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration_cast<std::chrono::seconds>(
               std::chrono::steady_clock::now() - t0)
        .count();
  };

  SceneConfig sc;
  sc.extent = 256;
  sc.count_min = 20;
  sc.count_max = 40;
  sc.size_min = 3;
  sc.size_max = 12;

  auto train_scenes = std::make_shared<std::vector<Scene>>();
  std::vector<Scene> test_scenes;
  for (std::uint64_t i = 0; i < 64; ++i) {
    sc.seed = 1000 + i;
    train_scenes->push_back(generate_scene(sc));
  }
  for (std::uint64_t i = 0; i < 16; ++i) {
    sc.seed = 5000 + i;
    test_scenes.push_back(generate_scene(sc));
  }
  std::printf(
      "config: 64 train / 16 test scenes, 256x256, objects 3-12 px, "
      "20000 patches, 10000 steps, batch 1, lr 3e-4, micro scale, seeds "
      "{1,2,3}; thresholds: lfe - front-s >= 0.05, front-s-d >= front-s\n");
  std::fflush(stdout);

  const std::vector<std::string> lineup = {"front-s", "front-s-d",
                                           "front-s-d-lfe"};
  const std::vector<std::uint64_t> seeds = {1, 2, 3};

  std::vector<double> mean_ar(lineup.size(), 0.0);
  for (std::uint64_t seed : seeds) {
    // One PatchSet per seed, shared by every preset: the lineup differs
    // only in architecture.
    const PatchSet patches = sample_patches(train_scenes, 20000, seed);
    for (std::size_t p = 0; p < lineup.size(); ++p) {
      Model model = init_model(preset(lineup[p], Scale::Micro), seed);
      TrainConfig cfg;
      cfg.steps = 10000;
      cfg.batch = 1;
      // 1e-3 at batch 1 drops the 17-layer lfe stack into the all-background
      // optimum on some seeds; 3e-4 trains all three presets cleanly.
      cfg.lr = 3e-4f;
      cfg.seed = seed;
      train(model, patches, cfg);

      const MetricsReport report =
          evaluate(model, test_scenes, EvalConfig{});
      const double ar_small = small_object_ar(report);
      mean_ar[p] += ar_small / seeds.size();
      std::printf("  %-14s seed %llu: small-object AR %.4f  AR %.4f  "
                  "pixel F1 %.4f  [%lld s elapsed]\n",
                  lineup[p].c_str(), static_cast<unsigned long long>(seed),
                  ar_small, report.ar.value_or(0.0), report.pixel_f1,
                  static_cast<long long>(elapsed()));
      std::fflush(stdout);
    }
  }

  std::printf("mean small-object AR: front-s %.4f, front-s-d %.4f, "
              "front-s-d-lfe %.4f\n",
              mean_ar[0], mean_ar[1], mean_ar[2]);

  const bool lfe_gain = mean_ar[2] >= mean_ar[0] + 0.05;
  const bool dil_gain = mean_ar[1] >= mean_ar[0];
  const bool pass = lfe_gain && dil_gain;
  std::printf("%s criterion 7: small-object AR gain over 3 seeds: "
              "front-s-d-lfe - front-s = %+.4f (need >= +0.05)%s, "
              "front-s-d - front-s = %+.4f (need >= 0)%s; %lld s total\n",
              pass ? "PASS" : "FAIL", mean_ar[2] - mean_ar[0],
              lfe_gain ? "" : " VIOLATED", mean_ar[1] - mean_ar[0],
              dil_gain ? "" : " VIOLATED", static_cast<long long>(elapsed()));
  return pass ? 0 : 1;
}
