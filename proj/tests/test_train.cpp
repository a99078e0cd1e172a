#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <fstream>
#include <memory>
#include <random>

#include "doctest.h"

#include "dilseg/train.hpp"

using dilseg::Model;
using dilseg::OptimizerState;
using dilseg::PatchSet;
using dilseg::Scene;
using dilseg::SceneConfig;
using dilseg::Tensor;
using dilseg::TrainConfig;

namespace {

std::shared_ptr<std::vector<Scene>> tiny_scenes(std::uint64_t seed, int n = 2) {
  SceneConfig c;
  c.extent = 128;
  c.count_min = 8;
  c.count_max = 12;
  c.size_min = 3;
  c.size_max = 12;
  auto scenes = std::make_shared<std::vector<Scene>>();
  for (int i = 0; i < n; ++i) {
    c.seed = seed ^ static_cast<std::uint64_t>(i);
    scenes->push_back(dilseg::generate_scene(c));
  }
  return scenes;
}

bool params_equal(const Model& a, const Model& b) {
  if (a.params.size() != b.params.size()) return false;
  for (const auto& [name, t] : a.params) {
    auto it = b.params.find(name);
    if (it == b.params.end() || t.data != it->second.data) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("adam_step: zero gradients leave parameters unchanged") {
  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 1);
  const Model before = m;
  dilseg::GradMap grads;
  for (const auto& [name, t] : m.params) grads[name] = Tensor(t.shape);
  OptimizerState state;
  TrainConfig cfg;
  dilseg::adam_step(m, grads, state, cfg);
  CHECK(params_equal(m, before));
  CHECK(state.step == 1);
}

TEST_CASE("adam_step: nonzero gradients change at least one parameter") {
  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 1);
  const Model before = m;
  dilseg::GradMap grads;
  for (const auto& [name, t] : m.params) grads[name] = Tensor::full(t.shape, 0.01f);
  OptimizerState state;
  TrainConfig cfg;
  dilseg::adam_step(m, grads, state, cfg);
  CHECK_FALSE(params_equal(m, before));
}

TEST_CASE("adam_step: missing gradient or shape mismatch is an error") {
  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 1);
  OptimizerState state;
  TrainConfig cfg;
  dilseg::GradMap empty;
  CHECK_THROWS((void)dilseg::adam_step(m, empty, state, cfg));

  dilseg::GradMap bad;
  for (const auto& [name, t] : m.params) bad[name] = Tensor(t.shape);
  bad["front.0.weight"] = Tensor({1});
  CHECK_THROWS((void)dilseg::adam_step(m, bad, state, cfg));
}

TEST_CASE("adam converges on a scalar quadratic") {
  // Minimize (x-3)^2 with the optimizer alone: build a one-parameter model.
  Model m;
  m.params["x"] = Tensor({1});
  OptimizerState state;
  TrainConfig cfg;
  cfg.lr = 0.1f;
  for (int step = 0; step < 500; ++step) {
    dilseg::GradMap grads;
    Tensor g({1});
    g.data[0] = 2.0f * (m.params["x"].data[0] - 3.0f);
    grads["x"] = g;
    dilseg::adam_step(m, grads, state, cfg);
  }
  CHECK(std::abs(m.params["x"].data[0] - 3.0f) < 1e-3f);
  CHECK(state.step == 500);
}

TEST_CASE("loss_and_grads equals a hand-built forward + masked cross-entropy") {
  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 5);
  auto scenes = tiny_scenes(3);
  const PatchSet ps = dilseg::sample_patches(scenes, 4, 7);
  const auto [inputs, labels] = ps.gather({0, 1, 2, 3});

  const float loss = dilseg::loss_and_grads(m, inputs, labels, 16, nullptr);

  // Oracle: full-resolution forward, labels embedded in the 16x16 center,
  // loss masked to that center.
  const auto res = dilseg::forward(m, inputs);
  Tensor target(res.prob.shape);
  Tensor mask({res.prob.shape[2], res.prob.shape[3]});
  const std::size_t off = (res.prob.shape[2] - 16) / 2;
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 16; ++x) {
      mask.at(off + y, off + x) = 1.0f;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t c = 0; c < 2; ++c)
          target.at(n, c, off + y, off + x) = labels.at(n, c, y, x);
    }
  // Fill the unmasked region with an arbitrary one-hot class; it must not
  // participate in the loss.
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t y = 0; y < res.prob.shape[2]; ++y)
      for (std::size_t x = 0; x < res.prob.shape[3]; ++x)
        if (mask.at(y, x) == 0.0f) target.at(n, 0, y, x) = 1.0f;

  const float oracle = dilseg::cross_entropy(res.prob, target, mask);
  CHECK(loss == doctest::Approx(oracle).epsilon(1e-5));
}

TEST_CASE("untrained loss on sampled patches is near ln 2") {
  Model m =
      dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 11);
  auto scenes = tiny_scenes(5);
  const PatchSet ps = dilseg::sample_patches(scenes, 32, 13);
  std::vector<std::size_t> idx(32);
  for (std::size_t i = 0; i < 32; ++i) idx[i] = i;
  const auto [inputs, labels] = ps.gather(idx);
  const float loss = dilseg::loss_and_grads(m, inputs, labels, 16, nullptr);
  CHECK(std::abs(loss - std::log(2.0f)) <= 0.1f);
}

TEST_CASE("train: loss history length equals the step count, deterministic") {
  auto scenes = tiny_scenes(9);
  const PatchSet ps = dilseg::sample_patches(scenes, 64, 21);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 4;
  cfg.seed = 2;

  Model a = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 3);
  Model b = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 3);
  const auto la = dilseg::train(a, ps, cfg);
  const auto lb = dilseg::train(b, ps, cfg);
  CHECK(la.size() == 5);
  CHECK(la == lb);  // bit-identical losses
  CHECK(params_equal(a, b));
  for (float l : la) CHECK(std::isfinite(l));
}

TEST_CASE("train aborts on a non-finite loss naming the step") {
  auto scenes = tiny_scenes(10);
  const PatchSet ps = dilseg::sample_patches(scenes, 16, 2);
  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 4);
  // Poison the final (softmax) layer: earlier layers are relu'd, and
  // relu(NaN) flushes to zero, which would hide the damage.
  const auto last = m.spec.head.size() - 1;
  m.params["head." + std::to_string(last) + ".weight"].data[0] =
      std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  CHECK_THROWS_AS((void)dilseg::train(m, ps, cfg), std::runtime_error);
}

TEST_CASE("overfit trend: 100-step moving average decreases") {
  auto scenes = tiny_scenes(12);
  const PatchSet ps = dilseg::sample_patches(scenes, 8, 31);
  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 6);
  TrainConfig cfg;
  cfg.steps = 300;
  cfg.batch = 1;
  cfg.seed = 1;
  const auto losses = dilseg::train(m, ps, cfg);
  auto avg = [&](std::size_t lo, std::size_t hi) {
    double s = 0;
    for (std::size_t i = lo; i < hi; ++i) s += losses[i];
    return s / static_cast<double>(hi - lo);
  };
  CHECK(avg(200, 300) < avg(0, 100));
}

TEST_CASE("checkpoint round trip is bit exact") {
  namespace fs = std::filesystem;
  const auto path = (fs::temp_directory_path() / "dilseg_ckpt_test.ckpt").string();

  auto scenes = tiny_scenes(14);
  const PatchSet ps = dilseg::sample_patches(scenes, 16, 3);
  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 8);
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  OptimizerState state;
  dilseg::train(m, ps, cfg, state);
  dilseg::save_checkpoint(m, state, path);

  const auto [back, bstate] = dilseg::load_checkpoint(path);
  CHECK(params_equal(m, back));
  CHECK(back.spec.name == m.spec.name);
  CHECK(back.seed == m.seed);
  CHECK(bstate.step == state.step);
  for (const auto& [name, t] : state.m) CHECK(bstate.m.at(name).data == t.data);
  for (const auto& [name, t] : state.v) CHECK(bstate.v.at(name).data == t.data);

  // Forward outputs agree bit-for-bit.
  const Tensor input = ps.input_batch(0, 1);
  const auto ra = dilseg::forward(m, input);
  const auto rb = dilseg::forward(back, input);
  CHECK(ra.prob.data == rb.prob.data);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint loader rejects wrong magic and truncation") {
  namespace fs = std::filesystem;
  const auto path = (fs::temp_directory_path() / "dilseg_ckpt_bad.ckpt").string();
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE" << std::string(64, '\0');
  }
  CHECK_THROWS((void)dilseg::load_checkpoint(path));

  Model m = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 1);
  OptimizerState state;
  dilseg::save_checkpoint(m, state, path);
  // Truncate mid-record.
  const auto full = fs::file_size(path);
  fs::resize_file(path, full - 7);
  CHECK_THROWS((void)dilseg::load_checkpoint(path));
  std::remove(path.c_str());
}

TEST_CASE("resume from checkpoint equals the uninterrupted run") {
  namespace fs = std::filesystem;
  const auto path = (fs::temp_directory_path() / "dilseg_resume_test.ckpt").string();

  auto scenes = tiny_scenes(15);
  const PatchSet ps = dilseg::sample_patches(scenes, 32, 4);
  TrainConfig cfg;
  cfg.batch = 2;
  cfg.seed = 5;

  // Uninterrupted: 8 steps.
  Model whole = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 9);
  OptimizerState wstate;
  cfg.steps = 8;
  auto whole_losses = dilseg::train(whole, ps, cfg, wstate);

  // Interrupted: 4 steps, checkpoint, reload, 4 more.
  Model part = dilseg::init_model(dilseg::preset("front-s-d", dilseg::Scale::Micro), 9);
  OptimizerState pstate;
  cfg.steps = 4;
  auto first = dilseg::train(part, ps, cfg, pstate);
  dilseg::save_checkpoint(part, pstate, path);
  auto [resumed, rstate] = dilseg::load_checkpoint(path);
  cfg.steps = 8;  // steps is the total target; the resumed call runs 4 more
  auto second = dilseg::train(resumed, ps, cfg, rstate);

  first.insert(first.end(), second.begin(), second.end());
  CHECK(first == whole_losses);
  CHECK(params_equal(resumed, whole));
  std::remove(path.c_str());
}
