#include <random>
#include <set>

#include "doctest.h"

#include "dilseg/netspec.hpp"
#include "dilseg/ops.hpp"
#include "dilseg/rf.hpp"
#include "dilseg/tape.hpp"

using dilseg::LayerSpec;
using dilseg::NetworkSpec;
using dilseg::Scale;
using dilseg::Tensor;

namespace {

LayerSpec conv_layer(int n, int k, int d) {
  LayerSpec l;
  l.kind = dilseg::LayerKind::Conv;
  l.out_channels = n;
  l.kernel = k;
  l.dilation_factor = d;
  return l;
}

// Probe layer in the front (where pyramid_overlap looks) plus a 1x1 output
// head; the head adds nothing to any footprint.
NetworkSpec single_conv(int k, int d) {
  NetworkSpec s;
  s.name = "probe";
  s.front = {conv_layer(4, k, d)};
  s.head = {conv_layer(2, 1, 1)};
  dilseg::finalize_network(s);
  return s;
}

}  // namespace

TEST_CASE("dilation rate doubles per factor step") {
  CHECK(dilseg::dilation_rate(1) == 1);
  CHECK(dilseg::dilation_rate(2) == 2);  // adjacent taps one apart
  CHECK(dilseg::dilation_rate(3) == 4);  // adjacent taps three apart
  CHECK(dilseg::dilation_rate(4) == 8);
}

TEST_CASE("theoretical_rf: single layers") {
  CHECK(dilseg::theoretical_rf(single_conv(3, 1)).final_rf == 3);
  CHECK(dilseg::theoretical_rf(single_conv(3, 2)).final_rf == 5);
  CHECK(dilseg::theoretical_rf(single_conv(7, 3)).final_rf == 25);
}

TEST_CASE("theoretical_rf: dilated small-FOV stack reaches 61") {
  const auto report =
      dilseg::theoretical_rf(dilseg::preset("front-s-d", Scale::Micro));
  CHECK(report.final_rf == 61);
  CHECK(report.grid_period == 4);  // max dilation rate in the stack
  // The front alone spans 37; the k=7 r=4 head conv adds 24.
  CHECK(report.layers[6].rf == 37);
  // RF is non-decreasing and jump is the product of preceding strides.
  int prev = 0;
  for (const auto& rec : report.layers) {
    CHECK(rec.rf >= prev);
    prev = rec.rf;
    CHECK(rec.jump == 1);  // stride-1 stack
  }
}

TEST_CASE("report text ends with the final RF line") {
  const auto report =
      dilseg::theoretical_rf(dilseg::preset("front-s-d", Scale::Micro));
  const std::string text = report.to_text();
  CHECK(text.find("final RF: 61") != std::string::npos);
  CHECK(text.find("grid period: 4") != std::string::npos);
}

TEST_CASE("footprint_1d: dependency sets per layer") {
  // One layer k=2 r=2: unit u depends on {u, u+2}.
  const std::vector<LayerSpec> k2r2 = {conv_layer(2, 2, 2)};
  CHECK(dilseg::footprint_1d(k2r2, 10) == std::set<int>({10, 12}));

  // One layer k=3 r=1 (same padding): {u-1, u, u+1}.
  const std::vector<LayerSpec> k3r1 = {conv_layer(2, 3, 1)};
  CHECK(dilseg::footprint_1d(k3r1, 10) == std::set<int>({9, 10, 11}));

  // k=2 at r=2 then r=4 (factors 2 then 3): {u, u+2, u+4, u+6}.
  const std::vector<LayerSpec> stack = {conv_layer(2, 2, 2), conv_layer(2, 2, 3)};
  CHECK(dilseg::footprint_1d(stack, 10) == std::set<int>({10, 12, 14, 16}));
}

TEST_CASE("input_footprint is the 2-D product of the 1-D sets") {
  const NetworkSpec s = single_conv(3, 2);
  const auto fp = dilseg::input_footprint(s, {10, 20});
  std::set<std::pair<int, int>> want;
  for (int dy : {-2, 0, 2})
    for (int dx : {-2, 0, 2}) want.insert({10 + dy, 20 + dx});
  CHECK(fp == want);
  CHECK_THROWS((void)dilseg::input_footprint(s, {-1, 0}));
}

TEST_CASE("pyramid overlap: adjacent-unit dependency IoU") {
  // k=2 r=2: pyramids of adjacent units are disjoint.
  CHECK(dilseg::pyramid_overlap(single_conv(2, 2)) == 0.0);
  // k=3 r=1: {u-1,u,u+1} vs {u,u+1,u+2} -> 2/4.
  CHECK(dilseg::pyramid_overlap(single_conv(3, 1)) == doctest::Approx(0.5));
}

TEST_CASE("pyramid overlap is non-increasing in the rate and 0 beyond r=2 for k=2") {
  double prev = 1.0;
  for (int d = 1; d <= 4; ++d) {
    const double o = dilseg::pyramid_overlap(single_conv(2, d));
    CHECK(o <= prev);
    prev = o;
    if (dilseg::dilation_rate(d) >= 2) CHECK(o == 0.0);
  }
}

TEST_CASE("appending the local-feature stack reconnects adjacent pyramids") {
  for (const char* base : {"front-s-d", "front-l-d"}) {
    const NetworkSpec plain = dilseg::preset(base, Scale::Micro);
    const NetworkSpec with_lfe =
        dilseg::preset(std::string(base) + "-lfe", Scale::Micro);
    const double before = dilseg::pyramid_overlap_layers(plain.front);
    std::vector<LayerSpec> joined = with_lfe.front;
    joined.insert(joined.end(), with_lfe.lfe.begin(), with_lfe.lfe.end());
    const double after = dilseg::pyramid_overlap_layers(joined);
    CHECK(after > before);
  }
  // Never decreases across any stride-1 preset with a local-feature stack.
  for (const auto& name : dilseg::preset_names_all()) {
    const NetworkSpec s = dilseg::preset(name, Scale::Micro);
    if (s.has_pooling() || s.lfe.empty()) continue;
    std::vector<LayerSpec> joined = s.front;
    joined.insert(joined.end(), s.lfe.begin(), s.lfe.end());
    CHECK(dilseg::pyramid_overlap_layers(joined) >=
          dilseg::pyramid_overlap_layers(s.front));
  }
}

TEST_CASE("erf_map: a 1x1-kernel net concentrates on a single pixel") {
  const NetworkSpec s = single_conv(1, 1);
  const dilseg::Model m = dilseg::init_model(s, 4);
  Tensor patches({2, 3, 21, 21});
  std::mt19937 gen(5);
  std::uniform_real_distribution<float> dist(0.1f, 0.9f);
  for (auto& v : patches.data) v = dist(gen);

  const auto erf = dilseg::erf_map(m, patches);
  CHECK(erf.patch_count == 2);
  std::size_t nonzero = 0;
  for (float v : erf.map.data) {
    CHECK(v >= 0.0f);
    nonzero += v != 0.0f;
  }
  CHECK(nonzero == 1);
  CHECK(erf.map.at(erf.center_y, erf.center_x) > 0.0f);
  CHECK(erf.max_value == erf.map.at(erf.center_y, erf.center_x));
}

TEST_CASE("analytic gradient of a linear all-ones conv is a uniform box") {
  // Direct tape check of the procedure behind the ERF map: seed the center
  // unit of a linear k=3 conv and look at |input gradient|.
  Tensor x = Tensor::full({1, 1, 9, 9}, 0.5f);
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor b({1});
  dilseg::Tape<float> tape;
  const int xi = tape.leaf(x);
  const int y = tape.conv2d(xi, tape.leaf(w), tape.leaf(b),
                            dilseg::ConvParams::with_rate(3, 1));
  Tensor seed(tape.value(y).shape);
  seed.at(0, 0, 4, 4) = 1.0f;
  tape.backward(y, seed);
  const Tensor g = tape.grad(xi);
  for (std::size_t yy = 0; yy < 9; ++yy)
    for (std::size_t xx = 0; xx < 9; ++xx) {
      const bool inside = yy >= 3 && yy <= 5 && xx >= 3 && xx <= 5;
      CHECK(g.at(0, 0, yy, xx) == (inside ? 1.0f : 0.0f));
    }
}

TEST_CASE("erf support stays inside the theoretical RF box") {
  const NetworkSpec spec = dilseg::preset("front-s-d", Scale::Micro);
  const int rf = dilseg::theoretical_rf(spec).final_rf;
  REQUIRE(rf == 61);
  const dilseg::Model m = dilseg::init_model(spec, 17);
  Tensor patches({4, 3, 76, 76});
  std::mt19937 gen(6);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : patches.data) v = dist(gen);

  const auto erf = dilseg::erf_map(m, patches);
  const int half = rf / 2;
  for (int y = 0; y < 76; ++y)
    for (int x = 0; x < 76; ++x)
      if (std::abs(y - erf.center_y) > half || std::abs(x - erf.center_x) > half)
        CHECK(erf.map.at(y, x) == 0.0f);
}

TEST_CASE("grid_score: uniform, lattice-only, and noise maps") {
  dilseg::ERFMap erf;
  erf.map = Tensor::full({61, 61}, 0.25f);
  erf.center_y = erf.center_x = 30;
  erf.max_value = 0.25f;
  CHECK(dilseg::grid_score(erf, 4) == doctest::Approx(0.0));

  dilseg::ERFMap lattice;
  lattice.map = Tensor({61, 61});
  lattice.center_y = lattice.center_x = 30;
  for (int y = 0; y < 61; ++y)
    for (int x = 0; x < 61; ++x)
      if ((y - 30) % 4 == 0 && (x - 30) % 4 == 0)
        lattice.map.at(y, x) = 1.0f;
  CHECK(dilseg::grid_score(lattice, 4) == doctest::Approx(1.0));

  // I.i.d. positive noise carries no lattice structure: the mean score over
  // 100 trials stays within 0.05 of zero.
  std::mt19937 gen(77);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  double total = 0;
  for (int trial = 0; trial < 100; ++trial) {
    dilseg::ERFMap noise;
    noise.map = Tensor({61, 61});
    noise.center_y = noise.center_x = 30;
    for (auto& v : noise.map.data) v = dist(gen);
    total += dilseg::grid_score(noise, 4);
  }
  CHECK(std::abs(total / 100.0) <= 0.05);
}

TEST_CASE("grid_score rejects an all-zero map") {
  dilseg::ERFMap erf;
  erf.map = Tensor({61, 61});
  erf.center_y = erf.center_x = 30;
  CHECK_THROWS((void)dilseg::grid_score(erf, 4));
}

TEST_CASE("normalized map peaks at 1") {
  dilseg::ERFMap erf;
  erf.map = Tensor({3, 3});
  erf.map.at(1, 1) = 4.0f;
  erf.map.at(0, 0) = 1.0f;
  erf.max_value = 4.0f;
  const Tensor n = erf.normalized();
  CHECK(n.at(1, 1) == doctest::Approx(1.0f));
  CHECK(n.at(0, 0) == doctest::Approx(0.25f));
}
