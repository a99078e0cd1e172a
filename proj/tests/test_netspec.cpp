#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <utility>

#include "doctest.h"

#include "dilseg/model.hpp"
#include "dilseg/netspec.hpp"

using dilseg::Activation;
using dilseg::LayerKind;
using dilseg::LayerSpec;
using dilseg::NetworkSpec;
using dilseg::Scale;
using dilseg::Tensor;

TEST_CASE("parse_layer: notation fields extract exactly") {
  LayerSpec c = dilseg::parse_layer("conv-n64-k3-d1");
  CHECK(c.kind == LayerKind::Conv);
  CHECK(c.out_channels == 64);
  CHECK(c.kernel == 3);
  CHECK(c.dilation_factor == 1);

  LayerSpec d = dilseg::parse_layer("deconv-n2-k16-d1");
  CHECK(d.kind == LayerKind::Deconv);
  CHECK(d.out_channels == 2);
  CHECK(d.kernel == 16);

  LayerSpec p = dilseg::parse_layer("maxpooling");
  CHECK(p.kind == LayerKind::MaxPool);
  CHECK(p.kernel == 2);
}

TEST_CASE("parse_layer: field order is fixed") {
  CHECK_THROWS((void)dilseg::parse_layer("conv-k3-n64"));
  CHECK_THROWS((void)dilseg::parse_layer("conv-n64"));
  CHECK_THROWS((void)dilseg::parse_layer("pool"));
  CHECK_THROWS((void)dilseg::parse_layer("conv-nx-k3-d1"));
}

TEST_CASE("canonical text round-trips for every preset layer") {
  for (const auto& name : dilseg::preset_names_all()) {
    for (auto scale : {Scale::Paper, Scale::Micro}) {
      const NetworkSpec spec = dilseg::preset(name, scale);
      for (const auto& layer : spec.all_layers()) {
        const LayerSpec back = dilseg::parse_layer(dilseg::render_layer(layer));
        CHECK(back == layer);
      }
    }
  }
}

TEST_CASE("preset front-s-d-lfe matches the tabulated architecture") {
  const NetworkSpec s = dilseg::preset("front-s-d-lfe", Scale::Paper);

  REQUIRE(s.front.size() == 7);
  const std::vector<int> front_d = {1, 1, 2, 2, 3, 3, 3};
  const std::vector<int> front_n = {64, 64, 128, 128, 256, 256, 256};
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(s.front[i].kind == LayerKind::Conv);
    CHECK(s.front[i].kernel == 3);
    CHECK(s.front[i].dilation_factor == front_d[i]);
    CHECK(s.front[i].out_channels == front_n[i]);
  }

  REQUIRE(s.lfe.size() == 7);
  const std::vector<int> lfe_d = {3, 3, 3, 2, 2, 1, 1};
  for (std::size_t i = 0; i < 7; ++i) {
    CHECK(s.lfe[i].dilation_factor == lfe_d[i]);
    CHECK(s.lfe[i].out_channels == 256);
    CHECK(s.lfe[i].kernel == 3);
  }

  REQUIRE(s.head.size() == 3);
  CHECK(dilseg::render_layer(s.head[0]) == "conv-n1024-k7-d3");
  CHECK(dilseg::render_layer(s.head[1]) == "conv-n1024-k1-d1");
  CHECK(dilseg::render_layer(s.head[2]) == "conv-n2-k1-d1");
  CHECK(s.head[2].activation == Activation::Softmax);
  CHECK(s.input_patch == 76);
  CHECK(s.supervised_center == 16);
}

TEST_CASE("preset front-s: pooling baseline with deconv restoration") {
  const NetworkSpec s = dilseg::preset("front-s", Scale::Paper);
  int pools = 0;
  for (const auto& l : s.front) pools += l.kind == LayerKind::MaxPool;
  CHECK(pools == 2);  // layers below the third pooling
  CHECK(s.lfe.empty());
  CHECK(s.head.back().kind == LayerKind::Deconv);
  CHECK(s.head.back().kernel == 16);
  CHECK(s.head.back().out_channels == 2);
  CHECK(s.downsample_factor() == 4);
  CHECK_FALSE(s.stride1());
  CHECK(dilseg::preset("front-l", Scale::Paper).downsample_factor() == 8);
}

TEST_CASE("preset front-s-d-large: constant factors, same parameter count as the LFE twin") {
  const NetworkSpec large = dilseg::preset("front-s-d-large", Scale::Paper);
  const NetworkSpec lfe = dilseg::preset("front-s-d-lfe", Scale::Paper);
  REQUIRE(large.lfe.size() == 7);
  for (const auto& l : large.lfe) {
    CHECK(l.dilation_factor == 3);
    CHECK(l.kernel == 3);
  }
  CHECK(dilseg::parameter_count(large) == dilseg::parameter_count(lfe));
  CHECK(dilseg::parameter_count(dilseg::preset("front-l-d-large", Scale::Paper)) ==
        dilseg::parameter_count(dilseg::preset("front-l-d-lfe", Scale::Paper)));
}

TEST_CASE("structural invariants: front non-decreasing, LFE non-increasing dilation") {
  for (const auto& name : dilseg::preset_names_all()) {
    const NetworkSpec s = dilseg::preset(name, Scale::Micro);
    int prev = 0;
    for (const auto& l : s.front)
      if (l.kind == LayerKind::Conv) {
        CHECK(l.dilation_factor >= prev);
        prev = l.dilation_factor;
      }
    prev = 1 << 30;
    for (const auto& l : s.lfe) {
      CHECK(l.dilation_factor <= prev);
      prev = l.dilation_factor;
    }
    // Exactly the final layer carries softmax.
    const auto all = s.all_layers();
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (i + 1 == all.size())
        CHECK(all[i].activation == Activation::Softmax);
      else
        CHECK(all[i].activation != Activation::Softmax);
    }
  }
}

TEST_CASE("four-layer local-feature variant") {
  const NetworkSpec s = dilseg::preset("front-s-d-lfe4", Scale::Paper);
  REQUIRE(s.lfe.size() == 4);
  CHECK(s.lfe[0].dilation_factor == 2);
  CHECK(s.lfe[1].dilation_factor == 2);
  CHECK(s.lfe[2].dilation_factor == 1);
  CHECK(s.lfe[3].dilation_factor == 1);
  for (const auto& l : s.lfe) CHECK(l.kernel == 3);
}

TEST_CASE("unknown preset error lists valid names") {
  CHECK_THROWS_WITH_AS((void)dilseg::preset("frobnicate", Scale::Micro),
                       doctest::Contains("front-s-d-lfe"),
                       std::invalid_argument);
}

TEST_CASE("micro scale divides channels by 8, output head stays 2-channel") {
  const NetworkSpec paper = dilseg::preset("front-s-d", Scale::Paper);
  const NetworkSpec micro = dilseg::preset("front-s-d", Scale::Micro);
  REQUIRE(paper.front.size() == micro.front.size());
  for (std::size_t i = 0; i < paper.front.size(); ++i)
    CHECK(micro.front[i].out_channels ==
          std::max(2, paper.front[i].out_channels / 8));
  CHECK(micro.head.back().out_channels == 2);
}

TEST_CASE("spec JSON round trip") {
  for (const auto& name : {"front-s", "front-s-d-lfe"}) {
    const NetworkSpec s = dilseg::preset(name, Scale::Micro);
    const NetworkSpec back = NetworkSpec::from_json(s.to_json());
    CHECK(back.name == s.name);
    REQUIRE(back.all_layers().size() == s.all_layers().size());
    const auto a = s.all_layers(), b = back.all_layers();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    CHECK(back.input_patch == s.input_patch);
    CHECK(back.supervised_center == s.supervised_center);
  }
}

TEST_CASE("init_model: deterministic, Glorot-bounded weights, zero biases") {
  const NetworkSpec spec = dilseg::preset("front-s-d", Scale::Micro);
  const dilseg::Model a = dilseg::init_model(spec, 99);
  const dilseg::Model b = dilseg::init_model(spec, 99);
  REQUIRE(a.params.size() == b.params.size());
  for (const auto& [name, t] : a.params) {
    REQUIRE(b.params.count(name) == 1);
    CHECK(t.data == b.params.at(name).data);  // bit identical
    CHECK(t.all_finite());
  }
  const dilseg::Model c = dilseg::init_model(spec, 100);
  bool any_diff = false;
  for (const auto& [name, t] : a.params)
    if (t.data != c.params.at(name).data) any_diff = true;
  CHECK(any_diff);

  // First front conv: k=3, 3 -> 8 channels.
  const Tensor& w = a.params.at("front.0.weight");
  REQUIRE(w.shape == std::vector<std::size_t>({8, 3, 3, 3}));
  const double bound = std::sqrt(6.0 / (9.0 * 3 + 9.0 * 8));
  for (float v : w.data) CHECK(std::abs(v) <= bound);

  for (const auto& [name, t] : a.params)
    if (name.size() > 5 && name.substr(name.size() - 5) == ".bias")
      for (float v : t.data) CHECK(v == 0.0f);
}

TEST_CASE("parameter shapes are derivable from the spec alone") {
  const NetworkSpec spec = dilseg::preset("front-s-d-lfe", Scale::Micro);
  const dilseg::Model m = dilseg::init_model(spec, 1);
  // 17 conv layers => 34 parameter tensors.
  CHECK(m.params.size() == 2 * spec.all_layers().size());
  int cin = 3;
  std::size_t index = 0;
  for (const auto& part : {std::make_pair("front", spec.front),
                           std::make_pair("lfe", spec.lfe),
                           std::make_pair("head", spec.head)}) {
    for (std::size_t i = 0; i < part.second.size(); ++i) {
      const auto& l = part.second[i];
      const std::string key =
          std::string(part.first) + "." + std::to_string(i) + ".weight";
      const Tensor& w = m.params.at(key);
      CHECK(w.shape == std::vector<std::size_t>(
                           {static_cast<std::size_t>(l.out_channels),
                            static_cast<std::size_t>(cin),
                            static_cast<std::size_t>(l.kernel),
                            static_cast<std::size_t>(l.kernel)}));
      cin = l.out_channels;
      ++index;
    }
  }
}

TEST_CASE("forward: 2-channel map at input resolution, pixels sum to 1") {
  // 80 divides by both pooling factors (4 and 8), so every preset restores
  // the input resolution exactly.
  Tensor input({1, 3, 80, 80});
  std::mt19937 gen(7);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : input.data) v = dist(gen);

  for (const auto& name : dilseg::preset_names_all()) {
    const dilseg::Model m =
        dilseg::init_model(dilseg::preset(name, Scale::Micro), 5);
    const auto res = dilseg::forward(m, input);
    REQUIRE(res.prob.shape == std::vector<std::size_t>({1, 2, 80, 80}));
    for (std::size_t y = 0; y < 80; ++y)
      for (std::size_t x = 0; x < 80; ++x)
        CHECK(std::abs(res.prob.at(0, 0, y, x) + res.prob.at(0, 1, y, x) -
                       1.0f) <= 1e-6f);
    CHECK(res.prob.all_finite());
    CHECK(res.tape == nullptr);
  }
}

TEST_CASE("forward shape trace agrees with the symbolic extent trace") {
  for (const auto& name : dilseg::preset_names_all()) {
    const NetworkSpec spec = dilseg::preset(name, Scale::Micro);
    const auto extents = dilseg::trace_extents(spec, 80);
    REQUIRE(extents.size() == spec.all_layers().size());
    CHECK(extents.back() == 80);  // resolution restored at the output
    if (spec.has_pooling()) {
      const int smallest = *std::min_element(extents.begin(), extents.end());
      CHECK(smallest == 80 / spec.downsample_factor());
    }
  }
}

TEST_CASE("valid-padding diagnostic: the dilated small-FOV net maps 76 to 16") {
  const NetworkSpec spec = dilseg::preset("front-s-d", Scale::Micro);
  const auto extents = dilseg::trace_extents(spec, 76, /*valid_mode=*/true);
  CHECK(extents.back() == 16);

  const dilseg::Model m = dilseg::init_model(spec, 3);
  dilseg::ForwardOptions opts;
  opts.padding = dilseg::Padding::Valid;
  Tensor input = Tensor::full({1, 3, 76, 76}, 0.5f);
  const auto res = dilseg::forward(m, input, opts);
  CHECK(res.prob.shape == std::vector<std::size_t>({1, 2, 16, 16}));
}

TEST_CASE("forward rejects channel mismatch") {
  const dilseg::Model m =
      dilseg::init_model(dilseg::preset("front-s-d", Scale::Micro), 1);
  Tensor bad({1, 4, 76, 76});
  CHECK_THROWS((void)dilseg::forward(m, bad));
}

TEST_CASE("region-of-interest forward equals the center crop of the full map") {
  const dilseg::Model m =
      dilseg::init_model(dilseg::preset("front-s-d", Scale::Micro), 21);
  Tensor input({2, 3, 76, 76});
  std::mt19937 gen(8);
  std::uniform_real_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : input.data) v = dist(gen);

  const auto full = dilseg::forward(m, input);
  dilseg::ForwardOptions opts;
  opts.roi_extent = 16;
  const auto roi = dilseg::forward(m, input, opts);
  REQUIRE(roi.prob.shape == std::vector<std::size_t>({2, 2, 16, 16}));
  const std::size_t off = (76 - 16) / 2;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x)
          CHECK(roi.prob.at(n, c, y, x) ==
                doctest::Approx(full.prob.at(n, c, y + off, x + off))
                    .epsilon(1e-6));
}
