#include "dilseg/model.hpp"

#include <cmath>

#include "dilseg/rng.hpp"

namespace dilseg {

namespace {

struct NamedLayer {
  std::string name;  // "<module>.<index>"
  const LayerSpec* layer;
};

std::vector<NamedLayer> named_layers(const NetworkSpec& spec) {
  std::vector<NamedLayer> out;
  const struct {
    const char* module;
    const std::vector<LayerSpec>* layers;
  } parts[] = {{"front", &spec.front}, {"lfe", &spec.lfe}, {"head", &spec.head}};
  for (const auto& part : parts)
    for (std::size_t i = 0; i < part.layers->size(); ++i)
      out.push_back({std::string(part.module) + "." + std::to_string(i),
                     &(*part.layers)[i]});
  return out;
}

}  // namespace

Tensor bilinear_deconv_weight(int in_channels, int out_channels, int kernel,
                              int stride) {
  // Hat profile of half-width `stride`: samples at stride spacing sum to 1
  // regardless of phase, so a constant map upsamples to the same constant
  // away from borders. Scaled by 1/Cin so summing over input channels
  // preserves magnitude.
  std::vector<float> hat(kernel);
  const double center = (kernel - 1) / 2.0;
  for (int i = 0; i < kernel; ++i)
    hat[i] = static_cast<float>(
        std::max(0.0, 1.0 - std::abs(i - center) / stride));
  Tensor w({static_cast<std::size_t>(in_channels),
            static_cast<std::size_t>(out_channels),
            static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)});
  for (int ci = 0; ci < in_channels; ++ci)
    for (int co = 0; co < out_channels; ++co)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx)
          w.at(ci, co, ky, kx) = hat[ky] * hat[kx] / in_channels;
  return w;
}

Model init_model(const NetworkSpec& spec, std::uint64_t seed) {
  Model m;
  m.spec = spec;
  m.seed = seed;
  Rng rng(seed);
  int cin = 3;
  const int up = spec.downsample_factor();
  for (const auto& nl : named_layers(spec)) {
    const LayerSpec& l = *nl.layer;
    if (l.kind == LayerKind::MaxPool) continue;
    if (l.kind == LayerKind::Deconv) {
      m.params[nl.name + ".weight"] =
          bilinear_deconv_weight(cin, l.out_channels, l.kernel, up);
      cin = l.out_channels;
      continue;
    }
    const std::size_t k = static_cast<std::size_t>(l.kernel);
    Tensor w({static_cast<std::size_t>(l.out_channels),
              static_cast<std::size_t>(cin), k, k});
    const double fan_in = static_cast<double>(k) * k * cin;
    const double fan_out = static_cast<double>(k) * k * l.out_channels;
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (float& v : w.data)
      v = static_cast<float>(rng.uniform(-bound, bound));
    m.params[nl.name + ".weight"] = std::move(w);
    m.params[nl.name + ".bias"] =
        Tensor({static_cast<std::size_t>(l.out_channels)});
    cin = l.out_channels;
  }
  return m;
}

namespace {

struct Region {
  int y0 = 0, x0 = 0, h = 0, w = 0;
};

// Output regions per layer for ROI execution, in full-map coordinates,
// walking the dependency cone down from a centered window. Entry [i] is
// layer i's output region; entry regions[0]'s input region is implicit
// (the clipped expansion, computed again in the builder).
std::vector<Region> plan_roi(const NetworkSpec& spec, int extent, int roi) {
  const auto layers = spec.all_layers();
  std::vector<Region> out(layers.size());
  Region r{(extent - roi) / 2, (extent - roi) / 2, roi, roi};
  for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
    out[i] = r;
    const LayerSpec& l = layers[i];
    const int rate = ConvParams::rate_of_factor(l.dilation_factor);
    const int lo = ((l.kernel - 1) / 2) * rate;
    const int grow = (l.kernel - 1) * rate;
    r = Region{r.y0 - lo, r.x0 - lo, r.h + grow, r.w + grow};
    // outside the map is zero padding; the producing layer only has to
    // cover the in-map part
    const int y1 = std::min(r.y0 + r.h, extent), x1 = std::min(r.x0 + r.w, extent);
    r.y0 = std::max(r.y0, 0);
    r.x0 = std::max(r.x0, 0);
    r.h = y1 - r.y0;
    r.w = x1 - r.x0;
  }
  return out;
}

}  // namespace

ForwardResult forward(const Model& model, const Tensor& input,
                      const ForwardOptions& opts) {
  if (input.rank() != 4)
    throw std::invalid_argument("forward: input must be rank 4 (NCHW)");
  const auto layers = model.spec.all_layers();
  const auto names = named_layers(model.spec);
  const std::size_t want_c = model.params.at("front.0.weight").shape[1];
  if (input.shape[1] != want_c)
    throw std::invalid_argument("forward: channel mismatch, input has " +
                                std::to_string(input.shape[1]) +
                                " channels, network expects " +
                                std::to_string(want_c));
  if (opts.roi_extent > 0 && !model.spec.stride1())
    throw std::invalid_argument(
        "forward: roi execution requires a stride-1 (fully dilated) network");

  ForwardResult res;
  auto tape = std::make_unique<Tape<float>>();
  res.input_id = tape->leaf(input);

  auto param_id = [&](const std::string& name) {
    auto it = res.param_ids.find(name);
    if (it != res.param_ids.end()) return it->second;
    const int id = tape->leaf(model.params.at(name));
    res.param_ids.emplace(name, id);
    return id;
  };

  const int extent = static_cast<int>(input.shape[2]);
  const int up = model.spec.downsample_factor();
  int cur = res.input_id;

  if (opts.roi_extent > 0) {
    const auto regions = plan_roi(model.spec, extent, opts.roi_extent);
    Region prev{0, 0, extent, static_cast<int>(input.shape[3])};
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      const int rate = ConvParams::rate_of_factor(l.dilation_factor);
      const int lo = ((l.kernel - 1) / 2) * rate;
      const Region& ro = regions[i];
      cur = tape->conv2d_region(cur, param_id(names[i].name + ".weight"),
                                param_id(names[i].name + ".bias"), l.kernel,
                                rate, ro.y0 - lo - prev.y0, ro.x0 - lo - prev.x0,
                                ro.h, ro.w);
      if (l.activation == Activation::Relu) cur = tape->relu(cur);
      prev = ro;
    }
  } else {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const LayerSpec& l = layers[i];
      switch (l.kind) {
        case LayerKind::MaxPool:
          cur = tape->maxpool2(cur);
          break;
        case LayerKind::Deconv:
          cur = tape->transposed_conv(cur, param_id(names[i].name + ".weight"), up);
          break;
        case LayerKind::Conv: {
          auto params = ConvParams::with_factor(l.kernel, l.dilation_factor,
                                                opts.padding);
          cur = tape->conv2d(cur, param_id(names[i].name + ".weight"),
                             param_id(names[i].name + ".bias"), params);
          break;
        }
      }
      if (l.activation == Activation::Relu) cur = tape->relu(cur);
    }
  }

  cur = tape->softmax_channels(cur);
  res.prob_id = cur;
  res.prob = tape->value(cur);
  if (opts.record) res.tape = std::move(tape);
  return res;
}

}  // namespace dilseg
