#include "dilseg/rf.hpp"

#include <nlohmann/json.hpp>
#include <sstream>

#include "dilseg/ops.hpp"

namespace dilseg {

int dilation_rate(int d) { return ConvParams::rate_of_factor(d); }

RFReport theoretical_rf(const NetworkSpec& spec) {
  RFReport report;
  const int up = spec.downsample_factor();
  int rf = 1, jump = 1, index = 0;
  for (const auto& l : spec.all_layers()) {
    RFLayerRecord rec;
    rec.index = index++;
    rec.text = render_layer(l);
    switch (l.kind) {
      case LayerKind::Conv: {
        const int r = dilation_rate(l.dilation_factor);
        rec.span = (l.kernel - 1) * r + 1;
        rf += (l.kernel - 1) * r * jump;
        report.grid_period = std::max(report.grid_period, r);
        break;
      }
      case LayerKind::MaxPool:
        rec.span = 2;
        rf += jump;  // (k-1) * jump with k = 2
        jump *= 2;
        break;
      case LayerKind::Deconv:
        rec.span = l.kernel;
        jump /= up;
        rf += (l.kernel - 1) * jump;
        break;
    }
    rec.rf = rf;
    rec.jump = jump;
    report.layers.push_back(rec);
  }
  // Exact hull of the center unit's dependency cone; equals the arithmetic
  // column for stride-1 stacks and resolves even-kernel alignment for the
  // pooling/deconv ones.
  const auto set = footprint_1d(spec.all_layers(), spec.input_patch / 2, up);
  report.final_rf = *set.rbegin() - *set.begin() + 1;
  return report;
}

std::string RFReport::to_json() const {
  nlohmann::json j;
  j["layers"] = nlohmann::json::array();
  for (const auto& l : layers)
    j["layers"].push_back({{"index", l.index},
                           {"layer", l.text},
                           {"rf", l.rf},
                           {"jump", l.jump},
                           {"span", l.span}});
  j["final_rf"] = final_rf;
  j["grid_period"] = grid_period;
  return j.dump(2);
}

std::string RFReport::to_text() const {
  std::ostringstream out;
  out << "idx  layer                 span  jump  rf\n";
  for (const auto& l : layers) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-4d %-21s %-5d %-5d %d\n", l.index,
                  l.text.c_str(), l.span, l.jump, l.rf);
    out << buf;
  }
  out << "grid period: " << grid_period << "\n";
  out << "final RF: " << final_rf << "\n";
  return out.str();
}

std::set<int> footprint_1d(const std::vector<LayerSpec>& layers, int out_coord,
                           int upsample_stride) {
  std::set<int> coords{out_coord};
  for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
    const LayerSpec& l = *it;
    std::set<int> next;
    switch (l.kind) {
      case LayerKind::Conv: {
        const int r = dilation_rate(l.dilation_factor);
        const int lo = ((l.kernel - 1) / 2) * r;
        for (int u : coords)
          for (int j = 0; j < l.kernel; ++j) next.insert(u - lo + j * r);
        break;
      }
      case LayerKind::MaxPool:
        for (int u : coords) {
          next.insert(2 * u);
          next.insert(2 * u + 1);
        }
        break;
      case LayerKind::Deconv: {
        const int s = upsample_stride;
        const int k = l.kernel;
        const int crop = (k - s) / 2;
        for (int u : coords) {
          // output u reads input v where u = v*s + ky - crop, ky in [0,k)
          const int lo = static_cast<int>(
              std::ceil(static_cast<double>(u + crop - k + 1) / s));
          const int hi = static_cast<int>(
              std::floor(static_cast<double>(u + crop) / s));
          for (int v = lo; v <= hi; ++v) next.insert(v);
        }
        break;
      }
    }
    coords = std::move(next);
  }
  return coords;
}

std::set<std::pair<int, int>> input_footprint(const NetworkSpec& spec,
                                              std::pair<int, int> output_coord) {
  const auto layers = spec.all_layers();
  const int up = spec.downsample_factor();
  if (output_coord.first < 0 || output_coord.first >= spec.input_patch ||
      output_coord.second < 0 || output_coord.second >= spec.input_patch)
    throw std::out_of_range("input_footprint: output coordinate (" +
                            std::to_string(output_coord.first) + "," +
                            std::to_string(output_coord.second) +
                            ") outside the " + std::to_string(spec.input_patch) +
                            "-pixel output map");
  const auto ys = footprint_1d(layers, output_coord.first, up);
  const auto xs = footprint_1d(layers, output_coord.second, up);
  std::set<std::pair<int, int>> out;
  for (int y : ys)
    for (int x : xs) out.emplace(y, x);
  return out;
}

double pyramid_overlap_layers(const std::vector<LayerSpec>& layers) {
  for (const auto& l : layers)
    if (l.kind != LayerKind::Conv)
      throw std::invalid_argument("pyramid_overlap: stride-1 conv stacks only");
  const auto a = footprint_1d(layers, 0);
  const auto b = footprint_1d(layers, 1);
  std::size_t inter = 0;
  for (int v : a) inter += b.count(v);
  const std::size_t uni = a.size() + b.size() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double pyramid_overlap(const NetworkSpec& spec) {
  std::vector<LayerSpec> layers = spec.front;
  layers.insert(layers.end(), spec.lfe.begin(), spec.lfe.end());
  return pyramid_overlap_layers(layers);
}

ERFMap erf_map(const Model& model, const Tensor& patches) {
  if (patches.rank() != 4 || patches.shape[0] == 0)
    throw std::invalid_argument("erf_map: need a non-empty batch of patches");
  const std::size_t n = patches.shape[0];
  const std::size_t h = patches.shape[2], w = patches.shape[3];
  ERFMap erf;
  erf.map = Tensor({h, w});
  erf.patch_count = static_cast<int>(n);
  erf.center_y = static_cast<int>(h - 1) / 2;
  erf.center_x = static_cast<int>(w - 1) / 2;

  ForwardOptions opts;
  opts.record = true;
  const bool roi = model.spec.stride1();
  if (roi) opts.roi_extent = 1;

  // fixed accumulation order: patch by patch
  for (std::size_t i = 0; i < n; ++i) {
    Tensor one({1, patches.shape[1], h, w});
    std::copy_n(patches.data.data() + i * one.numel(), one.numel(),
                one.data.data());
    auto res = forward(model, one, opts);
    Tensor seed(res.prob.shape);
    if (roi) {
      seed.at(0, 1, 0, 0) = 1.0f;  // building channel of the single unit
    } else {
      seed.at(0, 1, erf.center_y, erf.center_x) = 1.0f;
    }
    res.tape->backward(res.prob_id, seed);
    const Tensor g = res.tape->grad(res.input_id);
    for (std::size_t c = 0; c < g.shape[1]; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          erf.map.at(y, x) += std::abs(g.at(0, c, y, x));
  }
  for (float& v : erf.map.data) v /= static_cast<float>(n);
  for (float v : erf.map.data) erf.max_value = std::max(erf.max_value, v);
  return erf;
}

Tensor ERFMap::normalized() const {
  Tensor out = map;
  if (max_value > 0)
    for (float& v : out.data) v /= max_value;
  return out;
}

double grid_score(const ERFMap& erf, int period) {
  if (period < 2) throw std::invalid_argument("grid_score: period must be >= 2");
  double on_sum = 0, off_sum = 0;
  std::size_t on_n = 0, off_n = 0;
  const std::size_t h = erf.map.shape[0], w = erf.map.shape[1];
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const bool on = (static_cast<int>(y) - erf.center_y) % period == 0 &&
                      (static_cast<int>(x) - erf.center_x) % period == 0;
      if (on) {
        on_sum += erf.map.at(y, x);
        ++on_n;
      } else {
        off_sum += erf.map.at(y, x);
        ++off_n;
      }
    }
  if (on_sum == 0 && off_sum == 0)
    throw std::invalid_argument("grid_score: all-zero map");
  const double on_mean = on_n ? on_sum / on_n : 0;
  const double off_mean = off_n ? off_sum / off_n : 0;
  if (on_mean == 0) return 0.0;
  return std::clamp(1.0 - off_mean / on_mean, 0.0, 1.0);
}

}  // namespace dilseg
