#include "dilseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace dilseg {
namespace {

constexpr std::array<double, 9> kApVolThresholds = {0.1, 0.2, 0.3, 0.4, 0.5,
                                                    0.6, 0.7, 0.8, 0.9};
constexpr std::array<double, 10> kArThresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                                  0.75, 0.80, 0.85, 0.90, 0.95};

// Chebyshev dilation by `margin` (separable box max filter).
Mask dilate(const Mask& m, int margin) {
  if (margin <= 0) return m;
  Mask tmp(m.h, m.w), out(m.h, m.w);
  for (std::size_t y = 0; y < m.h; ++y) {
    for (std::size_t x = 0; x < m.w; ++x) {
      const std::size_t x0 = x >= static_cast<std::size_t>(margin) ? x - margin : 0;
      const std::size_t x1 = std::min(m.w - 1, x + margin);
      std::uint8_t v = 0;
      for (std::size_t k = x0; k <= x1 && !v; ++k) v = m.at(y, k);
      tmp.at(y, x) = v;
    }
  }
  for (std::size_t y = 0; y < m.h; ++y) {
    const std::size_t y0 = y >= static_cast<std::size_t>(margin) ? y - margin : 0;
    const std::size_t y1 = std::min(m.h - 1, y + margin);
    for (std::size_t x = 0; x < m.w; ++x) {
      std::uint8_t v = 0;
      for (std::size_t k = y0; k <= y1 && !v; ++k) v = tmp.at(k, x);
      out.at(y, x) = v;
    }
  }
  return out;
}

std::size_t count_inside(const Mask& a, const Mask& region) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) n += a.data[i] && region.data[i];
  return n;
}

struct PixelCounts {
  std::size_t pred = 0, pred_hit = 0, gt = 0, gt_hit = 0;
};

PixelCounts relaxed_counts(const Mask& pred, const Mask& gt, int margin) {
  if (!pred.same_extent(gt)) throw std::invalid_argument("mask extent mismatch");
  PixelCounts c;
  c.pred = pred.count();
  c.gt = gt.count();
  if (c.pred > 0 && c.gt > 0) {
    c.pred_hit = count_inside(pred, dilate(gt, margin));
    c.gt_hit = count_inside(gt, dilate(pred, margin));
  }
  return c;
}

double f1_of(const PixelCounts& c) {
  if (c.pred == 0 && c.gt == 0) return 1.0;
  if (c.pred == 0 || c.gt == 0) return 0.0;
  const double p = static_cast<double>(c.pred_hit) / c.pred;
  const double r = static_cast<double>(c.gt_hit) / c.gt;
  return p + r > 0 ? 2 * p * r / (p + r) : 0.0;
}

struct ScenePair {
  const ProposalSet* props;
  const std::vector<Mask>* gts;
};

// Flattened, score-ranked detections with per-scene greedy match flags.
// Matching competes only within a scene, so per-scene matching followed by a
// global score sort is the standard pooled detection evaluation.
std::optional<double> pooled_ap(const std::vector<ScenePair>& scenes,
                                double iou_threshold) {
  std::size_t total_gts = 0;
  std::vector<std::pair<double, std::uint8_t>> dets;  // (score, tp)
  for (const ScenePair& sp : scenes) {
    total_gts += sp.gts->size();
    const MatchResult m = match_proposals(*sp.props, *sp.gts, iou_threshold);
    for (std::size_t i = 0; i < sp.props->proposals.size(); ++i) {
      dets.push_back({sp.props->proposals[i].score, m.tp[i]});
    }
  }
  if (total_gts == 0) return std::nullopt;
  std::stable_sort(dets.begin(), dets.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });

  std::vector<double> precision(dets.size()), recall(dets.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    tp += dets[i].second;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(total_gts);
  }
  // All-point interpolation: precision envelope, area under the PR curve.
  for (std::size_t i = dets.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0, prev_recall = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::optional<double> pooled_ar(const std::vector<ScenePair>& scenes) {
  std::size_t total_gts = 0;
  for (const ScenePair& sp : scenes) total_gts += sp.gts->size();
  if (total_gts == 0) return std::nullopt;
  double sum = 0;
  for (double t : kArThresholds) {
    std::size_t matched = 0;
    for (const ScenePair& sp : scenes) {
      const MatchResult m = match_proposals(*sp.props, *sp.gts, t);
      for (auto f : m.gt_matched) matched += f;
    }
    sum += static_cast<double>(matched) / static_cast<double>(total_gts);
  }
  return sum / kArThresholds.size();
}

}  // namespace

SizeBin size_bin_of(int area) {
  if (area < 100) return SizeBin::VerySmall;
  if (area < 400) return SizeBin::Small;
  if (area < 1600) return SizeBin::Mid;
  if (area < 6400) return SizeBin::Large;
  return SizeBin::VeryLarge;
}

const char* size_bin_name(SizeBin bin) {
  switch (bin) {
    case SizeBin::VerySmall: return "Very small";
    case SizeBin::Small: return "Small";
    case SizeBin::Mid: return "Mid";
    case SizeBin::Large: return "Large";
    case SizeBin::VeryLarge: return "Very large";
  }
  return "?";
}

double iou(const Mask& a, const Mask& b) {
  if (!a.same_extent(b)) throw std::invalid_argument("iou: mask extent mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool av = a.data[i] != 0, bv = b.data[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double relaxed_pixel_f1(const Mask& pred, const Mask& gt, int margin) {
  if (margin < 0) throw std::invalid_argument("margin must be >= 0");
  return f1_of(relaxed_counts(pred, gt, margin));
}

MatchResult match_proposals(const ProposalSet& proposals,
                            const std::vector<Mask>& gts, double iou_threshold) {
  if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
    throw std::invalid_argument("IoU threshold must lie in (0,1]");
  }
  const auto& props = proposals.proposals;
  // Rank by score regardless of stored order (stable for ties).
  std::vector<std::size_t> order(props.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return props[a].score > props[b].score;
  });

  MatchResult res;
  res.tp.assign(props.size(), 0);
  res.matched_gt.assign(props.size(), -1);
  res.gt_matched.assign(gts.size(), 0);
  for (std::size_t rank : order) {
    double best = 0;
    int best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (res.gt_matched[g]) continue;
      const double v = iou(props[rank].mask, gts[g]);
      if (v >= iou_threshold && v > best) {
        best = v;
        best_gt = static_cast<int>(g);
      }
    }
    if (best_gt >= 0) {
      res.tp[rank] = 1;
      res.matched_gt[rank] = best_gt;
      res.gt_matched[best_gt] = 1;
    }
  }
  return res;
}

std::optional<double> ap_r(const ProposalSet& proposals,
                           const std::vector<Mask>& gts, double iou_threshold) {
  return pooled_ap({{&proposals, &gts}}, iou_threshold);
}

std::optional<double> ap_vol(const ProposalSet& proposals,
                             const std::vector<Mask>& gts) {
  if (gts.empty()) return std::nullopt;
  double sum = 0;
  for (double t : kApVolThresholds) sum += *ap_r(proposals, gts, t);
  return sum / kApVolThresholds.size();
}

std::optional<double> ar(const ProposalSet& proposals,
                         const std::vector<Mask>& gts) {
  return pooled_ar({{&proposals, &gts}});
}

std::array<std::optional<double>, kNumBins> ar_by_size(
    const ProposalSet& proposals, const std::vector<Mask>& gts) {
  std::array<std::optional<double>, kNumBins> out;
  for (int b = 0; b < kNumBins; ++b) {
    std::vector<Mask> sub;
    for (const Mask& g : gts) {
      if (size_bin_of(static_cast<int>(g.count())) == static_cast<SizeBin>(b)) {
        sub.push_back(g);
      }
    }
    out[b] = ar(proposals, sub);
  }
  return out;
}

std::vector<Mask> scene_instance_masks(const Scene& scene) {
  std::vector<Mask> out(static_cast<std::size_t>(scene.num_instances),
                        Mask(scene.height(), scene.width()));
  for (std::size_t i = 0; i < scene.instance_map.size(); ++i) {
    const auto id = scene.instance_map[i];
    if (id > 0) out.at(static_cast<std::size_t>(id) - 1).data[i] = 1;
  }
  return out;
}

Mask scene_binary_mask(const Scene& scene) {
  Mask m(scene.height(), scene.width());
  for (std::size_t i = 0; i < scene.instance_map.size(); ++i) {
    m.data[i] = scene.instance_map[i] != 0;
  }
  return m;
}

MetricsReport evaluate_maps(const std::vector<Tensor>& maps,
                            const std::vector<Scene>& scenes,
                            const EvalConfig& config) {
  if (maps.size() != scenes.size()) {
    throw std::invalid_argument("evaluate: one probability map per scene required");
  }
  std::vector<ProposalSet> props;
  std::vector<std::vector<Mask>> gts;
  PixelCounts pixels;
  MetricsReport report;
  report.margin = config.margin;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const Scene& scene = scenes[s];
    const Tensor& map = maps[s];
    if (map.shape.size() != 2 ||
        map.shape[0] != static_cast<std::size_t>(scene.height()) ||
        map.shape[1] != static_cast<std::size_t>(scene.width())) {
      throw std::invalid_argument("evaluate: map extent mismatches its scene");
    }
    props.push_back(extract_proposals(map, config.threshold, config.min_area));
    gts.push_back(scene_instance_masks(scene));

    Mask pred(map.shape[0], map.shape[1]);
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
      pred.data[i] = map.data[i] >= config.threshold;
    }
    const PixelCounts c =
        relaxed_counts(pred, scene_binary_mask(scene), config.margin);
    pixels.pred += c.pred;
    pixels.pred_hit += c.pred_hit;
    pixels.gt += c.gt;
    pixels.gt_hit += c.gt_hit;

    report.n_proposals += props.back().proposals.size();
    report.n_gts += gts.back().size();
    for (const Mask& g : gts.back()) {
      ++report.gt_per_bin[static_cast<int>(size_bin_of(static_cast<int>(g.count())))];
    }
  }
  report.pixel_f1 = f1_of(pixels);

  std::vector<ScenePair> pairs;
  for (std::size_t s = 0; s < scenes.size(); ++s) pairs.push_back({&props[s], &gts[s]});
  report.ap_r = pooled_ap(pairs, 0.5);
  if (report.n_gts > 0) {
    double sum = 0;
    for (double t : kApVolThresholds) sum += *pooled_ap(pairs, t);
    report.ap_vol = sum / kApVolThresholds.size();
  }
  report.ar = pooled_ar(pairs);
  for (int b = 0; b < kNumBins; ++b) {
    std::vector<std::vector<Mask>> sub(scenes.size());
    std::vector<ScenePair> bin_pairs;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      for (const Mask& g : gts[s]) {
        if (size_bin_of(static_cast<int>(g.count())) == static_cast<SizeBin>(b)) {
          sub[s].push_back(g);
        }
      }
      bin_pairs.push_back({&props[s], &sub[s]});
    }
    report.ar_bins[b] = pooled_ar(bin_pairs);
  }
  return report;
}

MetricsReport evaluate(const Model& model, const std::vector<Scene>& scenes,
                       const EvalConfig& config) {
  std::vector<Tensor> maps;
  maps.reserve(scenes.size());
  for (const Scene& s : scenes) {
    maps.push_back(predict_scene(model, s.image, config.batch));
  }
  MetricsReport report = evaluate_maps(maps, scenes, config);
  report.name = model.spec.name;
  return report;
}

namespace {

nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> opt_from(const nlohmann::json& j) {
  return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
}

std::string opt_str(const std::optional<double>& v, const char* absent = "absent") {
  if (!v) return absent;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", *v);
  return buf;
}

}  // namespace

std::string MetricsReport::to_json() const {
  nlohmann::json j;
  j["name"] = name;
  j["pixel_f1"] = pixel_f1;
  j["margin"] = margin;
  j["ap_r"] = opt_json(ap_r);
  j["ap_vol"] = opt_json(ap_vol);
  j["ar"] = opt_json(ar);
  nlohmann::json bins = nlohmann::json::object();
  for (int b = 0; b < kNumBins; ++b) {
    bins[size_bin_name(static_cast<SizeBin>(b))] = opt_json(ar_bins[b]);
  }
  j["ar_by_size"] = std::move(bins);
  j["n_proposals"] = n_proposals;
  j["n_gts"] = n_gts;
  nlohmann::json counts = nlohmann::json::object();
  for (int b = 0; b < kNumBins; ++b) {
    counts[size_bin_name(static_cast<SizeBin>(b))] = gt_per_bin[b];
  }
  j["gt_per_bin"] = std::move(counts);
  return j.dump(2);
}

MetricsReport MetricsReport::from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  MetricsReport r;
  r.name = j.value("name", "");
  r.pixel_f1 = j.at("pixel_f1").get<double>();
  r.margin = j.at("margin").get<int>();
  r.ap_r = opt_from(j.at("ap_r"));
  r.ap_vol = opt_from(j.at("ap_vol"));
  r.ar = opt_from(j.at("ar"));
  for (int b = 0; b < kNumBins; ++b) {
    const char* key = size_bin_name(static_cast<SizeBin>(b));
    r.ar_bins[b] = opt_from(j.at("ar_by_size").at(key));
    r.gt_per_bin[b] = j.at("gt_per_bin").at(key).get<std::size_t>();
  }
  r.n_proposals = j.at("n_proposals").get<std::size_t>();
  r.n_gts = j.at("n_gts").get<std::size_t>();
  return r;
}

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  out << "model | pixel F1 | AP^r | AP_vol | AR";
  for (int b = 0; b < kNumBins; ++b) {
    out << " | AR " << size_bin_name(static_cast<SizeBin>(b));
  }
  out << "\n" << (name.empty() ? "-" : name) << " | " << opt_str(pixel_f1) << " | "
      << opt_str(ap_r) << " | " << opt_str(ap_vol) << " | " << opt_str(ar);
  for (int b = 0; b < kNumBins; ++b) out << " | " << opt_str(ar_bins[b]);
  out << "\n";
  return out.str();
}

std::string MetricsReport::csv_header() const {
  std::string h = "name,pixel_f1,ap_r,ap_vol,ar";
  for (int b = 0; b < kNumBins; ++b) {
    std::string n = size_bin_name(static_cast<SizeBin>(b));
    std::replace(n.begin(), n.end(), ' ', '_');
    h += ",ar_" + n;
  }
  return h;
}

std::string MetricsReport::to_csv_row() const {
  std::string row = name + "," + opt_str(pixel_f1, "") + "," + opt_str(ap_r, "") +
                    "," + opt_str(ap_vol, "") + "," + opt_str(ar, "");
  for (int b = 0; b < kNumBins; ++b) row += "," + opt_str(ar_bins[b], "");
  return row;
}

}  // namespace dilseg
