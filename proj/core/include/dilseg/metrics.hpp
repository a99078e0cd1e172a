#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dilseg/infer.hpp"
#include "dilseg/mask.hpp"
#include "dilseg/synth.hpp"

namespace dilseg {

// Instance-area bins; half-open at the upper edge (area 100 -> Small).
enum class SizeBin { VerySmall, Small, Mid, Large, VeryLarge };
constexpr int kNumBins = 5;
SizeBin size_bin_of(int area);
const char* size_bin_name(SizeBin bin);

// |a∩b| / |a∪b|; 0 when both masks are empty.
double iou(const Mask& a, const Mask& b);

// Pixel F1 where predictions within Chebyshev distance `margin` of a ground
// truth pixel count as correct (and symmetrically for recall). Margin 0
// reduces to exact F1.
double relaxed_pixel_f1(const Mask& pred, const Mask& gt, int margin);

struct MatchResult {
  std::vector<std::uint8_t> tp;   // per proposal, in score-descending order
  std::vector<int> matched_gt;    // per proposal: gt index or -1
  std::vector<std::uint8_t> gt_matched;  // per gt
};

// Greedy score-descending matching: each proposal takes the highest-IoU
// unmatched gt with IoU >= threshold.
MatchResult match_proposals(const ProposalSet& proposals,
                            const std::vector<Mask>& gts, double iou_threshold);

// Average precision with all-point interpolation. Absent when there are no
// ground-truth instances.
std::optional<double> ap_r(const ProposalSet& proposals,
                           const std::vector<Mask>& gts,
                           double iou_threshold = 0.5);

// Mean of ap_r over IoU thresholds {0.1, 0.2, ..., 0.9}.
std::optional<double> ap_vol(const ProposalSet& proposals,
                             const std::vector<Mask>& gts);

// Mean recall over IoU thresholds {0.50, 0.55, ..., 0.95}, all proposals.
std::optional<double> ar(const ProposalSet& proposals,
                         const std::vector<Mask>& gts);
// Same, restricting the gts to each size bin by area.
std::array<std::optional<double>, kNumBins> ar_by_size(
    const ProposalSet& proposals, const std::vector<Mask>& gts);

struct EvalConfig {
  double threshold = 0.5;
  int min_area = 4;
  int margin = 3;
  int batch = 32;
};

struct MetricsReport {
  std::string name;
  double pixel_f1 = 0;
  int margin = 3;
  std::optional<double> ap_r;
  std::optional<double> ap_vol;
  std::optional<double> ar;
  std::array<std::optional<double>, kNumBins> ar_bins;
  std::size_t n_proposals = 0;
  std::size_t n_gts = 0;
  std::array<std::size_t, kNumBins> gt_per_bin{};

  std::string to_json() const;
  static MetricsReport from_json(const std::string& text);
  std::string to_text() const;      // Table-shaped row with a header
  std::string csv_header() const;
  std::string to_csv_row() const;
};

// One instance mask per id (index i holds id i+1), and the scene's binary
// foreground mask.
std::vector<Mask> scene_instance_masks(const Scene& scene);
Mask scene_binary_mask(const Scene& scene);

// Full pipeline over the test scenes: predict, extract proposals per scene,
// pool matches across scenes, and compose every metric. Pixel F1 pools pixel
// counts across scenes.
MetricsReport evaluate(const Model& model, const std::vector<Scene>& scenes,
                       const EvalConfig& config);
// Same, from precomputed probability maps (one per scene, matching extents).
MetricsReport evaluate_maps(const std::vector<Tensor>& maps,
                            const std::vector<Scene>& scenes,
                            const EvalConfig& config);

}  // namespace dilseg
