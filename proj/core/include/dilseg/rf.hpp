#pragma once

#include <set>
#include <utility>

#include "dilseg/model.hpp"
#include "dilseg/netspec.hpp"

namespace dilseg {

// Tap spacing for a dilation factor: r = 2^(d-1). Adjacent valid weights
// align by interval r-1 (d=2 -> interval 1, d=3 -> interval 3).
int dilation_rate(int d);

struct RFLayerRecord {
  int index = 0;
  std::string text;       // layer notation
  int rf = 1;             // receptive field in input pixels after this layer
  int jump = 1;           // product of strides below this layer's output
  int span = 1;           // effective kernel span (k-1)*r + 1
};

struct RFReport {
  std::vector<RFLayerRecord> layers;
  int final_rf = 1;
  int grid_period = 1;    // max dilation rate in the stack
  std::string to_json() const;
  std::string to_text() const;  // plain table ending with "final RF: N"
};

RFReport theoretical_rf(const NetworkSpec& spec);

// Exact 1-D dependency set of one output coordinate through a layer stack,
// same-padding alignment, unbounded input (no border clipping). Symbolic
// integers only.
std::set<int> footprint_1d(const std::vector<LayerSpec>& layers, int out_coord,
                           int upsample_stride = 1);

// Exact set of input pixels with a nonzero connection path to the output
// unit; the 2-D footprint is the product of the per-axis 1-D sets.
std::set<std::pair<int, int>> input_footprint(const NetworkSpec& spec,
                                              std::pair<int, int> output_coord);

// IoU of the input footprints of two horizontally adjacent output units of
// the front+LFE stack. Stride-1 stacks only.
double pyramid_overlap(const NetworkSpec& spec);
double pyramid_overlap_layers(const std::vector<LayerSpec>& layers);

struct ERFMap {
  Tensor map;             // HxW averaged |input gradient|, >= 0
  int patch_count = 0;
  float max_value = 0.0f; // before scaling to 1
  int center_y = 0, center_x = 0;  // seeded output unit
  Tensor normalized() const;
};

// Seeds gradient 1 at the center unit of the output probability map
// (building channel), backpropagates per patch, and averages the absolute
// input gradients (summed over input channels) in a fixed order.
ERFMap erf_map(const Model& model, const Tensor& patches);

// 1 - (mean off-lattice / mean on-lattice), clamped to [0,1]; lattice
// anchored at the ERF center with the given spacing.
double grid_score(const ERFMap& erf, int period);

}  // namespace dilseg
