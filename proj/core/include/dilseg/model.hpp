#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "dilseg/netspec.hpp"
#include "dilseg/tape.hpp"

namespace dilseg {

// A spec plus its named parameters. Immutable during forward; training takes
// exclusive access.
struct Model {
  NetworkSpec spec;
  std::map<std::string, Tensor> params;  // "<module>.<index>.weight|bias"
  std::uint64_t seed = 0;
};

// Glorot-uniform conv weights, zero biases, bilinear deconv kernels.
// Deterministic given the seed.
Model init_model(const NetworkSpec& spec, std::uint64_t seed);

// 1-D bilinear hat profile used for deconv init (partition of unity over a
// stride-s lattice away from borders).
Tensor bilinear_deconv_weight(int in_channels, int out_channels, int kernel,
                              int stride);

struct ForwardOptions {
  bool record = false;            // keep the tape for backward
  Padding padding = Padding::SameZero;
  // roi_extent > 0 computes the probability map only over a centered square
  // window of that extent (stride-1 networks only; exact, not an
  // approximation). 0 means full resolution.
  int roi_extent = 0;
};

struct ForwardResult {
  Tensor prob;                              // batch x 2 x H x W
  std::unique_ptr<Tape<float>> tape;        // present iff record
  int input_id = -1;                        // tape leaf of the input
  int prob_id = -1;                         // tape node of the probability map
  std::map<std::string, int> param_ids;     // tape leaves per parameter
};

ForwardResult forward(const Model& model, const Tensor& input,
                      const ForwardOptions& opts = {});

}  // namespace dilseg
