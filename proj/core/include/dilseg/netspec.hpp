#pragma once

#include <string>
#include <vector>

#include "dilseg/tensor.hpp"

namespace dilseg {

enum class LayerKind { Conv, MaxPool, Deconv };
enum class Activation { None, Relu, Softmax };

// One line of the architecture notation: "conv-n(a)-k(b)-d(c)",
// "deconv-n(a)-k(b)-d1" or "maxpooling" (always 2x2, stride 2).
struct LayerSpec {
  LayerKind kind = LayerKind::Conv;
  int out_channels = 0;  // 0 for maxpool
  int kernel = 2;
  int dilation_factor = 1;
  Activation activation = Activation::None;

  bool operator==(const LayerSpec& o) const {
    return kind == o.kind && out_channels == o.out_channels &&
           kernel == o.kernel && dilation_factor == o.dilation_factor;
  }
};

// Parses canonical notation; field order is fixed (n, k, d). Activations are
// assigned at network assembly, not in the text.
LayerSpec parse_layer(const std::string& text);
std::string render_layer(const LayerSpec& layer);

struct NetworkSpec {
  std::string name;
  std::vector<LayerSpec> front;
  std::vector<LayerSpec> lfe;
  std::vector<LayerSpec> head;
  int input_patch = 76;
  int supervised_center = 16;

  std::vector<LayerSpec> all_layers() const;
  bool has_pooling() const;
  bool stride1() const;  // no pooling and no deconv
  // Product of pooling strides in front; deconv upsampling factor.
  int downsample_factor() const;
  std::string to_json() const;
  static NetworkSpec from_json(const std::string& text);
};

// Assigns activations (final layer softmax, other conv/deconv relu) and
// checks structural invariants: non-decreasing front dilation, non-increasing
// LFE dilation, pooling always k=2.
void finalize_network(NetworkSpec& spec);

enum class Scale { Paper, Micro };

// The eight named architectures plus the four-layer LFE tuning variants.
// Micro divides channel counts by 8 (output head stays 2-channel).
NetworkSpec preset(const std::string& name, Scale scale);
std::vector<std::string> preset_names();       // the eight tabulated/constructed
std::vector<std::string> preset_names_all();   // including -lfe4 variants

// Parameter count over conv + deconv layers (weights + biases).
std::size_t parameter_count(const NetworkSpec& spec, int in_channels = 3);

// Spatial extent trace through the network for a square input, one entry
// per layer output (same-zero padding for conv unless valid_mode).
std::vector<int> trace_extents(const NetworkSpec& spec, int input_extent,
                               bool valid_mode = false);

}  // namespace dilseg
