#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dilseg/model.hpp"
#include "dilseg/synth.hpp"

namespace dilseg {

struct TrainConfig {
  float lr = 1e-3f;
  int batch = 32;
  int steps = 1000;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  std::uint64_t seed = 0;
  int loss_region = 16;           // supervised center extent
  int checkpoint_interval = 0;    // 0 = only on request
  std::string checkpoint_path;    // written when interval > 0 and at the end
};

struct OptimizerState {
  std::map<std::string, Tensor> m;  // first moments, keyed like Model::params
  std::map<std::string, Tensor> v;  // second moments
  std::int64_t step = 0;
};

using GradMap = std::map<std::string, Tensor>;

// One bias-corrected Adam update in place. Requires a gradient for every
// parameter; initializes missing moments to zero.
void adam_step(Model& model, const GradMap& grads, OptimizerState& state,
               const TrainConfig& config);

// Minibatch loop: forward -> masked center cross-entropy -> backward ->
// adam_step. Resumes from state.step (RNG draws for completed steps are
// replayed, so a resumed run is bit-identical to an uninterrupted one).
// Returns the per-step losses of the steps executed by this call.
std::vector<float> train(Model& model, const PatchSet& patches,
                         const TrainConfig& config, OptimizerState& state);

// Convenience overload starting from a fresh optimizer.
std::vector<float> train(Model& model, const PatchSet& patches,
                         const TrainConfig& config);

// Loss of one recorded forward on a batch (used by the loop and by tests).
// Returns the scalar loss and fills `grads` when non-null.
float loss_and_grads(const Model& model, const Tensor& inputs,
                     const Tensor& labels, int loss_region, GradMap* grads);

void save_checkpoint(const Model& model, const OptimizerState& state,
                     const std::string& path);
std::pair<Model, OptimizerState> load_checkpoint(const std::string& path);

}  // namespace dilseg
