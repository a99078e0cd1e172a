#pragma once

#include <memory>
#include <string>
#include <vector>

#include "dilseg/tensor.hpp"

namespace dilseg {

// Synthetic crowded-small-object scene: RGB image in [0,1] plus a per-pixel
// instance-id map (0 = background, 1..M objects, each 8-connected).
struct Scene {
  Tensor image;                     // 3 x H x W
  std::vector<std::int32_t> instance_map;  // H*W row-major
  int num_instances = 0;
  int resolution_scale = 1;

  int height() const { return static_cast<int>(image.shape[1]); }
  int width() const { return static_cast<int>(image.shape[2]); }
  std::int32_t instance_at(int y, int x) const {
    return instance_map[static_cast<std::size_t>(y) * width() + x];
  }
};

struct SceneConfig {
  int extent = 256;
  int count_min = 20, count_max = 40;
  int size_min = 3, size_max = 12;   // bounding-box side, pixels
  int min_gap = 1;                   // Chebyshev pixel distance between objects
  double noise = 0.05;               // additive texture noise amplitude
  std::uint64_t seed = 0;
};

// Rejection-sampled rotated rectangles plus L-shaped composites (20%), with
// separated foreground/background intensity ranges and additive noise.
// Deterministic given the seed.
Scene generate_scene(const SceneConfig& config);

// Box-filter + decimate the image; instance ids by per-block majority vote
// (ties -> background). Instances are relabeled so ids stay contiguous and
// 8-connected.
Scene downsample_scene(const Scene& scene, int factor);

struct PatchRef {
  int scene = 0;
  int y0 = 0, x0 = 0;  // window top-left in the scene
  int rotation = 0;    // quarter turns, 0..3
};

// Sampled 76x76 training patches with 16x16 center labels. Pixels are
// materialized on demand from the backing scenes.
class PatchSet {
 public:
  PatchSet(std::shared_ptr<const std::vector<Scene>> scenes,
           std::vector<PatchRef> refs, int patch_extent, int label_extent);

  std::size_t size() const { return refs_.size(); }
  const PatchRef& ref(std::size_t i) const { return refs_[i]; }
  int patch_extent() const { return patch_extent_; }
  int label_extent() const { return label_extent_; }

  Tensor input(std::size_t i) const;  // 3 x P x P
  Tensor label(std::size_t i) const;  // 2 x L x L one-hot
  // Batched gather: (N x 3 x P x P, N x 2 x L x L).
  std::pair<Tensor, Tensor> gather(const std::vector<std::size_t>& idx) const;
  Tensor input_batch(std::size_t offset, std::size_t count) const;

 private:
  std::shared_ptr<const std::vector<Scene>> scenes_;
  std::vector<PatchRef> refs_;
  int patch_extent_;
  int label_extent_;
};

// Crops binned by foreground pixels in the center label window
// ({0, 1-64, 65-128, 129-256}), drawn uniformly across non-empty bins;
// rotation a uniform multiple of 90 degrees.
PatchSet sample_patches(std::shared_ptr<const std::vector<Scene>> scenes,
                        std::size_t count, std::uint64_t seed,
                        int patch_extent = 76, int label_extent = 16);

// Center-label foreground count -> balance bin index (0..3), exposed for
// sampling-share tests.
int balance_bin(int fg_pixels, int label_extent = 16);

// Dataset directory: manifest.json + per-scene image/instances NTSR files
// (+ preview PGM when requested).
struct Dataset {
  std::vector<Scene> train;
  std::vector<Scene> test;
  std::string config_json;  // echo of the generating config
};

void save_dataset(const Dataset& ds, const std::string& dir, bool previews = false);
Dataset load_dataset(const std::string& dir);

Tensor rotate90(const Tensor& chw, int quarter_turns);

}  // namespace dilseg
