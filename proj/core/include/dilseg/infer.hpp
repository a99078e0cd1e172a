#pragma once

#include <string>
#include <vector>

#include "dilseg/mask.hpp"
#include "dilseg/model.hpp"

namespace dilseg {

// Whole-scene foreground-probability map (H x W). The scene is reflect-padded
// by (patch-center)/2, tiled with patch windows on a center-extent stride,
// and each window contributes exactly its center block, so every scene pixel
// is written once.
Tensor predict_scene(const Model& model, const Tensor& image, int batch = 32);

struct Proposal {
  Mask mask;
  double score = 0;  // mean probability inside the mask
  int area = 0;
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;  // inclusive bounding box
};

struct ProposalSet {
  std::vector<Proposal> proposals;  // score-descending (stable)
  double threshold = 0.5;
  int min_area = 1;
  std::string scene_id;
};

// Threshold the map, label 8-connected components, drop those below
// min_area, score each by mean interior probability, sort by score.
ProposalSet extract_proposals(const Tensor& prob_map, double threshold,
                              int min_area);

std::string proposals_to_json(const ProposalSet& set);
ProposalSet proposals_from_json(const std::string& text);

}  // namespace dilseg
