#include "dilseg/infer.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace dilseg {
namespace {

// Mirror index into [0, n) without repeating the boundary sample.
std::size_t reflect_index(long i, std::size_t n) {
  const long period = 2 * static_cast<long>(n) - 2;
  if (n == 1) return 0;
  long m = i % period;
  if (m < 0) m += period;
  if (m >= static_cast<long>(n)) m = period - m;
  return static_cast<std::size_t>(m);
}

}  // namespace

Tensor predict_scene(const Model& model, const Tensor& image, int batch) {
  if (image.shape.size() != 3 || image.shape[0] != 3) {
    throw std::invalid_argument("predict_scene expects a 3xHxW image");
  }
  const int P = model.spec.input_patch;
  const int L = model.spec.supervised_center;
  const int pad = (P - L) / 2;
  const auto H = image.shape[1], W = image.shape[2];
  if (static_cast<int>(H) < P || static_cast<int>(W) < P) {
    throw std::invalid_argument("scene smaller than one " + std::to_string(P) +
                                "-pixel window");
  }
  if (batch < 1) throw std::invalid_argument("predict_scene: batch must be >= 1");

  // Round the tiling up to whole center blocks; the excess reads reflected
  // pixels and is cropped away, so every scene pixel is written exactly once.
  const std::size_t tiles_y = (H + L - 1) / L;
  const std::size_t tiles_x = (W + L - 1) / L;
  const std::size_t n_tiles = tiles_y * tiles_x;

  Tensor out = Tensor::zeros({H, W});
  const bool roi = model.spec.stride1();
  ForwardOptions opts;
  opts.roi_extent = roi ? L : 0;

  std::vector<std::size_t> pending;
  Tensor windows = Tensor::zeros({static_cast<std::size_t>(batch), 3,
                                  static_cast<std::size_t>(P),
                                  static_cast<std::size_t>(P)});
  auto flush = [&]() {
    if (pending.empty()) return;
    Tensor in = windows;
    if (pending.size() < static_cast<std::size_t>(batch)) {
      in = Tensor::zeros({pending.size(), 3, static_cast<std::size_t>(P),
                          static_cast<std::size_t>(P)});
      std::copy(windows.data.begin(),
                windows.data.begin() + static_cast<std::ptrdiff_t>(in.numel()),
                in.data.begin());
    }
    const ForwardResult fr = forward(model, in, opts);
    const auto oh = fr.prob.shape[2], ow = fr.prob.shape[3];
    const std::size_t cy = (oh - L) / 2, cx = (ow - L) / 2;
    for (std::size_t n = 0; n < pending.size(); ++n) {
      const std::size_t ty = pending[n] / tiles_x, tx = pending[n] % tiles_x;
      for (std::size_t y = 0; y < static_cast<std::size_t>(L); ++y) {
        const std::size_t sy = ty * L + y;
        if (sy >= H) break;
        for (std::size_t x = 0; x < static_cast<std::size_t>(L); ++x) {
          const std::size_t sx = tx * L + x;
          if (sx >= W) continue;
          out.at(sy, sx) = fr.prob.at(n, 1, cy + y, cx + x);
        }
      }
    }
    pending.clear();
  };

  for (std::size_t tile = 0; tile < n_tiles; ++tile) {
    const std::size_t ty = tile / tiles_x, tx = tile % tiles_x;
    const std::size_t n = pending.size();
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < P; ++y) {
        const std::size_t sy =
            reflect_index(static_cast<long>(ty) * L + y - pad, H);
        for (int x = 0; x < P; ++x) {
          const std::size_t sx =
              reflect_index(static_cast<long>(tx) * L + x - pad, W);
          windows.at(n, c, y, x) = image.at(c, sy, sx);
        }
      }
    }
    pending.push_back(tile);
    if (pending.size() == static_cast<std::size_t>(batch)) flush();
  }
  flush();
  return out;
}

ProposalSet extract_proposals(const Tensor& prob_map, double threshold,
                              int min_area) {
  if (prob_map.shape.size() != 2) {
    throw std::invalid_argument("extract_proposals expects an HxW map");
  }
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("threshold must lie in (0,1)");
  }
  if (min_area < 1) throw std::invalid_argument("min_area must be >= 1");

  const auto H = prob_map.shape[0], W = prob_map.shape[1];
  ProposalSet set;
  set.threshold = threshold;
  set.min_area = min_area;

  std::vector<std::int32_t> label(H * W, 0);
  std::vector<std::pair<std::size_t, std::size_t>> stack;
  std::int32_t next = 0;
  for (std::size_t sy = 0; sy < H; ++sy) {
    for (std::size_t sx = 0; sx < W; ++sx) {
      if (prob_map.at(sy, sx) < threshold || label[sy * W + sx] != 0) continue;
      ++next;
      Proposal p;
      p.mask = Mask(H, W);
      p.y0 = p.y1 = static_cast<int>(sy);
      p.x0 = p.x1 = static_cast<int>(sx);
      double sum = 0;
      label[sy * W + sx] = next;
      stack.push_back({sy, sx});
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        p.mask.at(y, x) = 1;
        ++p.area;
        sum += prob_map.at(y, x);
        p.y0 = std::min<int>(p.y0, static_cast<int>(y));
        p.y1 = std::max<int>(p.y1, static_cast<int>(y));
        p.x0 = std::min<int>(p.x0, static_cast<int>(x));
        p.x1 = std::max<int>(p.x1, static_cast<int>(x));
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const long ny = static_cast<long>(y) + dy, nx = static_cast<long>(x) + dx;
            if (ny < 0 || ny >= static_cast<long>(H) || nx < 0 ||
                nx >= static_cast<long>(W)) {
              continue;
            }
            const std::size_t ni = static_cast<std::size_t>(ny) * W + nx;
            if (prob_map.at(ny, nx) < threshold || label[ni] != 0) continue;
            label[ni] = next;
            stack.push_back({static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)});
          }
        }
      }
      if (p.area >= min_area) {
        p.score = sum / p.area;
        set.proposals.push_back(std::move(p));
      }
    }
  }
  std::stable_sort(set.proposals.begin(), set.proposals.end(),
                   [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
  return set;
}

std::vector<std::uint32_t> rle_encode(const Mask& mask) {
  std::vector<std::uint32_t> runs;
  std::uint8_t current = 0;
  std::uint32_t run = 0;
  for (auto v : mask.data) {
    const std::uint8_t bit = v != 0;
    if (bit == current) {
      ++run;
    } else {
      runs.push_back(run);
      current = bit;
      run = 1;
    }
  }
  runs.push_back(run);
  return runs;
}

Mask rle_decode(const std::vector<std::uint32_t>& runs, std::size_t h, std::size_t w) {
  Mask mask(h, w);
  std::size_t pos = 0;
  std::uint8_t bit = 0;
  for (auto run : runs) {
    if (pos + run > mask.data.size()) throw std::invalid_argument("RLE overruns mask");
    if (bit) std::fill(mask.data.begin() + pos, mask.data.begin() + pos + run, 1);
    pos += run;
    bit ^= 1;
  }
  if (pos != mask.data.size()) throw std::invalid_argument("RLE underruns mask");
  return mask;
}

std::string proposals_to_json(const ProposalSet& set) {
  nlohmann::json j;
  j["threshold"] = set.threshold;
  j["min_area"] = set.min_area;
  j["scene_id"] = set.scene_id;
  nlohmann::json list = nlohmann::json::array();
  for (const Proposal& p : set.proposals) {
    list.push_back({{"score", p.score},
                    {"area", p.area},
                    {"bbox", {p.y0, p.x0, p.y1, p.x1}},
                    {"extent", {p.mask.h, p.mask.w}},
                    {"rle", rle_encode(p.mask)}});
  }
  j["proposals"] = std::move(list);
  return j.dump(2);
}

ProposalSet proposals_from_json(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  ProposalSet set;
  set.threshold = j.at("threshold").get<double>();
  set.min_area = j.at("min_area").get<int>();
  set.scene_id = j.value("scene_id", "");
  for (const auto& e : j.at("proposals")) {
    Proposal p;
    p.score = e.at("score").get<double>();
    p.area = e.at("area").get<int>();
    const auto& bb = e.at("bbox");
    p.y0 = bb.at(0).get<int>();
    p.x0 = bb.at(1).get<int>();
    p.y1 = bb.at(2).get<int>();
    p.x1 = bb.at(3).get<int>();
    const auto& ex = e.at("extent");
    p.mask = rle_decode(e.at("rle").get<std::vector<std::uint32_t>>(),
                        ex.at(0).get<std::size_t>(), ex.at(1).get<std::size_t>());
    set.proposals.push_back(std::move(p));
  }
  return set;
}

}  // namespace dilseg
