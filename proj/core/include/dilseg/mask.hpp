#pragma once

#include <cstdint>
#include <cstddef>
#include <vector>

namespace dilseg {

// Dense binary mask over a scene grid.
struct Mask {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> data;  // row-major, 0/1

  Mask() = default;
  Mask(std::size_t h_, std::size_t w_) : h(h_), w(w_), data(h_ * w_, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return data[y * w + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return data[y * w + x]; }

  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
  bool same_extent(const Mask& o) const { return h == o.h && w == o.w; }
};

// Row-major run-length encoding starting with the leading run of zeros
// (alternating zero/one run lengths; runs sum to h*w).
std::vector<std::uint32_t> rle_encode(const Mask& mask);
Mask rle_decode(const std::vector<std::uint32_t>& runs, std::size_t h, std::size_t w);

}  // namespace dilseg
