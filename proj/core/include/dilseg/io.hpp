#pragma once

#include <iosfwd>
#include <string>

#include "dilseg/tensor.hpp"

namespace dilseg {

// NTSR tensor container: magic "NTSR", u32 version=1, u32 ndim,
// ndim x u64 extents, then little-endian float32 values row-major.
void write_ntsr(const Tensor& t, std::ostream& out);
void write_ntsr(const Tensor& t, const std::string& path);
Tensor read_ntsr(std::istream& in);
Tensor read_ntsr(const std::string& path);

// 8-bit binary PGM (P5). Values are clamped to [0,1] and scaled to 0..255.
void write_pgm(const Tensor& map2d, const std::string& path);

}  // namespace dilseg
