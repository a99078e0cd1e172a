#include "dilseg/io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace dilseg {

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v),
                        static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("NTSR: truncated header");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 |
         std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error("NTSR: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

static_assert(sizeof(float) == 4);

}  // namespace

void write_ntsr(const Tensor& t, std::ostream& out) {
  out.write("NTSR", 4);
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t e : t.shape) put_u64(out, e);
  // Little-endian floats; this build targets little-endian hosts only.
  out.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("NTSR: write failed");
}

void write_ntsr(const Tensor& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  write_ntsr(t, f);
}

Tensor read_ntsr(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "NTSR", 4) != 0)
    throw std::runtime_error("NTSR: bad magic");
  const std::uint32_t version = get_u32(in);
  if (version != 1)
    throw std::runtime_error("NTSR: unsupported version " +
                             std::to_string(version));
  const std::uint32_t ndim = get_u32(in);
  if (ndim == 0 || ndim > 4)
    throw std::runtime_error("NTSR: bad rank " + std::to_string(ndim));
  std::vector<std::size_t> shape(ndim);
  for (auto& e : shape) e = static_cast<std::size_t>(get_u64(in));
  Tensor t(shape);
  if (!in.read(reinterpret_cast<char*>(t.data.data()),
               static_cast<std::streamsize>(t.data.size() * sizeof(float))))
    throw std::runtime_error("NTSR: truncated data");
  return t;
}

Tensor read_ntsr(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for read: " + path);
  return read_ntsr(f);
}

void write_pgm(const Tensor& map2d, const std::string& path) {
  if (map2d.rank() != 2)
    throw std::invalid_argument("PGM expects a rank-2 map, got " +
                                shape_str(map2d));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for write: " + path);
  const std::size_t h = map2d.shape[0], w = map2d.shape[1];
  f << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      float v = std::clamp(map2d.at(y, x), 0.0f, 1.0f);
      row[x] = static_cast<unsigned char>(v * 255.0f + 0.5f);
    }
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(w));
  }
  if (!f) throw std::runtime_error("PGM: write failed");
}

}  // namespace dilseg
