#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"

#include "dilseg/io.hpp"
#include "dilseg/tensor.hpp"

using dilseg::Tensor;

TEST_CASE("tensor shape/data invariants") {
  CHECK_THROWS(Tensor(std::vector<std::size_t>{}));
  CHECK_THROWS(Tensor({1, 2, 3, 4, 5}));
  CHECK_THROWS(Tensor({2, 0, 3}));
  CHECK_THROWS(Tensor({2, 3}, {1.0f, 2.0f}));  // data length != product

  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  for (float v : t.data) CHECK(v == 0.0f);

  Tensor f = Tensor::full({2, 2}, 1.5f);
  CHECK(f.data == std::vector<float>(4, 1.5f));
}

TEST_CASE("indexing is row-major batch,channel,height,width") {
  Tensor t({2, 3, 4, 5});
  t.at(1, 2, 3, 4) = 7.0f;
  CHECK(t.data[((1 * 3 + 2) * 4 + 3) * 5 + 4] == 7.0f);
  Tensor u({3, 4, 5});
  u.at(2, 3, 4) = 9.0f;
  CHECK(u.data[(2 * 4 + 3) * 5 + 4] == 9.0f);
}

TEST_CASE("finiteness guard") {
  Tensor t({2});
  CHECK(t.all_finite());
  t.data[1] = std::numeric_limits<float>::infinity();
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(dilseg::require_finite(t, "probe"), std::runtime_error);
}

TEST_CASE("NTSR stream round trip is bit exact") {
  Tensor t({2, 3, 4});
  for (std::size_t i = 0; i < t.numel(); ++i)
    t.data[i] = static_cast<float>(i) * 0.37f - 1.2f;

  std::stringstream buf;
  dilseg::write_ntsr(t, buf);
  Tensor back = dilseg::read_ntsr(buf);
  CHECK(back.shape == t.shape);
  CHECK(back.data == t.data);
}

TEST_CASE("NTSR header layout: magic, version, ndim, extents") {
  Tensor t({2, 3});
  std::stringstream buf;
  dilseg::write_ntsr(t, buf);
  const std::string s = buf.str();
  REQUIRE(s.size() == 4 + 4 + 4 + 2 * 8 + 6 * 4);
  CHECK(s.substr(0, 4) == "NTSR");
  CHECK(static_cast<unsigned char>(s[4]) == 1);  // version, little-endian u32
  CHECK(static_cast<unsigned char>(s[8]) == 2);  // ndim
  CHECK(static_cast<unsigned char>(s[12]) == 2); // extent 0
  CHECK(static_cast<unsigned char>(s[20]) == 3); // extent 1
}

TEST_CASE("NTSR rejects bad magic and truncation") {
  {
    std::stringstream buf;
    buf << "MTRX" << std::string(32, '\0');
    CHECK_THROWS(dilseg::read_ntsr(buf));
  }
  {
    Tensor t({4});
    std::stringstream buf;
    dilseg::write_ntsr(t, buf);
    std::string s = buf.str();
    s.resize(s.size() - 5);
    std::stringstream cut(s);
    CHECK_THROWS(dilseg::read_ntsr(cut));
  }
}

TEST_CASE("NTSR file round trip") {
  const std::string path = "ntsr_roundtrip_tmp.ntsr";
  Tensor t({1, 2, 2});
  t.data = {0.0f, 0.25f, -3.0f, 1e-7f};
  dilseg::write_ntsr(t, path);
  Tensor back = dilseg::read_ntsr(path);
  CHECK(back.shape == t.shape);
  CHECK(back.data == t.data);
  std::remove(path.c_str());
}

TEST_CASE("PGM output is a P5 file with the map extents") {
  Tensor map({3, 5});
  for (std::size_t i = 0; i < map.numel(); ++i)
    map.data[i] = static_cast<float>(i) / 14.0f;
  const std::string path = "pgm_tmp.pgm";
  dilseg::write_pgm(map, path);
  std::ifstream in(path, std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  CHECK(magic == "P5");
  CHECK(w == 5);
  CHECK(h == 3);
  CHECK(maxval == 255);
  std::remove(path.c_str());
}
