#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dilseg {

// Dense N-d array, rank <= 4, canonical layout N x C x H x W, row-major.
template <class T>
struct TensorT {
  std::vector<std::size_t> shape;
  std::vector<T> data;

  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> s) : shape(std::move(s)) {
    if (shape.empty() || shape.size() > 4)
      throw std::invalid_argument("tensor rank must be 1..4, got " +
                                  std::to_string(shape.size()));
    for (std::size_t e : shape)
      if (e == 0) throw std::invalid_argument("tensor extent must be positive");
    data.assign(numel_of(shape), T(0));
  }

  TensorT(std::vector<std::size_t> s, std::vector<T> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (shape.empty() || shape.size() > 4)
      throw std::invalid_argument("tensor rank must be 1..4");
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape product " +
                                  std::to_string(numel_of(shape)));
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           std::multiplies<>());
  }

  static TensorT zeros(std::vector<std::size_t> s) { return TensorT(std::move(s)); }

  static TensorT full(std::vector<std::size_t> s, T v) {
    TensorT t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }

  std::size_t extent(std::size_t axis) const {
    if (axis >= shape.size())
      throw std::out_of_range("tensor axis " + std::to_string(axis) +
                              " out of range for rank " +
                              std::to_string(shape.size()));
    return shape[axis];
  }

  // 4-d accessors (n, c, y, x); lower-rank tensors index from the left.
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  T& at(std::size_t c, std::size_t y, std::size_t x) {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  T at(std::size_t c, std::size_t y, std::size_t x) const {
    return data[(c * shape[1] + y) * shape[2] + x];
  }
  T& at(std::size_t y, std::size_t x) { return data[y * shape[1] + x]; }
  T at(std::size_t y, std::size_t x) const { return data[y * shape[1] + x]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i)
      out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

template <class T>
void require_finite(const TensorT<T>& t, const std::string& what) {
  if (!t.all_finite())
    throw std::runtime_error("non-finite value in " + what);
}

template <class T>
std::string shape_str(const TensorT<T>& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

// Forces the vectorized OpenBLAS kernel when CPU auto-detection fails under
// virtualization. Called once from the library; safe to call repeatedly.
void configure_blas();

// OpenBLAS picks its compute kernel from cpuid before any in-process hook
// can run, and misdetects the CPU under some hypervisors (falling back to a
// scalar kernel). When the right OPENBLAS_CORETYPE is not already set and
// the CPU supports a better kernel, re-execs the current process once with
// the variable exported. Call first thing in main(). No-op otherwise.
void ensure_fast_blas(char** argv);

}  // namespace dilseg
