#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <vector>

#include "dilseg/tensor.hpp"

namespace dilseg {

enum class Padding { SameZero, Valid };

// Dilated square-kernel convolution parameters. The architecture notation
// gives a dilation *factor* d; tap spacing (rate) is r = 2^(d-1), so the
// interval between adjacent valid weights is r-1 and the effective kernel
// span is (k-1)*r + 1.
struct ConvParams {
  int kernel = 3;
  int dilation_factor = 1;
  int dilation_rate = 1;
  Padding padding = Padding::SameZero;
  int stride = 1;  // dilated stacks are stride-1 throughout

  static int rate_of_factor(int d);

  static ConvParams with_factor(int k, int d, Padding p = Padding::SameZero) {
    ConvParams c;
    c.kernel = k;
    c.dilation_factor = d;
    c.dilation_rate = rate_of_factor(d);
    c.padding = p;
    return c;
  }

  static ConvParams with_rate(int k, int r, Padding p = Padding::SameZero) {
    ConvParams c;
    c.kernel = k;
    c.dilation_factor = 0;  // rate given directly
    c.dilation_rate = r;
    c.padding = p;
    return c;
  }

  int span() const { return (kernel - 1) * dilation_rate + 1; }
  // Left/top padding offset used for same-zero output alignment.
  int pad_lo() const { return ((kernel - 1) / 2) * dilation_rate; }
};

namespace detail {
// Row-major gemm: C(MxN) = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
          const float* a, int lda, const float* b, int ldb, float beta,
          float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);
}  // namespace detail

template <class T>
struct ConvGrads {
  TensorT<T> input;
  TensorT<T> weight;
  TensorT<T> bias;
};

// Core dilated cross-correlation over an explicit output window. Output
// element (n, co, oy, ox) reads input taps (y0+oy+ky*r, x0+ox+kx*r); taps
// outside the input read zero. weight layout (Cout, Cin, k, k).
template <class T>
TensorT<T> conv2d_region(const TensorT<T>& input, const TensorT<T>& weight,
                         const TensorT<T>& bias, int kernel, int rate, int y0,
                         int x0, int out_h, int out_w);

template <class T>
ConvGrads<T> conv2d_region_backward(const TensorT<T>& input,
                                    const TensorT<T>& weight, int kernel,
                                    int rate, int y0, int x0,
                                    const TensorT<T>& grad_out);

// Spec-facing convolution: same-zero keeps resolution, valid shrinks each
// spatial extent by (k-1)*r.
template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, const ConvParams& params);

template <class T>
ConvGrads<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& weight,
                             const ConvParams& params,
                             const TensorT<T>& grad_out);

// Testing oracle: dense kernel with the original weights placed at stride
// `rate` and zeros in between; spatial extent becomes (k-1)*rate + 1.
template <class T>
TensorT<T> zero_insert_kernel(const TensorT<T>& weight, int rate);

// Zero-fill crop/pad: out(n,c,oy,ox) = in(n,c,y0+oy,x0+ox), zero outside.
template <class T>
TensorT<T> crop_pad(const TensorT<T>& input, int y0, int x0, int out_h,
                    int out_w);
template <class T>
TensorT<T> crop_pad_backward(const TensorT<T>& input_shape_like, int y0,
                             int x0, const TensorT<T>& grad_out);

// 2x2/stride-2 max pooling; odd extents are edge-padded with -inf. argmax
// holds the flat input index routed to each output element (first maximal
// index in row-major order on ties).
template <class T>
TensorT<T> maxpool2(const TensorT<T>& input, std::vector<std::uint32_t>* argmax);
template <class T>
TensorT<T> maxpool2_backward(const TensorT<T>& input,
                             const std::vector<std::uint32_t>& argmax,
                             const TensorT<T>& grad_out);

// Transposed convolution: zero-stuff the input by `stride`, dense conv,
// symmetric crop so the output extent is exactly input*stride. weight
// layout (Cin, Cout, k, k).
template <class T>
TensorT<T> transposed_conv(const TensorT<T>& input, const TensorT<T>& weight,
                           int stride);
template <class T>
ConvGrads<T> transposed_conv_backward(const TensorT<T>& input,
                                      const TensorT<T>& weight, int stride,
                                      const TensorT<T>& grad_out);

template <class T>
TensorT<T> relu(const TensorT<T>& input);
template <class T>
TensorT<T> relu_backward(const TensorT<T>& input, const TensorT<T>& grad_out);

// Per-pixel softmax across the channel axis with max-subtraction.
template <class T>
TensorT<T> softmax_channels(const TensorT<T>& input);
template <class T>
TensorT<T> softmax_channels_backward(const TensorT<T>& output,
                                     const TensorT<T>& grad_out);

// Mean over mask-selected pixels of -log p(target class); p clamped at
// 1e-12. target is one-hot with prob's shape; mask is an HxW selector.
template <class T>
T cross_entropy(const TensorT<T>& prob, const TensorT<T>& target,
                const TensorT<T>& mask);
template <class T>
TensorT<T> cross_entropy_backward(const TensorT<T>& prob,
                                  const TensorT<T>& target,
                                  const TensorT<T>& mask, T grad_seed);

// Central-difference gradient of a scalar function, element by element.
template <class T>
TensorT<T> finite_diff_grad(const std::function<T(const TensorT<T>&)>& loss_fn,
                            const TensorT<T>& at, T eps);

}  // namespace dilseg

#include "dilseg/ops_impl.hpp"
