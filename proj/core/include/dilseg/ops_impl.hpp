#pragma once

// Template implementations for ops.hpp. Not included directly.

#include <cmath>
#include <cstring>

namespace dilseg {

inline int ConvParams::rate_of_factor(int d) {
  if (d < 1) throw std::invalid_argument("dilation factor must be >= 1");
  return 1 << (d - 1);
}

namespace detail {

// (rows x cols) row-major -> (cols x rows) row-major.
template <class T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  constexpr std::size_t B = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += B)
    for (std::size_t j0 = 0; j0 < cols; j0 += B) {
      const std::size_t i1 = std::min(rows, i0 + B);
      const std::size_t j1 = std::min(cols, j0 + B);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
}

// col layout: (Cin*k*k) rows x (out_h*out_w) cols. For a fixed tap (ky,kx)
// the input column index is (x0 + kx*r) + ox, i.e. contiguous in ox, so each
// row is a clipped memcpy; taps outside the map read zero.
template <class T>
void im2col(const T* x, int cin, int h, int w, int k, int r, int y0, int x0,
            int out_h, int out_w, T* col) {
  const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;
  for (int ci = 0; ci < cin; ++ci) {
    const T* plane = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int bx = x0 + kx * r;
        const int lo = std::max(0, -bx);            // first in-range ox
        const int hi = std::min(out_w, w - bx);     // one past last in-range
        for (int oy = 0; oy < out_h; ++oy) {
          T* dst = row + static_cast<std::size_t>(oy) * out_w;
          const int iy = y0 + oy + ky * r;
          if (iy < 0 || iy >= h || lo >= hi) {
            std::memset(dst, 0, sizeof(T) * out_w);
            continue;
          }
          if (lo > 0) std::memset(dst, 0, sizeof(T) * lo);
          std::memcpy(dst + lo, plane + static_cast<std::size_t>(iy) * w + bx + lo,
                      sizeof(T) * (hi - lo));
          if (hi < out_w) std::memset(dst + hi, 0, sizeof(T) * (out_w - hi));
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* col, int cin, int h, int w, int k, int r, int y0,
                int x0, int out_h, int out_w, T* gx) {
  const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;
  for (int ci = 0; ci < cin; ++ci) {
    T* plane = gx + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((ci * k + ky) * k + kx) * hw;
        const int bx = x0 + kx * r;
        const int lo = std::max(0, -bx);
        const int hi = std::min(out_w, w - bx);
        if (lo >= hi) continue;
        for (int oy = 0; oy < out_h; ++oy) {
          const int iy = y0 + oy + ky * r;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + static_cast<std::size_t>(oy) * out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * w + bx;
          for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
        }
      }
    }
  }
}

// Reused gemm/col workspaces (grow-only, contents always fully rewritten).
template <class T>
std::vector<T>& scratch_buffer(int which, std::size_t size) {
  thread_local std::vector<T> bufs[2];
  std::vector<T>& b = bufs[which];
  if (b.size() < size) b.resize(size);
  return b;
}

template <class T>
void check_conv_shapes(const TensorT<T>& input, const TensorT<T>& weight,
                       const TensorT<T>* bias, int kernel) {
  if (input.rank() != 4)
    throw std::invalid_argument("conv2d: input must be rank 4 (NCHW), got " +
                                shape_str(input));
  if (weight.rank() != 4)
    throw std::invalid_argument("conv2d: weight must be rank 4, got " +
                                shape_str(weight));
  if (weight.shape[2] != static_cast<std::size_t>(kernel) ||
      weight.shape[3] != static_cast<std::size_t>(kernel))
    throw std::invalid_argument("conv2d: weight spatial axes (2,3) are " +
                                shape_str(weight) + ", expected kernel " +
                                std::to_string(kernel));
  if (input.shape[1] != weight.shape[1])
    throw std::invalid_argument(
        "conv2d: channel axis mismatch, input axis 1 = " +
        std::to_string(input.shape[1]) + " vs weight axis 1 = " +
        std::to_string(weight.shape[1]));
  if (bias && (bias->rank() != 1 || bias->shape[0] != weight.shape[0]))
    throw std::invalid_argument(
        "conv2d: bias axis 0 must match weight output channels " +
        std::to_string(weight.shape[0]));
}

}  // namespace detail

template <class T>
TensorT<T> conv2d_region(const TensorT<T>& input, const TensorT<T>& weight,
                         const TensorT<T>& bias, int kernel, int rate, int y0,
                         int x0, int out_h, int out_w) {
  detail::check_conv_shapes(input, weight, &bias, kernel);
  const int n = static_cast<int>(input.shape[0]);
  const int cin = static_cast<int>(input.shape[1]);
  const int h = static_cast<int>(input.shape[2]);
  const int w = static_cast<int>(input.shape[3]);
  const int cout = static_cast<int>(weight.shape[0]);
  const int k = kernel, ckk = cin * k * k;
  const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;

  TensorT<T> out({static_cast<std::size_t>(n), static_cast<std::size_t>(cout),
                  static_cast<std::size_t>(out_h),
                  static_cast<std::size_t>(out_w)});
  std::vector<T>& col = detail::scratch_buffer<T>(0, hw * ckk);
  for (int ni = 0; ni < n; ++ni) {
    const T* xn = input.data.data() + static_cast<std::size_t>(ni) * cin * h * w;
    detail::im2col(xn, cin, h, w, k, rate, y0, x0, out_h, out_w, col.data());
    // out(Cout x HW) = W(Cout x CKK) * col(CKK x HW): both in native layout.
    T* on = out.data.data() + static_cast<std::size_t>(ni) * cout * hw;
    detail::gemm(false, false, cout, static_cast<int>(hw), ckk, T(1),
                 weight.data.data(), ckk, col.data(), static_cast<int>(hw),
                 T(0), on, static_cast<int>(hw));
    for (int co = 0; co < cout; ++co) {
      T* plane = on + static_cast<std::size_t>(co) * hw;
      const T bv = bias.data[co];
      for (std::size_t p = 0; p < hw; ++p) plane[p] += bv;
    }
  }
  return out;
}

template <class T>
ConvGrads<T> conv2d_region_backward(const TensorT<T>& input,
                                    const TensorT<T>& weight, int kernel,
                                    int rate, int y0, int x0,
                                    const TensorT<T>& grad_out) {
  detail::check_conv_shapes<T>(input, weight, nullptr, kernel);
  const int n = static_cast<int>(input.shape[0]);
  const int cin = static_cast<int>(input.shape[1]);
  const int h = static_cast<int>(input.shape[2]);
  const int w = static_cast<int>(input.shape[3]);
  const int cout = static_cast<int>(weight.shape[0]);
  const int out_h = static_cast<int>(grad_out.shape[2]);
  const int out_w = static_cast<int>(grad_out.shape[3]);
  const int k = kernel, ckk = cin * k * k;
  const std::size_t hw = static_cast<std::size_t>(out_h) * out_w;

  ConvGrads<T> g{TensorT<T>(input.shape), TensorT<T>(weight.shape),
                 TensorT<T>({static_cast<std::size_t>(cout)})};
  std::vector<T>& col = detail::scratch_buffer<T>(0, hw * ckk);
  std::vector<T>& gcol = detail::scratch_buffer<T>(1, hw * ckk);
  for (int ni = 0; ni < n; ++ni) {
    const T* xn = input.data.data() + static_cast<std::size_t>(ni) * cin * h * w;
    const T* gon = grad_out.data.data() + static_cast<std::size_t>(ni) * cout * hw;
    for (int co = 0; co < cout; ++co) {
      T acc = 0;
      const T* plane = gon + static_cast<std::size_t>(co) * hw;
      for (std::size_t p = 0; p < hw; ++p) acc += plane[p];
      g.bias.data[co] += acc;
    }
    detail::im2col(xn, cin, h, w, k, rate, y0, x0, out_h, out_w, col.data());
    // gW(Cout x CKK) += gout(Cout x HW) * col(CKK x HW)^T
    detail::gemm(false, true, cout, ckk, static_cast<int>(hw), T(1), gon,
                 static_cast<int>(hw), col.data(), static_cast<int>(hw), T(1),
                 g.weight.data.data(), ckk);
    // gcol(CKK x HW) = W(Cout x CKK)^T * gout(Cout x HW)
    detail::gemm(true, false, ckk, static_cast<int>(hw), cout, T(1),
                 weight.data.data(), ckk, gon, static_cast<int>(hw), T(0),
                 gcol.data(), static_cast<int>(hw));
    T* gxn = g.input.data.data() + static_cast<std::size_t>(ni) * cin * h * w;
    detail::col2im_add(gcol.data(), cin, h, w, k, rate, y0, x0, out_h, out_w, gxn);
  }
  return g;
}

template <class T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, const ConvParams& params) {
  detail::check_conv_shapes(input, weight, &bias, params.kernel);
  require_finite(input, "conv2d input");
  const int h = static_cast<int>(input.shape[2]);
  const int w = static_cast<int>(input.shape[3]);
  if (params.padding == Padding::SameZero) {
    const int p = params.pad_lo();
    return conv2d_region(input, weight, bias, params.kernel,
                         params.dilation_rate, -p, -p, h, w);
  }
  const int shrink = (params.kernel - 1) * params.dilation_rate;
  if (h <= shrink || w <= shrink)
    throw std::invalid_argument(
        "conv2d: valid padding needs spatial extents > " +
        std::to_string(shrink) + ", input is " + shape_str(input) +
        " (axes 2,3)");
  return conv2d_region(input, weight, bias, params.kernel,
                       params.dilation_rate, 0, 0, h - shrink, w - shrink);
}

template <class T>
ConvGrads<T> conv2d_backward(const TensorT<T>& input, const TensorT<T>& weight,
                             const ConvParams& params,
                             const TensorT<T>& grad_out) {
  const int p = params.padding == Padding::SameZero ? params.pad_lo() : 0;
  return conv2d_region_backward(input, weight, params.kernel,
                                params.dilation_rate, -p, -p, grad_out);
}

template <class T>
TensorT<T> zero_insert_kernel(const TensorT<T>& weight, int rate) {
  if (rate < 1) throw std::invalid_argument("zero_insert_kernel: rate must be >= 1");
  if (weight.rank() != 4)
    throw std::invalid_argument("zero_insert_kernel: weight must be rank 4");
  const std::size_t k = weight.shape[2];
  const std::size_t ke = (k - 1) * rate + 1;
  TensorT<T> out({weight.shape[0], weight.shape[1], ke, ke});
  for (std::size_t co = 0; co < weight.shape[0]; ++co)
    for (std::size_t ci = 0; ci < weight.shape[1]; ++ci)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx)
          out.at(co, ci, ky * rate, kx * rate) = weight.at(co, ci, ky, kx);
  return out;
}

template <class T>
TensorT<T> crop_pad(const TensorT<T>& input, int y0, int x0, int out_h,
                    int out_w) {
  if (input.rank() != 4)
    throw std::invalid_argument("crop_pad: input must be rank 4");
  const int h = static_cast<int>(input.shape[2]);
  const int w = static_cast<int>(input.shape[3]);
  TensorT<T> out({input.shape[0], input.shape[1],
                  static_cast<std::size_t>(out_h),
                  static_cast<std::size_t>(out_w)});
  const int oy0 = std::max(0, -y0), oy1 = std::min(out_h, h - y0);
  const int ox0 = std::max(0, -x0), ox1 = std::min(out_w, w - x0);
  if (oy0 >= oy1 || ox0 >= ox1) return out;  // no overlap, all zeros
  for (std::size_t nc = 0; nc < input.shape[0] * input.shape[1]; ++nc) {
    const T* src = input.data.data() + nc * h * w;
    T* dst = out.data.data() + nc * static_cast<std::size_t>(out_h) * out_w;
    for (int oy = oy0; oy < oy1; ++oy)
      std::memcpy(dst + static_cast<std::size_t>(oy) * out_w + ox0,
                  src + static_cast<std::size_t>(y0 + oy) * w + (x0 + ox0),
                  sizeof(T) * (ox1 - ox0));
  }
  return out;
}

template <class T>
TensorT<T> crop_pad_backward(const TensorT<T>& input_shape_like, int y0,
                             int x0, const TensorT<T>& grad_out) {
  TensorT<T> gx(input_shape_like.shape);
  const int h = static_cast<int>(gx.shape[2]);
  const int w = static_cast<int>(gx.shape[3]);
  const int out_h = static_cast<int>(grad_out.shape[2]);
  const int out_w = static_cast<int>(grad_out.shape[3]);
  const int oy0 = std::max(0, -y0), oy1 = std::min(out_h, h - y0);
  const int ox0 = std::max(0, -x0), ox1 = std::min(out_w, w - x0);
  if (oy0 >= oy1 || ox0 >= ox1) return gx;
  for (std::size_t nc = 0; nc < gx.shape[0] * gx.shape[1]; ++nc) {
    const T* src = grad_out.data.data() + nc * static_cast<std::size_t>(out_h) * out_w;
    T* dst = gx.data.data() + nc * h * w;
    for (int oy = oy0; oy < oy1; ++oy) {
      const T* s = src + static_cast<std::size_t>(oy) * out_w + ox0;
      T* d = dst + static_cast<std::size_t>(y0 + oy) * w + (x0 + ox0);
      for (int i = 0; i < ox1 - ox0; ++i) d[i] += s[i];
    }
  }
  return gx;
}

template <class T>
TensorT<T> maxpool2(const TensorT<T>& input, std::vector<std::uint32_t>* argmax) {
  if (input.rank() != 4)
    throw std::invalid_argument("maxpool2: input must be rank 4");
  const std::size_t n = input.shape[0], c = input.shape[1];
  const std::size_t h = input.shape[2], w = input.shape[3];
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  TensorT<T> out({n, c, oh, ow});
  if (argmax) argmax->assign(out.numel(), 0);
  std::size_t oi = 0;
  for (std::size_t nc = 0; nc < n * c; ++nc) {
    const T* plane = input.data.data() + nc * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox, ++oi) {
        T best = T(0);
        std::size_t best_idx = 0;
        bool first = true;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t y = 2 * oy + dy, x = 2 * ox + dx;
            if (y >= h || x >= w) continue;  // odd edge acts as -inf pad
            const T v = plane[y * w + x];
            if (first || v > best) {
              best = v;
              best_idx = nc * h * w + y * w + x;
              first = false;
            }
          }
        out.data[oi] = best;
        if (argmax) (*argmax)[oi] = static_cast<std::uint32_t>(best_idx);
      }
  }
  return out;
}

template <class T>
TensorT<T> maxpool2_backward(const TensorT<T>& input,
                             const std::vector<std::uint32_t>& argmax,
                             const TensorT<T>& grad_out) {
  TensorT<T> gx(input.shape);
  for (std::size_t i = 0; i < grad_out.numel(); ++i)
    gx.data[argmax[i]] += grad_out.data[i];
  return gx;
}

template <class T>
TensorT<T> transposed_conv(const TensorT<T>& input, const TensorT<T>& weight,
                           int stride) {
  if (stride < 1) throw std::invalid_argument("transposed_conv: stride must be >= 1");
  if (input.rank() != 4 || weight.rank() != 4)
    throw std::invalid_argument("transposed_conv: input and weight must be rank 4");
  if (input.shape[1] != weight.shape[0])
    throw std::invalid_argument(
        "transposed_conv: channel axis mismatch, input axis 1 = " +
        std::to_string(input.shape[1]) + " vs weight axis 0 = " +
        std::to_string(weight.shape[0]));
  const int k = static_cast<int>(weight.shape[2]);
  if (k < stride)
    throw std::invalid_argument("transposed_conv: kernel extent must be >= stride");
  const int n = static_cast<int>(input.shape[0]);
  const int cin = static_cast<int>(input.shape[1]);
  const int h = static_cast<int>(input.shape[2]);
  const int w = static_cast<int>(input.shape[3]);
  const int cout = static_cast<int>(weight.shape[1]);
  const int out_h = h * stride, out_w = w * stride;
  const int crop = (k - stride) / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const int ckk = cout * k * k;

  TensorT<T> out({static_cast<std::size_t>(n), static_cast<std::size_t>(cout),
                  static_cast<std::size_t>(out_h),
                  static_cast<std::size_t>(out_w)});
  std::vector<T> x_hw(hw * cin), y_hw(hw * ckk);
  for (int ni = 0; ni < n; ++ni) {
    const T* xn = input.data.data() + static_cast<std::size_t>(ni) * cin * hw;
    detail::transpose(xn, cin, hw, x_hw.data());
    // weight.data is already (Cin) x (Cout*k*k) row-major
    detail::gemm(false, false, static_cast<int>(hw), ckk, cin, T(1),
                 x_hw.data(), cin, weight.data.data(), ckk, T(0), y_hw.data(),
                 ckk);
    T* on = out.data.data() +
            static_cast<std::size_t>(ni) * cout * out_h * out_w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const T* row = y_hw.data() + (static_cast<std::size_t>(y) * w + x) * ckk;
        for (int co = 0; co < cout; ++co)
          for (int ky = 0; ky < k; ++ky) {
            const int oy = y * stride + ky - crop;
            if (oy < 0 || oy >= out_h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ox = x * stride + kx - crop;
              if (ox < 0 || ox >= out_w) continue;
              on[(static_cast<std::size_t>(co) * out_h + oy) * out_w + ox] +=
                  row[(co * k + ky) * k + kx];
            }
          }
      }
  }
  require_finite(out, "transposed_conv output");
  return out;
}

template <class T>
ConvGrads<T> transposed_conv_backward(const TensorT<T>& input,
                                      const TensorT<T>& weight, int stride,
                                      const TensorT<T>& grad_out) {
  const int k = static_cast<int>(weight.shape[2]);
  const int n = static_cast<int>(input.shape[0]);
  const int cin = static_cast<int>(input.shape[1]);
  const int h = static_cast<int>(input.shape[2]);
  const int w = static_cast<int>(input.shape[3]);
  const int cout = static_cast<int>(weight.shape[1]);
  const int out_h = h * stride, out_w = w * stride;
  const int crop = (k - stride) / 2;
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  const int ckk = cout * k * k;

  ConvGrads<T> g{TensorT<T>(input.shape), TensorT<T>(weight.shape),
                 TensorT<T>({static_cast<std::size_t>(cout)})};
  std::vector<T> gy_hw(hw * ckk), x_hw(hw * cin), gx_hw(hw * cin);
  for (int ni = 0; ni < n; ++ni) {
    const T* gon = grad_out.data.data() +
                   static_cast<std::size_t>(ni) * cout * out_h * out_w;
    // gather: reverse of the forward scatter
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        T* row = gy_hw.data() + (static_cast<std::size_t>(y) * w + x) * ckk;
        for (int co = 0; co < cout; ++co)
          for (int ky = 0; ky < k; ++ky) {
            const int oy = y * stride + ky - crop;
            for (int kx = 0; kx < k; ++kx) {
              const int ox = x * stride + kx - crop;
              row[(co * k + ky) * k + kx] =
                  (oy < 0 || oy >= out_h || ox < 0 || ox >= out_w)
                      ? T(0)
                      : gon[(static_cast<std::size_t>(co) * out_h + oy) * out_w + ox];
            }
          }
      }
    // gX(HW x Cin) = gY * W^T ; gW(Cin x Cout*k*k) += X^T * gY
    detail::gemm(false, true, static_cast<int>(hw), cin, ckk, T(1),
                 gy_hw.data(), ckk, weight.data.data(), ckk, T(0),
                 gx_hw.data(), cin);
    const T* xn = input.data.data() + static_cast<std::size_t>(ni) * cin * hw;
    detail::transpose(xn, cin, hw, x_hw.data());
    detail::gemm(true, false, cin, ckk, static_cast<int>(hw), T(1),
                 x_hw.data(), cin, gy_hw.data(), ckk, T(1),
                 g.weight.data.data(), ckk);
    detail::transpose(gx_hw.data(), hw, cin,
                      g.input.data.data() + static_cast<std::size_t>(ni) * cin * hw);
  }
  return g;
}

template <class T>
TensorT<T> relu(const TensorT<T>& input) {
  TensorT<T> out = input;
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  return out;
}

template <class T>
TensorT<T> relu_backward(const TensorT<T>& input, const TensorT<T>& grad_out) {
  TensorT<T> gx(input.shape);
  for (std::size_t i = 0; i < input.numel(); ++i)
    gx.data[i] = input.data[i] > T(0) ? grad_out.data[i] : T(0);
  return gx;
}

template <class T>
TensorT<T> softmax_channels(const TensorT<T>& input) {
  if (input.rank() != 4)
    throw std::invalid_argument("softmax_channels: input must be rank 4");
  const std::size_t n = input.shape[0], c = input.shape[1];
  const std::size_t hw = input.shape[2] * input.shape[3];
  if (c < 2)
    throw std::invalid_argument("softmax_channels: need >= 2 channels");
  TensorT<T> out(input.shape);
  for (std::size_t ni = 0; ni < n; ++ni) {
    const T* xn = input.data.data() + ni * c * hw;
    T* on = out.data.data() + ni * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T mx = xn[p];
      for (std::size_t ci = 1; ci < c; ++ci) mx = std::max(mx, xn[ci * hw + p]);
      T sum = 0;
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T e = std::exp(xn[ci * hw + p] - mx);
        on[ci * hw + p] = e;
        sum += e;
      }
      for (std::size_t ci = 0; ci < c; ++ci) on[ci * hw + p] /= sum;
    }
  }
  return out;
}

template <class T>
TensorT<T> softmax_channels_backward(const TensorT<T>& output,
                                     const TensorT<T>& grad_out) {
  const std::size_t n = output.shape[0], c = output.shape[1];
  const std::size_t hw = output.shape[2] * output.shape[3];
  TensorT<T> gx(output.shape);
  for (std::size_t ni = 0; ni < n; ++ni) {
    const T* pn = output.data.data() + ni * c * hw;
    const T* gn = grad_out.data.data() + ni * c * hw;
    T* on = gx.data.data() + ni * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T dot = 0;
      for (std::size_t ci = 0; ci < c; ++ci)
        dot += gn[ci * hw + p] * pn[ci * hw + p];
      for (std::size_t ci = 0; ci < c; ++ci)
        on[ci * hw + p] = pn[ci * hw + p] * (gn[ci * hw + p] - dot);
    }
  }
  return gx;
}

namespace detail {
constexpr double kLogClamp = 1e-12;
}

template <class T>
T cross_entropy(const TensorT<T>& prob, const TensorT<T>& target,
                const TensorT<T>& mask) {
  if (!prob.same_shape(target))
    throw std::invalid_argument("cross_entropy: prob " + shape_str(prob) +
                                " vs target " + shape_str(target));
  if (mask.rank() != 2 || mask.shape[0] != prob.shape[2] ||
      mask.shape[1] != prob.shape[3])
    throw std::invalid_argument("cross_entropy: mask must be HxW matching prob");
  const std::size_t n = prob.shape[0], c = prob.shape[1];
  const std::size_t hw = prob.shape[2] * prob.shape[3];
  std::size_t active = 0;
  for (T v : mask.data)
    if (v != T(0)) ++active;
  if (active == 0) throw std::invalid_argument("cross_entropy: empty region mask");
  double loss = 0;
  for (std::size_t ni = 0; ni < n; ++ni) {
    const T* pn = prob.data.data() + ni * c * hw;
    const T* tn = target.data.data() + ni * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      if (mask.data[p] == T(0)) continue;
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T t = tn[ci * hw + p];
        if (t != T(0))
          loss -= static_cast<double>(t) *
                  std::log(std::max(static_cast<double>(pn[ci * hw + p]),
                                    detail::kLogClamp));
      }
    }
  }
  return static_cast<T>(loss / (static_cast<double>(n) * active));
}

template <class T>
TensorT<T> cross_entropy_backward(const TensorT<T>& prob,
                                  const TensorT<T>& target,
                                  const TensorT<T>& mask, T grad_seed) {
  const std::size_t n = prob.shape[0], c = prob.shape[1];
  const std::size_t hw = prob.shape[2] * prob.shape[3];
  std::size_t active = 0;
  for (T v : mask.data)
    if (v != T(0)) ++active;
  TensorT<T> g(prob.shape);
  const double scale = static_cast<double>(grad_seed) /
                       (static_cast<double>(n) * active);
  for (std::size_t ni = 0; ni < n; ++ni) {
    const T* pn = prob.data.data() + ni * c * hw;
    const T* tn = target.data.data() + ni * c * hw;
    T* gn = g.data.data() + ni * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      if (mask.data[p] == T(0)) continue;
      for (std::size_t ci = 0; ci < c; ++ci) {
        const T t = tn[ci * hw + p];
        const double pv = static_cast<double>(pn[ci * hw + p]);
        // derivative of -log(clamp(p)) is 0 in the clamped region
        if (t != T(0) && pv > detail::kLogClamp)
          gn[ci * hw + p] = static_cast<T>(-scale * t / pv);
      }
    }
  }
  return g;
}

template <class T>
TensorT<T> finite_diff_grad(const std::function<T(const TensorT<T>&)>& loss_fn,
                            const TensorT<T>& at, T eps) {
  if (eps <= T(0)) throw std::invalid_argument("finite_diff_grad: eps must be > 0");
  TensorT<T> g(at.shape);
  TensorT<T> x = at;
  for (std::size_t i = 0; i < at.numel(); ++i) {
    const T v = at.data[i];
    x.data[i] = v + eps;
    const T hi = loss_fn(x);
    x.data[i] = v - eps;
    const T lo = loss_fn(x);
    x.data[i] = v;
    g.data[i] = (hi - lo) / (2 * eps);
  }
  return g;
}

}  // namespace dilseg
