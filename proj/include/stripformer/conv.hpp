// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>

#include "stripformer/ops.hpp"

namespace stripformer {

namespace detail {

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  const int64_t span = in + 2 * pad - k;
  if (span < 0 || span % stride != 0) {
    throw ConfigError("conv: non-integral output extent for input " + std::to_string(in) +
                      ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                      ", padding " + std::to_string(pad));
  }
  return span / stride + 1;
}

template <typename T>
void add_channel_bias(T* y, const T* bias, int64_t channels, int64_t inner) {
  for (int64_t c = 0; c < channels; ++c) {
    const T b = bias[c];
    T* row = y + c * inner;
    for (int64_t i = 0; i < inner; ++i) row[i] += b;
  }
}

// 2-d convolution, NCHW x [F,C,k,k] -> NF(H')(W'). Square kernel, zero
// padding. Lowered to im2col + GEMM; 1x1/stride-1 convs skip the lowering.
template <typename T>
Tensor<T> conv2d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias_in,
                      int64_t stride, int64_t padding) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw ShapeError("conv2d: expected NCHW input and FCkk weight, got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  if (w.extent(2) != w.extent(3)) throw ShapeError("conv2d: non-square kernel " + shape_str(w.shape()));
  if (x.extent(1) != w.extent(1)) {
    throw ShapeError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), wi = x.extent(3);
  const int64_t f = w.extent(0), k = w.extent(2);
  std::optional<Tensor<T>> bias;
  if (bias_in) {
    if (bias_in->shape() != Shape{f}) {
      throw ShapeError("conv2d: bias shape " + shape_str(bias_in->shape()) + " for " +
                       std::to_string(f) + " filters");
    }
    bias = *bias_in;
  }
  const int64_t oh = conv_out_extent(h, k, stride, padding);
  const int64_t ow = conv_out_extent(wi, k, stride, padding);
  const int64_t p = oh * ow, ckk = c * k * k;
  const bool pointwise = (k == 1 && stride == 1 && padding == 0);

  Tensor<T> out({n, f, oh, ow});
  {
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* od = out.data_mut().data();
    std::vector<T> col(pointwise ? 0 : static_cast<size_t>(ckk * p));
    for (int64_t ni = 0; ni < n; ++ni) {
      const T* xn = xd + ni * c * h * wi;
      T* on = od + ni * f * p;
      if (pointwise) {
        gemm_nn(wd, xn, on, f, p, c, false);
      } else {
        im2col(xn, c, h, wi, k, stride, padding, oh, ow, col.data());
        gemm_nn(wd, col.data(), on, f, p, ckk, false);
      }
      if (bias) add_channel_bias(on, bias->data().data(), f, p);
    }
  }

  const bool wanted = bias ? grad_wanted<T>({&x, &w, &*bias}) : grad_wanted<T>({&x, &w});
  mark_and_record(out, wanted,
                  [x, w, bias, out, n, c, h, wi, f, k, stride, padding, oh, ow, p, ckk,
                   pointwise]() {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    const bool wx = x.requires_grad(), ww = w.requires_grad();
    const bool wb = bias && bias->requires_grad();
    T* gx = wx ? x.grad_mut().data() : nullptr;
    T* gw = ww ? w.grad_mut().data() : nullptr;
    T* gb = wb ? bias->grad_mut().data() : nullptr;
    std::vector<T> col(pointwise ? 0 : static_cast<size_t>(ckk * p));
    std::vector<T> gcol(pointwise ? 0 : static_cast<size_t>(ckk * p));
    for (int64_t ni = 0; ni < n; ++ni) {
      const T* xn = xd + ni * c * h * wi;
      const T* gn = g + ni * f * p;
      if (!pointwise && (ww || wx)) im2col(xn, c, h, wi, k, stride, padding, oh, ow, col.data());
      if (ww) {
        gemm_nt(gn, pointwise ? xn : col.data(), gw, f, ckk, p, true);
      }
      if (wx) {
        if (pointwise) {
          gemm_tn(wd, gn, gx + ni * c * h * wi, c, p, f, true);
        } else {
          gemm_tn(wd, gn, gcol.data(), ckk, p, f, false);
          col2im(gcol.data(), c, h, wi, k, stride, padding, oh, ow, gx + ni * c * h * wi);
        }
      }
      if (wb) {
        for (int64_t fi = 0; fi < f; ++fi) {
          T acc = T(0);
          const T* row = gn + fi * p;
          for (int64_t i = 0; i < p; ++i) acc += row[i];
          gb[fi] += acc;
        }
      }
    }
  });
  debug_check_finite(out, "conv2d");
  return out;
}

// Transposed convolution, the adjoint of conv2d with the same weight tensor
// interpreted as [C_in, C_out, k, k]. Stride 2 only (the 2x upsampling the
// decoder needs): output extent = (in-1)*2 - 2*padding + k.
template <typename T>
Tensor<T> conv_transpose2d_impl(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias_in,
                                int64_t stride, int64_t padding) {
  if (stride != 2) throw ConfigError("conv_transpose2d: unsupported stride " + std::to_string(stride));
  if (x.rank() != 4 || w.rank() != 4 || w.extent(2) != w.extent(3)) {
    throw ShapeError("conv_transpose2d: expected NCHW input and [Cin,Cout,k,k] weight, got " +
                     shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (x.extent(1) != w.extent(0)) {
    throw ShapeError("conv_transpose2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  const int64_t n = x.extent(0), cin = x.extent(1), h = x.extent(2), wi = x.extent(3);
  const int64_t cout = w.extent(1), k = w.extent(2);
  const int64_t oh = (h - 1) * stride - 2 * padding + k;
  const int64_t ow = (wi - 1) * stride - 2 * padding + k;
  if (oh < 1 || ow < 1) throw ConfigError("conv_transpose2d: empty output");
  std::optional<Tensor<T>> bias;
  if (bias_in) {
    if (bias_in->shape() != Shape{cout}) {
      throw ShapeError("conv_transpose2d: bias shape " + shape_str(bias_in->shape()));
    }
    bias = *bias_in;
  }
  const int64_t p = h * wi, ckk = cout * k * k;

  Tensor<T> out({n, cout, oh, ow});
  {
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    T* od = out.data_mut().data();
    std::vector<T> col(static_cast<size_t>(ckk * p));
    for (int64_t ni = 0; ni < n; ++ni) {
      gemm_tn(wd, xd + ni * cin * p, col.data(), ckk, p, cin, false);
      T* on = od + ni * cout * oh * ow;
      col2im(col.data(), cout, oh, ow, k, stride, padding, h, wi, on);
      if (bias) add_channel_bias(on, bias->data().data(), cout, oh * ow);
    }
  }

  const bool wanted = bias ? grad_wanted<T>({&x, &w, &*bias}) : grad_wanted<T>({&x, &w});
  mark_and_record(out, wanted,
                  [x, w, bias, out, n, cin, h, wi, cout, k, stride, padding, oh, ow, p, ckk]() {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    const T* xd = x.data().data();
    const T* wd = w.data().data();
    const bool wx = x.requires_grad(), ww = w.requires_grad();
    const bool wb = bias && bias->requires_grad();
    T* gx = wx ? x.grad_mut().data() : nullptr;
    T* gw = ww ? w.grad_mut().data() : nullptr;
    T* gb = wb ? bias->grad_mut().data() : nullptr;
    std::vector<T> gcol(static_cast<size_t>(ckk * p));
    for (int64_t ni = 0; ni < n; ++ni) {
      const T* gn = g + ni * cout * oh * ow;
      if (wx || ww) im2col(gn, cout, oh, ow, k, stride, padding, h, wi, gcol.data());
      if (wx) gemm_nn(wd, gcol.data(), gx + ni * cin * p, cin, p, ckk, true);
      if (ww) gemm_nt(xd + ni * cin * p, gcol.data(), gw, cin, ckk, p, true);
      if (wb) {
        for (int64_t co = 0; co < cout; ++co) {
          T acc = T(0);
          const T* row = gn + co * oh * ow;
          for (int64_t i = 0; i < oh * ow; ++i) acc += row[i];
          gb[co] += acc;
        }
      }
    }
  });
  debug_check_finite(out, "conv_transpose2d");
  return out;
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride = 1, int64_t padding = 0) {
  return detail::conv2d_impl<T>(x, w, nullptr, stride, padding);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride = 1, int64_t padding = 0) {
  return detail::conv2d_impl(x, w, &bias, stride, padding);
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride = 2,
                           int64_t padding = 0) {
  return detail::conv_transpose2d_impl<T>(x, w, nullptr, stride, padding);
}

template <typename T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                           int64_t stride = 2, int64_t padding = 0) {
  return detail::conv_transpose2d_impl(x, w, &bias, stride, padding);
}

// Depthwise convolution with an odd square kernel [C,1,k,k], stride 1.
// Channel c of the output depends only on channel c of the input.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t padding = 1) {
  if (x.rank() != 4 || w.rank() != 4 || w.extent(1) != 1 || w.extent(2) != w.extent(3)) {
    throw ShapeError("depthwise_conv2d: expected NCHW and [C,1,k,k], got " + shape_str(x.shape()) +
                     " and " + shape_str(w.shape()));
  }
  if (x.extent(1) != w.extent(0)) {
    throw ShapeError("depthwise_conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(w.shape()));
  }
  const int64_t k = w.extent(2);
  if (k % 2 == 0) throw ConfigError("depthwise_conv2d: kernel must be odd, got " + std::to_string(k));
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), wi = x.extent(3);
  const int64_t oh = detail::conv_out_extent(h, k, 1, padding);
  const int64_t ow = detail::conv_out_extent(wi, k, 1, padding);

  Tensor<T> out({n, c, oh, ow});
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  T* od = out.data_mut().data();
  parallel_for(n * c, 1, [&](int64_t c0, int64_t c1) {
    for (int64_t nc = c0; nc < c1; ++nc) {
      const T* xc = xd + nc * h * wi;
      const T* wc = wd + (nc % c) * k * k;
      T* oc = od + nc * oh * ow;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          T acc = T(0);
          for (int64_t ky = 0; ky < k; ++ky) {
            const int64_t iy = oy + ky - padding;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < k; ++kx) {
              const int64_t ix = ox + kx - padding;
              if (ix < 0 || ix >= wi) continue;
              acc += wc[ky * k + kx] * xc[iy * wi + ix];
            }
          }
          oc[oy * ow + ox] = acc;
        }
      }
    }
  });
  detail::mark_and_record(out, detail::grad_wanted<T>({&x, &w}),
                          [x, w, out, n, c, h, wi, k, padding, oh, ow]() {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    const T* xd2 = x.data().data();
    const T* wd2 = w.data().data();
    if (x.requires_grad()) {
      T* gx = x.grad_mut().data();
      parallel_for(n * c, 1, [&](int64_t c0, int64_t c1) {
        for (int64_t nc = c0; nc < c1; ++nc) {
          const T* gc = g + nc * oh * ow;
          const T* wc = wd2 + (nc % c) * k * k;
          T* gxc = gx + nc * h * wi;
          for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
              const T gv = gc[oy * ow + ox];
              if (gv == T(0)) continue;
              for (int64_t ky = 0; ky < k; ++ky) {
                const int64_t iy = oy + ky - padding;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < k; ++kx) {
                  const int64_t ix = ox + kx - padding;
                  if (ix < 0 || ix >= wi) continue;
                  gxc[iy * wi + ix] += gv * wc[ky * k + kx];
                }
              }
            }
          }
        }
      });
    }
    if (w.requires_grad()) {
      T* gw = w.grad_mut().data();
      parallel_for(c, 1, [&](int64_t c0, int64_t c1) {
        for (int64_t ch = c0; ch < c1; ++ch) {
          T* gwc = gw + ch * k * k;
          for (int64_t ni = 0; ni < n; ++ni) {
            const T* gc = g + (ni * c + ch) * oh * ow;
            const T* xc = xd2 + (ni * c + ch) * h * wi;
            for (int64_t oy = 0; oy < oh; ++oy) {
              for (int64_t ox = 0; ox < ow; ++ox) {
                const T gv = gc[oy * ow + ox];
                if (gv == T(0)) continue;
                for (int64_t ky = 0; ky < k; ++ky) {
                  const int64_t iy = oy + ky - padding;
                  if (iy < 0 || iy >= h) continue;
                  for (int64_t kx = 0; kx < k; ++kx) {
                    const int64_t ix = ox + kx - padding;
                    if (ix < 0 || ix >= wi) continue;
                    gwc[ky * k + kx] += gv * xc[iy * wi + ix];
                  }
                }
              }
            }
          }
        }
      });
    }
  });
  debug_check_finite(out, "depthwise_conv2d");
  return out;
}

// Non-overlapping k x k average pooling.
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int64_t k = 2) {
  if (x.rank() != 4) throw ShapeError("avg_pool2d: expected NCHW, got " + shape_str(x.shape()));
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (h % k != 0 || w % k != 0) {
    throw ShapeError("avg_pool2d: spatial dims " + std::to_string(h) + "x" + std::to_string(w) +
                     " not divisible by " + std::to_string(k));
  }
  const int64_t oh = h / k, ow = w / k;
  const T inv = T(1) / static_cast<T>(k * k);
  Tensor<T> out({n, c, oh, ow});
  const T* xd = x.data().data();
  T* od = out.data_mut().data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* xc = xd + nc * h * w;
    T* oc = od + nc * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        T acc = T(0);
        for (int64_t ky = 0; ky < k; ++ky)
          for (int64_t kx = 0; kx < k; ++kx) acc += xc[(oy * k + ky) * w + ox * k + kx];
        oc[oy * ow + ox] = acc * inv;
      }
    }
  }
  detail::mark_and_record(out, detail::grad_wanted<T>({&x}),
                          [x, out, n, c, h, w, k, oh, ow, inv]() {
    if (!out.has_grad() || !x.requires_grad()) return;
    const T* g = out.grad().data();
    T* gx = x.grad_mut().data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const T* gc = g + nc * oh * ow;
      T* gxc = gx + nc * h * w;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          const T gv = gc[oy * ow + ox] * inv;
          for (int64_t ky = 0; ky < k; ++ky)
            for (int64_t kx = 0; kx < k; ++kx) gxc[(oy * k + ky) * w + ox * k + kx] += gv;
        }
      }
    }
  });
  return out;
}

// Reflection padding without edge duplication (index -1 maps to 1).
template <typename T>
Tensor<T> reflect_pad2d(const Tensor<T>& x, int64_t left, int64_t right, int64_t top,
                        int64_t bottom) {
  if (x.rank() != 4) throw ShapeError("reflect_pad2d: expected NCHW, got " + shape_str(x.shape()));
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (top >= h || bottom >= h || left >= w || right >= w || top < 0 || bottom < 0 || left < 0 ||
      right < 0) {
    throw ShapeError("reflect_pad2d: pads (" + std::to_string(left) + "," + std::to_string(right) +
                     "," + std::to_string(top) + "," + std::to_string(bottom) +
                     ") too large for " + shape_str(x.shape()));
  }
  const int64_t oh = h + top + bottom, ow = w + left + right;
  auto mirror = [](int64_t i, int64_t size) {
    if (i < 0) return -i;
    if (i >= size) return 2 * size - 2 - i;
    return i;
  };
  Tensor<T> out({n, c, oh, ow});
  const T* xd = x.data().data();
  T* od = out.data_mut().data();
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const T* xc = xd + nc * h * w;
    T* oc = od + nc * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy) {
      const int64_t iy = mirror(oy - top, h);
      for (int64_t ox = 0; ox < ow; ++ox) {
        oc[oy * ow + ox] = xc[iy * w + mirror(ox - left, w)];
      }
    }
  }
  detail::mark_and_record(out, detail::grad_wanted<T>({&x}),
                          [x, out, n, c, h, w, top, left, oh, ow, mirror]() {
    if (!out.has_grad() || !x.requires_grad()) return;
    const T* g = out.grad().data();
    T* gx = x.grad_mut().data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const T* gc = g + nc * oh * ow;
      T* gxc = gx + nc * h * w;
      for (int64_t oy = 0; oy < oh; ++oy) {
        const int64_t iy = mirror(oy - top, h);
        for (int64_t ox = 0; ox < ow; ++ox) {
          gxc[iy * w + mirror(ox - left, w)] += gc[oy * ow + ox];
        }
      }
    }
  });
  return out;
}

}  // namespace stripformer
