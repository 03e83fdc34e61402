// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "stripformer/kernels.hpp"
#include "stripformer/tensor.hpp"

namespace stripformer {

namespace detail {

template <typename T>
bool grad_wanted(std::initializer_list<const Tensor<T>*> inputs) {
  if (!active_tape<T>()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T, typename Fn>
void mark_and_record(Tensor<T>& out, bool wanted, Fn&& backward_fn) {
  if (!wanted) return;
  out.set_requires_grad(true);
  active_tape<T>()->record(std::forward<Fn>(backward_fn));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Sum in ascending value order. Independent of the order the summands
// arrive in, which makes attention reductions exactly equivariant under
// token permutations. Insertion sort beats introsort at strip lengths.
template <typename T>
T canonical_sum(std::vector<T>& buf) {
  const int64_t n = static_cast<int64_t>(buf.size());
  if (n <= 64) {
    T* v = buf.data();
    for (int64_t i = 1; i < n; ++i) {
      const T key = v[i];
      int64_t j = i - 1;
      while (j >= 0 && v[j] > key) {
        v[j + 1] = v[j];
        --j;
      }
      v[j + 1] = key;
    }
  } else {
    std::sort(buf.begin(), buf.end());
  }
  T acc = T(0);
  for (T v : buf) acc += v;
  return acc;
}

// Elementwise loop, spread over the pool for large tensors.
template <typename Fn>
void ew(int64_t n, Fn&& fn) {
  parallel_for(n, 1 << 15, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  detail::ew(out.numel(), [&](int64_t i) { od[i] = ad[i] + bd[i]; });
  detail::mark_and_record(out, detail::grad_wanted<T>({&a, &b}), [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      detail::ew(out.numel(), [&](int64_t i) { ga[i] += g[i]; });
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      detail::ew(out.numel(), [&](int64_t i) { gb[i] += g[i]; });
    }
  });
  debug_check_finite(out, "add");
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  detail::ew(out.numel(), [&](int64_t i) { od[i] = ad[i] - bd[i]; });
  detail::mark_and_record(out, detail::grad_wanted<T>({&a, &b}), [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      for (int64_t i = 0; i < out.numel(); ++i) gb[i] -= g[i];
    }
  });
  debug_check_finite(out, "sub");
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  detail::ew(out.numel(), [&](int64_t i) { od[i] = ad[i] * bd[i]; });
  detail::mark_and_record(out, detail::grad_wanted<T>({&a, &b}), [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto ad2 = a.data(), bd2 = b.data();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      detail::ew(out.numel(), [&](int64_t i) { ga[i] += g[i] * bd2[i]; });
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      detail::ew(out.numel(), [&](int64_t i) { gb[i] += g[i] * ad2[i]; });
    }
  });
  debug_check_finite(out, "mul");
  return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] / bd[i];
  detail::mark_and_record(out, detail::grad_wanted<T>({&a, &b}), [a, b, out]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    auto bd2 = b.data();
    auto yd = out.data();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i] / bd2[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      for (int64_t i = 0; i < out.numel(); ++i) gb[i] -= g[i] * yd[i] / bd2[i];
    }
  });
  debug_check_finite(out, "div");
  return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto od = out.data_mut();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] + c;
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto ga = a.grad_mut();
    for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
  });
  debug_check_finite(out, "add_scalar");
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto od = out.data_mut();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] = ad[i] * c;
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out, c]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto ga = a.grad_mut();
    for (int64_t i = 0; i < out.numel(); ++i) ga[i] += c * g[i];
  });
  debug_check_finite(out, "mul_scalar");
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto od = out.data_mut();
  detail::ew(out.numel(), [&](int64_t i) { od[i] = ad[i] > T(0) ? ad[i] : T(0); });
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto ad2 = a.data();
    auto ga = a.grad_mut();
    detail::ew(out.numel(), [&](int64_t i) {
      if (ad2[i] > T(0)) ga[i] += g[i];
    });
  });
  debug_check_finite(out, "relu");
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.7071067811865475244);
  constexpr T inv_sqrt2pi = T(0.3989422804014326779);
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto od = out.data_mut();
  detail::ew(out.numel(), [&](int64_t i) {
    const T x = ad[i];
    od[i] = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
  });
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out, inv_sqrt2,
                                                              inv_sqrt2pi]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto ad2 = a.data();
    auto ga = a.grad_mut();
    detail::ew(out.numel(), [&](int64_t i) {
      const T x = ad2[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      ga[i] += g[i] * (cdf + x * pdf);
    });
  });
  debug_check_finite(out, "gelu");
  return out;
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto od = out.data_mut();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] = std::abs(ad[i]);
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto ad2 = a.data();
    auto ga = a.grad_mut();
    for (int64_t i = 0; i < out.numel(); ++i) {
      if (ad2[i] > T(0)) ga[i] += g[i];
      else if (ad2[i] < T(0)) ga[i] -= g[i];
    }
  });
  debug_check_finite(out, "abs");
  return out;
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto ad = a.data();
  auto od = out.data_mut();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] = std::sqrt(ad[i]);
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto yd = out.data();
    auto ga = a.grad_mut();
    for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i] / (T(2) * yd[i]);
  });
  debug_check_finite(out, "sqrt");
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " (" +
                     std::to_string(a.numel()) + " elements) as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape));
  auto ad = a.data();
  std::copy(ad.begin(), ad.end(), out.data_mut().begin());
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto ga = a.grad_mut();
    for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
  });
  return out;
}

namespace detail {

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

// out[o] = in[index permuted by axes]; used forward and (with the inverse
// permutation) backward. The index decode runs once per output row; the
// innermost axis is a strided gather.
template <typename T>
void permute_copy(std::span<const T> in, const Shape& in_shape, std::span<T> out,
                  const std::vector<int>& axes, bool accumulate) {
  const int r = static_cast<int>(in_shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = in_shape[axes[i]];
  const auto in_strides = row_major_strides(in_shape);
  std::vector<int64_t> gather(r);
  for (int i = 0; i < r; ++i) gather[i] = in_strides[axes[i]];
  const int64_t n = numel_of(in_shape);
  const int64_t inner = r > 0 ? out_shape[r - 1] : 1;
  const int64_t inner_stride = r > 0 ? gather[r - 1] : 0;
  const T* ip = in.data();
  T* op = out.data();
  parallel_for(n / std::max<int64_t>(inner, 1), 256, [&](int64_t lo, int64_t hi) {
    for (int64_t row = lo; row < hi; ++row) {
      int64_t rem = row, src = 0;
      for (int i = r - 2; i >= 0; --i) {
        const int64_t c = rem % out_shape[i];
        rem /= out_shape[i];
        src += c * gather[i];
      }
      T* orow = op + row * inner;
      if (accumulate) {
        for (int64_t j = 0; j < inner; ++j) orow[j] += ip[src + j * inner_stride];
      } else {
        for (int64_t j = 0; j < inner; ++j) orow[j] = ip[src + j * inner_stride];
      }
    }
  });
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int> axes) {
  const int r = a.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw ShapeError("permute: axes size " + std::to_string(axes.size()) + " for rank " +
                     std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  for (int ax : axes) {
    if (ax < 0 || ax >= r || seen[ax]) throw ShapeError("permute: axes are not a bijection");
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = a.shape()[axes[i]];
  Tensor<T> out(out_shape);
  detail::permute_copy<T>(a.data(), a.shape(), out.data_mut(), axes, false);
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out, axes]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    std::vector<int> inverse(axes.size());
    for (size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = static_cast<int>(i);
    detail::permute_copy<T>(out.grad(), out.shape(), a.grad_mut(), inverse, true);
  });
  return out;
}

// Swap the two spatial axes of an NCHW tensor.
template <typename T>
Tensor<T> transpose_hw(const Tensor<T>& a) {
  if (a.rank() != 4) throw ShapeError("transpose_hw: expected rank 4, got " + shape_str(a.shape()));
  return permute(a, {0, 1, 3, 2});
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || a.rank() < 2) {
    throw ShapeError("concat_channels: ranks " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  for (int i = 0; i < a.rank(); ++i) {
    if (i != 1 && a.shape()[i] != b.shape()[i]) {
      throw ShapeError("concat_channels: shape mismatch " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[1] = a.extent(1) + b.extent(1);
  Tensor<T> out(out_shape);
  const int64_t outer = a.extent(0);
  const int64_t inner = a.numel() / (outer * a.extent(1));
  const int64_t ca = a.extent(1), cb = b.extent(1);
  auto ad = a.data(), bd = b.data();
  auto od = out.data_mut();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(ad.data() + o * ca * inner, ca * inner, od.data() + o * (ca + cb) * inner);
    std::copy_n(bd.data() + o * cb * inner, cb * inner, od.data() + (o * (ca + cb) + ca) * inner);
  }
  detail::mark_and_record(out, detail::grad_wanted<T>({&a, &b}),
                          [a, b, out, outer, inner, ca, cb]() mutable {
    if (!out.has_grad()) return;
    auto g = out.grad();
    if (a.requires_grad()) {
      auto ga = a.grad_mut();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < ca * inner; ++i) ga[o * ca * inner + i] += g[o * (ca + cb) * inner + i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_mut();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < cb * inner; ++i)
          gb[o * cb * inner + i] += g[(o * (ca + cb) + ca) * inner + i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int64_t c0, int64_t c1) {
  if (a.rank() < 2 || c0 < 0 || c1 <= c0 || c1 > a.extent(1)) {
    throw ShapeError("slice_channels: [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") of " + shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[1] = c1 - c0;
  Tensor<T> out(out_shape);
  const int64_t outer = a.extent(0);
  const int64_t inner = a.numel() / (outer * a.extent(1));
  const int64_t c = a.extent(1), cs = c1 - c0;
  auto ad = a.data();
  auto od = out.data_mut();
  for (int64_t o = 0; o < outer; ++o) {
    std::copy_n(ad.data() + (o * c + c0) * inner, cs * inner, od.data() + o * cs * inner);
  }
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}),
                          [a, out, outer, inner, c, c0, cs]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    auto g = out.grad();
    auto ga = a.grad_mut();
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t i = 0; i < cs * inner; ++i) ga[(o * c + c0) * inner + i] += g[o * cs * inner + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const T g = out.grad()[0];
    auto ga = a.grad_mut();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
  });
  debug_check_finite(out, "sum_all");
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  const T inv_n = T(1) / static_cast<T>(a.numel());
  Tensor<T> out = Tensor<T>::scalar(acc * inv_n);
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out, inv_n]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const T g = out.grad()[0] * inv_n;
    auto ga = a.grad_mut();
    for (int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
  });
  debug_check_finite(out, "mean_all");
  return out;
}

// ---------------------------------------------------------------------------
// Matrix products

namespace detail {

struct BatchedDims {
  int64_t batch, m, k, n;
};

template <typename T>
BatchedDims matmul_dims(const Tensor<T>& a, const Tensor<T>& b, bool b_transposed,
                        const char* op) {
  if (a.rank() < 2 || b.rank() != a.rank()) {
    throw ShapeError(std::string(op) + ": ranks " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  const int r = a.rank();
  int64_t batch = 1;
  for (int i = 0; i < r - 2; ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw ShapeError(std::string(op) + ": batch extents disagree " + shape_str(a.shape()) +
                       " vs " + shape_str(b.shape()));
    }
    batch *= a.shape()[i];
  }
  const int64_t m = a.shape()[r - 2], ka = a.shape()[r - 1];
  const int64_t kb = b_transposed ? b.shape()[r - 1] : b.shape()[r - 2];
  const int64_t n = b_transposed ? b.shape()[r - 2] : b.shape()[r - 1];
  if (ka != kb) {
    throw ShapeError(std::string(op) + ": inner extents disagree " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  return {batch, m, ka, n};
}

}  // namespace detail

// Batched contraction: [..., M, K] x [..., K, N] -> [..., M, N].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto d = detail::matmul_dims(a, b, false, "matmul");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(d.n);
  Tensor<T> out(out_shape);
  detail::bgemm_nn(a.data().data(), b.data().data(), out.data_mut().data(), d.batch, d.m, d.n, d.k,
                   false);
  detail::mark_and_record(out, detail::grad_wanted<T>({&a, &b}), [a, b, out, d]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      detail::bgemm_nt(g, b.data().data(), a.grad_mut().data(), d.batch, d.m, d.k, d.n, true);
    }
    if (b.requires_grad()) {
      detail::bgemm_tn(a.data().data(), g, b.grad_mut().data(), d.batch, d.k, d.n, d.m, true);
    }
  });
  debug_check_finite(out, "matmul");
  return out;
}

// [..., M, K] x [..., N, K]^T -> [..., M, N]; avoids materializing the
// transposed key matrix in attention.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const auto d = detail::matmul_dims(a, b, true, "matmul_nt");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(d.n);
  Tensor<T> out(out_shape);
  detail::bgemm_nt(a.data().data(), b.data().data(), out.data_mut().data(), d.batch, d.m, d.n, d.k,
                   false);
  detail::mark_and_record(out, detail::grad_wanted<T>({&a, &b}), [a, b, out, d]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    if (a.requires_grad()) {
      detail::bgemm_nn(g, b.data().data(), a.grad_mut().data(), d.batch, d.m, d.k, d.n, true);
    }
    if (b.requires_grad()) {
      detail::bgemm_tn(g, a.data().data(), b.grad_mut().data(), d.batch, d.n, d.k, d.m, true);
    }
  });
  debug_check_finite(out, "matmul_nt");
  return out;
}

// Attention-weighted sum: [..., Tq, Tk] x [..., Tk, E] -> [..., Tq, E].
// The contraction over the token axis is summed in canonical (value-sorted)
// order so the result is exactly invariant to token reordering.
template <typename T>
Tensor<T> attend(const Tensor<T>& weights, const Tensor<T>& values) {
  const auto d = detail::matmul_dims(weights, values, false, "attend");
  Shape out_shape(weights.shape().begin(), weights.shape().end() - 1);
  out_shape.push_back(d.n);
  Tensor<T> out(out_shape);
  const T* w = weights.data().data();
  const T* v = values.data().data();
  T* o = out.data_mut().data();
  parallel_for(d.batch * d.m, 8, [&](int64_t r0, int64_t r1) {
    std::vector<T> buf(static_cast<size_t>(d.k));
    for (int64_t r = r0; r < r1; ++r) {
      const int64_t bi = r / d.m;
      const T* wrow = w + r * d.k;
      const T* vb = v + bi * d.k * d.n;
      T* orow = o + r * d.n;
      for (int64_t e = 0; e < d.n; ++e) {
        for (int64_t t = 0; t < d.k; ++t) buf[t] = wrow[t] * vb[t * d.n + e];
        orow[e] = detail::canonical_sum(buf);
      }
    }
  });
  detail::mark_and_record(out, detail::grad_wanted<T>({&weights, &values}),
                          [weights, values, out, d]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    if (weights.requires_grad()) {
      detail::bgemm_nt(g, values.data().data(), weights.grad_mut().data(), d.batch, d.m, d.k, d.n,
                       true);
    }
    if (values.requires_grad()) {
      detail::bgemm_tn(weights.data().data(), g, values.grad_mut().data(), d.batch, d.k, d.n, d.m,
                       true);
    }
  });
  debug_check_finite(out, "attend");
  return out;
}

// ---------------------------------------------------------------------------
// Softmax over the last axis, max-subtracted, denominator summed in
// canonical order.

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& a) {
  if (a.rank() < 1 || a.extent(a.rank() - 1) < 1) {
    throw ShapeError("softmax_lastdim: empty last axis in " + shape_str(a.shape()));
  }
  const int64_t width = a.extent(a.rank() - 1);
  const int64_t rows = a.numel() / width;
  Tensor<T> out(a.shape());
  const T* x = a.data().data();
  T* y = out.data_mut().data();
  parallel_for(rows, 32, [&](int64_t r0, int64_t r1) {
    std::vector<T> buf(static_cast<size_t>(width));
    for (int64_t r = r0; r < r1; ++r) {
      const T* xr = x + r * width;
      T* yr = y + r * width;
      T mx = xr[0];
      for (int64_t i = 1; i < width; ++i) mx = std::max(mx, xr[i]);
      for (int64_t i = 0; i < width; ++i) {
        yr[i] = std::exp(xr[i] - mx);
        buf[i] = yr[i];
      }
      const T denom = detail::canonical_sum(buf);
      for (int64_t i = 0; i < width; ++i) yr[i] /= denom;
    }
  });
  detail::mark_and_record(out, detail::grad_wanted<T>({&a}), [a, out, rows, width]() mutable {
    if (!out.has_grad() || !a.requires_grad()) return;
    const T* g = out.grad().data();
    const T* y2 = out.data().data();
    T* ga = a.grad_mut().data();
    parallel_for(rows, 32, [&](int64_t r0, int64_t r1) {
      for (int64_t r = r0; r < r1; ++r) {
        const T* gr = g + r * width;
        const T* yr = y2 + r * width;
        T dot = T(0);
        for (int64_t i = 0; i < width; ++i) dot += gr[i] * yr[i];
        T* gar = ga + r * width;
        for (int64_t i = 0; i < width; ++i) gar[i] += yr[i] * (gr[i] - dot);
      }
    });
  });
  debug_check_finite(out, "softmax_lastdim");
  return out;
}

// ---------------------------------------------------------------------------
// LayerNorm over the channel axis of an NCHW tensor: each spatial position's
// channel vector is normalized to zero mean / unit variance (eps inside the
// square root), then scaled and shifted per channel.

template <typename T>
Tensor<T> layernorm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps = T(1e-5)) {
  if (x.rank() != 4) throw ShapeError("layernorm: expected NCHW, got " + shape_str(x.shape()));
  const int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (c < 2) throw ShapeError("layernorm: needs at least 2 channels, got " + std::to_string(c));
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layernorm: affine params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " for " + std::to_string(c) + " channels");
  }
  Tensor<T> out(x.shape());
  const int64_t hw = h * w;
  const T* xd = x.data().data();
  const T* gd = gamma.data().data();
  const T* bd = beta.data().data();
  T* od = out.data_mut().data();
  const T inv_c = T(1) / static_cast<T>(c);
  parallel_for(n * hw, 256, [&](int64_t p0, int64_t p1) {
    for (int64_t p = p0; p < p1; ++p) {
      const int64_t ni = p / hw, s = p % hw;
      const T* base = xd + ni * c * hw + s;
      T mean = T(0);
      for (int64_t ch = 0; ch < c; ++ch) mean += base[ch * hw];
      mean *= inv_c;
      T var = T(0);
      for (int64_t ch = 0; ch < c; ++ch) {
        const T d = base[ch * hw] - mean;
        var += d * d;
      }
      var *= inv_c;
      const T inv_std = T(1) / std::sqrt(var + eps);
      T* obase = od + ni * c * hw + s;
      for (int64_t ch = 0; ch < c; ++ch) {
        obase[ch * hw] = gd[ch] * (base[ch * hw] - mean) * inv_std + bd[ch];
      }
    }
  });
  detail::mark_and_record(out, detail::grad_wanted<T>({&x, &gamma, &beta}),
                          [x, gamma, beta, out, n, c, hw, eps, inv_c]() mutable {
    if (!out.has_grad()) return;
    const T* g = out.grad().data();
    const T* xd2 = x.data().data();
    const T* gd2 = gamma.data().data();
    const bool wx = x.requires_grad(), wg = gamma.requires_grad(), wb = beta.requires_grad();
    T* gx = wx ? x.grad_mut().data() : nullptr;
    T* gg = wg ? gamma.grad_mut().data() : nullptr;
    T* gb = wb ? beta.grad_mut().data() : nullptr;
    // gamma/beta grads reduce over positions; keep that serial and exact.
    for (int64_t ni = 0; ni < n; ++ni) {
      for (int64_t s = 0; s < hw; ++s) {
        const T* base = xd2 + ni * c * hw + s;
        const T* gbase = g + ni * c * hw + s;
        T mean = T(0);
        for (int64_t ch = 0; ch < c; ++ch) mean += base[ch * hw];
        mean *= inv_c;
        T var = T(0);
        for (int64_t ch = 0; ch < c; ++ch) {
          const T d = base[ch * hw] - mean;
          var += d * d;
        }
        var *= inv_c;
        const T inv_std = T(1) / std::sqrt(var + eps);
        T mean_gh = T(0), mean_ghx = T(0);
        for (int64_t ch = 0; ch < c; ++ch) {
          const T xhat = (base[ch * hw] - mean) * inv_std;
          const T gh = gbase[ch * hw] * gd2[ch];
          mean_gh += gh;
          mean_ghx += gh * xhat;
          if (gg) gg[ch] += gbase[ch * hw] * xhat;
          if (gb) gb[ch] += gbase[ch * hw];
        }
        mean_gh *= inv_c;
        mean_ghx *= inv_c;
        if (gx) {
          T* gxbase = gx + ni * c * hw + s;
          for (int64_t ch = 0; ch < c; ++ch) {
            const T xhat = (base[ch * hw] - mean) * inv_std;
            const T gh = gbase[ch * hw] * gd2[ch];
            gxbase[ch * hw] += inv_std * (gh - mean_gh - xhat * mean_ghx);
          }
        }
      }
    }
  });
  debug_check_finite(out, "layernorm");
  return out;
}

}  // namespace stripformer
