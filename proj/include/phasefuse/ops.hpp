#pragma once

// The closed op set used by the restoration network and its loss. Spatial
// tensors use the layout [batch, channels, d, h, w]. Every op writes its own
// backward rule; there is no broadcasting.

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "phasefuse/error.hpp"
#include "phasefuse/interp.hpp"
#include "phasefuse/tensor.hpp"

namespace phasefuse {

namespace detail {

template <class T>
using row_matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using mat_map = Eigen::Map<row_matrix<T>>;
template <class T>
using cmat_map = Eigen::Map<const row_matrix<T>>;

inline void require_5d(const shape_t& s, const char* op) {
  require(s.size() == 5, std::string(op) + ": expected [b,c,d,h,w] tensor, got " + shape_str(s));
}

/// Reusable per-thread buffer; contents are unspecified on return.
template <class T>
T* scratch(std::size_t slot, std::size_t n) {
  thread_local std::array<aligned_vector<T>, 2> bufs;
  auto& b = bufs.at(slot);
  if (b.size() < n) b.resize(n);
  return b.data();
}

struct conv_geom {
  std::size_t ci, d, h, w, kz, ky, kx;
  std::size_t positions() const { return d * h * w; }
  std::size_t rows() const { return ci * kz * ky * kx; }
};

/// Unfolds zero-padded ("same") neighbourhoods into a [ci*kz*ky*kx, d*h*w] matrix.
template <class T>
void im2col(const T* x, const conv_geom& g, T* col) {
  const std::size_t P = g.positions();
  const auto pz = static_cast<std::ptrdiff_t>(g.kz / 2), py = static_cast<std::ptrdiff_t>(g.ky / 2),
             px = static_cast<std::ptrdiff_t>(g.kx / 2);
  const auto D = static_cast<std::ptrdiff_t>(g.d), H = static_cast<std::ptrdiff_t>(g.h),
             W = static_cast<std::ptrdiff_t>(g.w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::ptrdiff_t dz = 0; dz < static_cast<std::ptrdiff_t>(g.kz); ++dz)
      for (std::ptrdiff_t dy = 0; dy < static_cast<std::ptrdiff_t>(g.ky); ++dy)
        for (std::ptrdiff_t dx = 0; dx < static_cast<std::ptrdiff_t>(g.kx); ++dx, ++row) {
          T* dst = col + row * P;
          const T* src = x + c * P;
          const std::ptrdiff_t oz = dz - pz, oy = dy - py, ox = dx - px;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -ox), x1 = std::min(W, W - ox);
          for (std::ptrdiff_t z = 0; z < D; ++z) {
            const std::ptrdiff_t sz = z + oz;
            for (std::ptrdiff_t y = 0; y < H; ++y, dst += W) {
              const std::ptrdiff_t sy = y + oy;
              if (sz < 0 || sz >= D || sy < 0 || sy >= H || x0 >= x1) {
                for (std::ptrdiff_t i = 0; i < W; ++i) dst[i] = T{0};
                continue;
              }
              const T* s = src + (sz * H + sy) * W + ox;
              for (std::ptrdiff_t i = 0; i < x0; ++i) dst[i] = T{0};
              for (std::ptrdiff_t i = x0; i < x1; ++i) dst[i] = s[i];
              for (std::ptrdiff_t i = x1; i < W; ++i) dst[i] = T{0};
            }
          }
        }
}

/// Adjoint of im2col: folds column gradients back onto the input, accumulating.
template <class T>
void col2im_add(const T* col, const conv_geom& g, T* x) {
  const std::size_t P = g.positions();
  const auto pz = static_cast<std::ptrdiff_t>(g.kz / 2), py = static_cast<std::ptrdiff_t>(g.ky / 2),
             px = static_cast<std::ptrdiff_t>(g.kx / 2);
  const auto D = static_cast<std::ptrdiff_t>(g.d), H = static_cast<std::ptrdiff_t>(g.h),
             W = static_cast<std::ptrdiff_t>(g.w);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.ci; ++c)
    for (std::ptrdiff_t dz = 0; dz < static_cast<std::ptrdiff_t>(g.kz); ++dz)
      for (std::ptrdiff_t dy = 0; dy < static_cast<std::ptrdiff_t>(g.ky); ++dy)
        for (std::ptrdiff_t dx = 0; dx < static_cast<std::ptrdiff_t>(g.kx); ++dx, ++row) {
          const T* src = col + row * P;
          T* dst = x + c * P;
          const std::ptrdiff_t oz = dz - pz, oy = dy - py, ox = dx - px;
          const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -ox), x1 = std::min(W, W - ox);
          for (std::ptrdiff_t z = 0; z < D; ++z) {
            const std::ptrdiff_t sz = z + oz;
            for (std::ptrdiff_t y = 0; y < H; ++y, src += W) {
              const std::ptrdiff_t sy = y + oy;
              if (sz < 0 || sz >= D || sy < 0 || sy >= H) continue;
              T* d = dst + (sz * H + sy) * W + ox;
              for (std::ptrdiff_t i = x0; i < x1; ++i) d[i] += src[i];
            }
          }
        }
}

}  // namespace detail

/// Stride-1 cross-correlation with zero "same" padding of k/2 per axis.
/// `bias` may be an undefined tensor.
template <class T>
tensor<T> conv3d(const tensor<T>& x, const tensor<T>& weight, const tensor<T>& bias = {}) {
  detail::require_5d(x.shape(), "conv3d");
  detail::require(weight.ndim() == 5, "conv3d: weight must be [co,ci,kz,ky,kx], got " + shape_str(weight.shape()));
  const std::size_t b = x.dim(0), co = weight.dim(0);
  const detail::conv_geom g{x.dim(1), x.dim(2), x.dim(3), x.dim(4), weight.dim(2), weight.dim(3), weight.dim(4)};
  detail::require(weight.dim(1) == g.ci, "conv3d: weight expects " + std::to_string(weight.dim(1)) +
                                             " input channels, input has " + std::to_string(g.ci));
  detail::require(g.kz % 2 == 1 && g.ky % 2 == 1 && g.kx % 2 == 1, "conv3d: kernel extents must be odd");
  const bool has_bias = bias.defined();
  if (has_bias)
    detail::require(bias.ndim() == 1 && bias.dim(0) == co, "conv3d: bias must be [" + std::to_string(co) + "]");
  const std::size_t P = g.positions(), K = g.rows();
  const bool pointwise = g.kz == 1 && g.ky == 1 && g.kx == 1;

  tensor<T> out({b, co, g.d, g.h, g.w});
  T* col = pointwise ? nullptr : detail::scratch<T>(0, K * P);
  detail::cmat_map<T> W(weight.data().data(), co, K);
  for (std::size_t n = 0; n < b; ++n) {
    const T* xn = x.data().data() + n * g.ci * P;
    if (!pointwise) detail::im2col(xn, g, col);
    detail::cmat_map<T> C(pointwise ? xn : col, K, P);
    detail::mat_map<T> Y(out.data().data() + n * co * P, co, P);
    Y.noalias() = W * C;
    if (has_bias)
      for (std::size_t c = 0; c < co; ++c) Y.row(c).array() += bias.data()[c];
  }

  std::vector<tensor<T>> inputs{x, weight};
  if (has_bias) inputs.push_back(bias);
  return detail::record(std::move(out), std::move(inputs),
                        [x, weight, bias, g, b, co, P, K, pointwise](std::span<const T> gout) mutable {
                          T* col = pointwise ? nullptr : detail::scratch<T>(0, K * P);
                          T* gcol = pointwise ? nullptr : detail::scratch<T>(1, K * P);
                          detail::cmat_map<T> W(weight.data().data(), co, K);
                          aligned_vector<T> gw(co * K, T{0}), gb(co, T{0});
                          detail::mat_map<T> GW(gw.data(), co, K);
                          aligned_vector<T> gx;
                          if (x.requires_grad()) gx.assign(x.numel(), T{0});
                          for (std::size_t n = 0; n < b; ++n) {
                            const T* xn = x.data().data() + n * g.ci * P;
                            detail::cmat_map<T> G(gout.data() + n * co * P, co, P);
                            if (weight.requires_grad()) {
                              if (!pointwise) detail::im2col(xn, g, col);
                              detail::cmat_map<T> C(pointwise ? xn : col, K, P);
                              GW.noalias() += G * C.transpose();
                            }
                            if (bias.defined() && bias.requires_grad())
                              for (std::size_t c = 0; c < co; ++c) gb[c] += G.row(c).sum();
                            if (x.requires_grad()) {
                              T* gxn = gx.data() + n * g.ci * P;
                              if (pointwise) {
                                detail::mat_map<T> GX(gxn, K, P);
                                GX.noalias() += W.transpose() * G;
                              } else {
                                detail::mat_map<T> GC(gcol, K, P);
                                GC.noalias() = W.transpose() * G;
                                detail::col2im_add(gcol, g, gxn);
                              }
                            }
                          }
                          if (x.requires_grad()) detail::accumulate<T>(x, gx);
                          if (weight.requires_grad()) detail::accumulate<T>(weight, gw);
                          if (bias.defined() && bias.requires_grad()) detail::accumulate<T>(bias, gb);
                        });
}

/// y = x for x >= 0, slope * x otherwise. The derivative at 0 is taken as 1.
template <class T>
tensor<T> leaky_relu(const tensor<T>& x, T slope = T(0.2)) {
  tensor<T> out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] >= T{0} ? in[i] : slope * in[i];
  if (auto* log = detail::branch_log())
    for (T v : in) log->push_back(v >= T{0});
  return detail::record(std::move(out), {x}, [x, slope](std::span<const T> g) mutable {
    auto in = x.data();
    auto gx = x.grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += in[i] >= T{0} ? g[i] : slope * g[i];
  });
}

template <class T>
tensor<T> add(const tensor<T>& a, const tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  return detail::record(std::move(out), {a, b}, [a, b](std::span<const T> g) mutable {
    detail::accumulate(a, g);
    detail::accumulate(b, g);
  });
}

/// Elementwise product.
template <class T>
tensor<T> mul(const tensor<T>& a, const tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  return detail::record(std::move(out), {a, b}, [a, b](std::span<const T> g) mutable {
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b.data()[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a.data()[i];
    }
  });
}

template <class T>
tensor<T> scale(const tensor<T>& a, T s) {
  tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = s * a.data()[i];
  return detail::record(std::move(out), {a}, [a, s](std::span<const T> g) mutable {
    auto ga = a.grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
  });
}

/// Sum of all elements as a [1] tensor.
template <class T>
tensor<T> sum(const tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += static_cast<double>(v);
  tensor<T> out({1}, static_cast<T>(acc));
  return detail::record(std::move(out), {a}, [a](std::span<const T> g) mutable {
    auto ga = a.grad();
    for (auto& v : ga) v += g[0];
  });
}

/// mean |a - b|. Subgradient at a tie is 0. Logs the sign of each difference
/// when a branch log is active.
template <class T>
tensor<T> l1_loss(const tensor<T>& a, const tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "l1_loss: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double acc = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += std::fabs(static_cast<double>(a.data()[i]) - b.data()[i]);
  if (auto* log = detail::branch_log())
    for (std::size_t i = 0; i < a.numel(); ++i) log->push_back(static_cast<std::uint8_t>(1 + (a.data()[i] > b.data()[i]) - (a.data()[i] < b.data()[i])));
  const double n = static_cast<double>(a.numel());
  tensor<T> out({1}, static_cast<T>(acc / n));
  return detail::record(std::move(out), {a, b}, [a, b, n](std::span<const T> g) mutable {
    const T step = static_cast<T>(static_cast<double>(g[0]) / n);
    auto sgn = [](T d) { return d > T{0} ? T{1} : (d < T{0} ? T{-1} : T{0}); };
    if (a.requires_grad()) {
      auto ga = a.grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += step * sgn(a.data()[i] - b.data()[i]);
    }
    if (b.requires_grad()) {
      auto gb = b.grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= step * sgn(a.data()[i] - b.data()[i]);
    }
  });
}

/// Stacks inputs along dim 1; all other extents must agree.
template <class T>
tensor<T> concat_channels(const std::vector<tensor<T>>& xs) {
  detail::require(!xs.empty(), "concat_channels: no inputs");
  const shape_t& s0 = xs[0].shape();
  detail::require(s0.size() >= 2, "concat_channels: inputs need a channel dim");
  std::size_t channels = 0;
  for (const auto& t : xs) {
    shape_t a = t.shape(), b = s0;
    detail::require(a.size() == b.size(), "concat_channels: rank mismatch");
    a[1] = b[1] = 0;
    detail::require(a == b, "concat_channels: non-channel dims differ: " + shape_str(t.shape()) + " vs " + shape_str(s0));
    channels += t.dim(1);
  }
  const std::size_t batch = s0[0];
  const std::size_t inner = shape_numel(s0) / (s0[0] * s0[1]);
  shape_t os = s0;
  os[1] = channels;
  tensor<T> out(os);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& t : xs) {
    offsets.push_back(off);
    const std::size_t block = t.dim(1) * inner;
    for (std::size_t n = 0; n < batch; ++n)
      std::copy_n(t.data().data() + n * block, block, out.data().data() + (n * channels + off) * inner);
    off += t.dim(1);
  }
  return detail::record(std::move(out), xs, [xs, offsets, batch, channels, inner](std::span<const T> g) mutable {
    for (std::size_t i = 0; i < xs.size(); ++i) {
      if (!xs[i].requires_grad()) continue;
      auto gx = xs[i].grad();
      const std::size_t block = xs[i].dim(1) * inner;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* src = g.data() + (n * channels + offsets[i]) * inner;
        T* dst = gx.data() + n * block;
        for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
      }
    }
  });
}

/// Channels [start, start + count) of x.
template <class T>
tensor<T> slice_channels(const tensor<T>& x, std::size_t start, std::size_t count) {
  detail::require(x.ndim() >= 2 && count > 0 && start + count <= x.dim(1), "slice_channels: range out of bounds");
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  const std::size_t inner = x.numel() / (batch * channels);
  shape_t os = x.shape();
  os[1] = count;
  tensor<T> out(os);
  for (std::size_t n = 0; n < batch; ++n)
    std::copy_n(x.data().data() + (n * channels + start) * inner, count * inner, out.data().data() + n * count * inner);
  return detail::record(std::move(out), {x}, [x, start, count, batch, channels, inner](std::span<const T> g) mutable {
    auto gx = x.grad();
    for (std::size_t n = 0; n < batch; ++n) {
      T* dst = gx.data() + (n * channels + start) * inner;
      const T* src = g.data() + n * count * inner;
      for (std::size_t j = 0; j < count * inner; ++j) dst[j] += src[j];
    }
  });
}

namespace detail {

/// Source flat index (in the [b, c*r^3, d, h, w] layout) for each output
/// element of a voxel shuffle. Channel c*r^3 + (iz*r + iy)*r + ix feeds output
/// voxel (z*r + iz, y*r + iy, x*r + ix) of channel c.
inline std::vector<std::size_t> shuffle_index(const shape_t& in, std::size_t r) {
  const std::size_t b = in[0], cin = in[1], d = in[2], h = in[3], w = in[4];
  const std::size_t c = cin / (r * r * r);
  std::vector<std::size_t> idx(b * cin * d * h * w);
  std::size_t n = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oz = 0; oz < d * r; ++oz)
        for (std::size_t oy = 0; oy < h * r; ++oy)
          for (std::size_t ox = 0; ox < w * r; ++ox) {
            const std::size_t ch = ci * r * r * r + ((oz % r) * r + (oy % r)) * r + (ox % r);
            idx[n++] = (((bi * cin + ch) * d + oz / r) * h + oy / r) * w + ox / r;
          }
  return idx;
}

template <class T>
tensor<T> gather_op(const tensor<T>& x, shape_t out_shape, std::vector<std::size_t> idx) {
  tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < idx.size(); ++i) out.data()[i] = x.data()[idx[i]];
  return record(std::move(out), {x}, [x, idx = std::move(idx)](std::span<const T> g) mutable {
    auto gx = x.grad();
    for (std::size_t i = 0; i < idx.size(); ++i) gx[idx[i]] += g[i];
  });
}

/// Gather with an injective index: backward is the exact inverse permutation.
template <class T>
tensor<T> scatter_op(const tensor<T>& x, shape_t out_shape, std::vector<std::size_t> idx) {
  tensor<T> out(std::move(out_shape));
  for (std::size_t i = 0; i < idx.size(); ++i) out.data()[idx[i]] = x.data()[i];
  return record(std::move(out), {x}, [x, idx = std::move(idx)](std::span<const T> g) mutable {
    auto gx = x.grad();
    for (std::size_t i = 0; i < idx.size(); ++i) gx[i] += g[idx[i]];
  });
}

}  // namespace detail

/// [b, c*r^3, d, h, w] -> [b, c, r*d, r*h, r*w].
template <class T>
tensor<T> voxel_shuffle(const tensor<T>& x, std::size_t r) {
  detail::require_5d(x.shape(), "voxel_shuffle");
  detail::require(r >= 1 && x.dim(1) % (r * r * r) == 0,
                  "voxel_shuffle: channels " + std::to_string(x.dim(1)) + " not divisible by r^3=" + std::to_string(r * r * r));
  shape_t os{x.dim(0), x.dim(1) / (r * r * r), x.dim(2) * r, x.dim(3) * r, x.dim(4) * r};
  return detail::gather_op(x, std::move(os), detail::shuffle_index(x.shape(), r));
}

/// Inverse of voxel_shuffle: [b, c, r*d, r*h, r*w] -> [b, c*r^3, d, h, w].
template <class T>
tensor<T> voxel_unshuffle(const tensor<T>& x, std::size_t r) {
  detail::require_5d(x.shape(), "voxel_unshuffle");
  detail::require(r >= 1 && x.dim(2) % r == 0 && x.dim(3) % r == 0 && x.dim(4) % r == 0,
                  "voxel_unshuffle: spatial dims not divisible by r");
  shape_t os{x.dim(0), x.dim(1) * r * r * r, x.dim(2) / r, x.dim(3) / r, x.dim(4) / r};
  auto idx = detail::shuffle_index(os, r);
  return detail::scatter_op(x, std::move(os), std::move(idx));
}

/// Every s-th voxel along each spatial axis, starting at 0.
template <class T>
tensor<T> subsample(const tensor<T>& x, std::size_t s) {
  detail::require_5d(x.shape(), "subsample");
  detail::require(s >= 1, "subsample: stride must be >= 1");
  const std::size_t b = x.dim(0), c = x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::size_t od = (d + s - 1) / s, oh = (h + s - 1) / s, ow = (w + s - 1) / s;
  std::vector<std::size_t> idx;
  idx.reserve(b * c * od * oh * ow);
  for (std::size_t n = 0; n < b * c; ++n)
    for (std::size_t z = 0; z < d; z += s)
      for (std::size_t y = 0; y < h; y += s)
        for (std::size_t xx = 0; xx < w; xx += s) idx.push_back(((n * d + z) * h + y) * w + xx);
  return detail::gather_op(x, {b, c, od, oh, ow}, std::move(idx));
}

/// Half-pixel trilinear resize of the spatial dims to `out_dims`.
template <class T>
tensor<T> trilinear_resize(const tensor<T>& x, const std::array<std::size_t, 3>& out_dims,
                           std::array<double, 3> inv_scale = {0, 0, 0}) {
  detail::require_5d(x.shape(), "trilinear_resize");
  const std::size_t bc = x.dim(0) * x.dim(1), d = x.dim(2), h = x.dim(3), w = x.dim(4);
  const std::array<std::size_t, 3> in_dims{d, h, w};
  for (int a = 0; a < 3; ++a) {
    detail::require(out_dims[a] >= 1, "trilinear_resize: output dims must be positive");
    if (inv_scale[a] <= 0.0) inv_scale[a] = static_cast<double>(in_dims[a]) / static_cast<double>(out_dims[a]);
  }
  const auto tz = detail::half_pixel_taps(d, out_dims[0], inv_scale[0]);
  const auto ty = detail::half_pixel_taps(h, out_dims[1], inv_scale[1]);
  const auto tx = detail::half_pixel_taps(w, out_dims[2], inv_scale[2]);
  const std::size_t in_block = d * h * w, out_block = out_dims[0] * out_dims[1] * out_dims[2];
  tensor<T> out({x.dim(0), x.dim(1), out_dims[0], out_dims[1], out_dims[2]});
  for (std::size_t n = 0; n < bc; ++n)
    detail::trilinear_gather(x.data().data() + n * in_block, h, w, out.data().data() + n * out_block, tz, ty, tx);
  return detail::record(std::move(out), {x}, [x, tz, ty, tx, bc, h, w, in_block, out_block](std::span<const T> g) mutable {
    auto gx = x.grad();
    for (std::size_t n = 0; n < bc; ++n)
      detail::trilinear_scatter(g.data() + n * out_block, h, w, gx.data() + n * in_block, tz, ty, tx);
  });
}

/// Spatial upsampling by an integer factor r (align-corners false).
template <class T>
tensor<T> trilinear_upsample(const tensor<T>& x, std::size_t r) {
  detail::require_5d(x.shape(), "trilinear_upsample");
  detail::require(r >= 1, "trilinear_upsample: factor must be >= 1");
  const double inv = 1.0 / static_cast<double>(r);
  return trilinear_resize(x, {x.dim(2) * r, x.dim(3) * r, x.dim(4) * r}, {inv, inv, inv});
}

namespace detail {

/// Row softmax of (Q^T K) / sqrt(c) for one batch item; Q, K are [c, P].
template <class T>
void attention_softmax(cmat_map<T> Q, cmat_map<T> K, mat_map<T> A) {
  const T inv = T(1) / std::sqrt(static_cast<T>(Q.rows()));
  A.noalias() = Q.transpose() * K;
  A *= inv;
  for (Eigen::Index q = 0; q < A.rows(); ++q) {
    auto row = A.row(q);
    const T m = row.maxCoeff();
    row = (row.array() - m).exp();
    row /= row.sum();
  }
}

}  // namespace detail

/// Dot-product attention over all spatial positions: for each query position
/// q, out[:, q] = sum_k softmax_k(<Q[:, q], K[:, k]> / sqrt(cq)) * V[:, k].
template <class T>
tensor<T> attention(const tensor<T>& query, const tensor<T>& key, const tensor<T>& value) {
  detail::require_5d(query.shape(), "attention");
  detail::require(key.shape() == query.shape(), "attention: key shape must equal query shape");
  detail::require(value.ndim() == 5 && value.dim(0) == query.dim(0) && value.dim(2) == query.dim(2) &&
                      value.dim(3) == query.dim(3) && value.dim(4) == query.dim(4),
                  "attention: value must share batch and spatial dims with query");
  const std::size_t b = query.dim(0), cq = query.dim(1), cv = value.dim(1);
  const std::size_t P = query.dim(2) * query.dim(3) * query.dim(4);
  auto weights = std::make_shared<aligned_vector<T>>(b * P * P);
  tensor<T> out(value.shape());
  for (std::size_t n = 0; n < b; ++n) {
    detail::cmat_map<T> Q(query.data().data() + n * cq * P, cq, P), K(key.data().data() + n * cq * P, cq, P);
    detail::cmat_map<T> V(value.data().data() + n * cv * P, cv, P);
    detail::mat_map<T> A(weights->data() + n * P * P, P, P);
    detail::attention_softmax<T>(Q, K, A);
    detail::mat_map<T> Y(out.data().data() + n * cv * P, cv, P);
    Y.noalias() = V * A.transpose();
  }
  return detail::record(std::move(out), {query, key, value},
                        [query, key, value, weights, b, cq, cv, P](std::span<const T> g) mutable {
                          const T inv = T(1) / std::sqrt(static_cast<T>(cq));
                          detail::row_matrix<T> dA(P, P);
                          for (std::size_t n = 0; n < b; ++n) {
                            detail::cmat_map<T> Q(query.data().data() + n * cq * P, cq, P);
                            detail::cmat_map<T> K(key.data().data() + n * cq * P, cq, P);
                            detail::cmat_map<T> V(value.data().data() + n * cv * P, cv, P);
                            detail::cmat_map<T> A(weights->data() + n * P * P, P, P);
                            detail::cmat_map<T> G(g.data() + n * cv * P, cv, P);
                            if (value.requires_grad()) {
                              detail::mat_map<T> GV(value.grad().data() + n * cv * P, cv, P);
                              GV.noalias() += G * A;
                            }
                            if (!query.requires_grad() && !key.requires_grad()) continue;
                            dA.noalias() = G.transpose() * V;
                            // dS = A * (dA - rowsum(A * dA)), reusing dA's storage.
                            for (Eigen::Index q = 0; q < dA.rows(); ++q) {
                              const T dot = (A.row(q).array() * dA.row(q).array()).sum();
                              dA.row(q) = (A.row(q).array() * (dA.row(q).array() - dot)) * inv;
                            }
                            if (query.requires_grad()) {
                              detail::mat_map<T> GQ(query.grad().data() + n * cq * P, cq, P);
                              GQ.noalias() += K * dA.transpose();
                            }
                            if (key.requires_grad()) {
                              detail::mat_map<T> GK(key.grad().data() + n * cq * P, cq, P);
                              GK.noalias() += Q * dA;
                            }
                          }
                        });
}

/// Attention matrix of the first batch item (no graph), rows = queries.
template <class T>
aligned_vector<T> attention_weights(const tensor<T>& query, const tensor<T>& key) {
  const std::size_t cq = query.dim(1), P = query.dim(2) * query.dim(3) * query.dim(4);
  aligned_vector<T> w(P * P);
  detail::attention_softmax<T>(detail::cmat_map<T>(query.data().data(), cq, P),
                               detail::cmat_map<T>(key.data().data(), cq, P), detail::mat_map<T>(w.data(), P, P));
  return w;
}

/// 1x1x1 projections of a non-local block: theta/phi/g map c -> inner
/// channels, out maps inner -> c.
template <class T>
struct nonlocal_params {
  tensor<T> theta_w, theta_b, phi_w, phi_b, g_w, g_b, out_w, out_b;
};

/// W_out * attention(theta(x), phi(x), g(x)) + b_out, without the residual.
template <class T>
tensor<T> nonlocal_response(const tensor<T>& x, const nonlocal_params<T>& p) {
  auto theta = conv3d(x, p.theta_w, p.theta_b);
  auto phi = conv3d(x, p.phi_w, p.phi_b);
  auto g = conv3d(x, p.g_w, p.g_b);
  return conv3d(attention(theta, phi, g), p.out_w, p.out_b);
}

/// x + nonlocal_response(x). Fails if d*h*w exceeds max_positions.
template <class T>
tensor<T> nonlocal_attention(const tensor<T>& x, const nonlocal_params<T>& p, std::size_t max_positions) {
  detail::require_5d(x.shape(), "nonlocal_attention");
  const std::size_t positions = x.dim(2) * x.dim(3) * x.dim(4);
  detail::require(positions <= max_positions, "nonlocal_attention: " + std::to_string(positions) +
                                                  " positions exceed the budget of " + std::to_string(max_positions));
  return add(x, nonlocal_response(x, p));
}

}  // namespace phasefuse
