#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace phasefuse::detail {

/// Two-point linear tap: value = (1 - t) * src[i0] + t * src[i1].
struct lerp_tap {
  std::size_t i0, i1;
  double t;
};

/// Half-pixel ("align corners false") taps mapping n_out samples onto n_in,
/// where output o reads source coordinate (o + 0.5) * inv_scale - 0.5.
inline std::vector<lerp_tap> half_pixel_taps(std::size_t n_in, std::size_t n_out, double inv_scale) {
  std::vector<lerp_tap> taps(n_out);
  for (std::size_t o = 0; o < n_out; ++o) {
    const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * inv_scale - 0.5);
    const auto i0 = std::min(static_cast<std::size_t>(src), n_in - 1);
    const std::size_t i1 = i0 + 1 < n_in ? i0 + 1 : i0;
    const double t = i1 == i0 ? 0.0 : src - static_cast<double>(i0);
    taps[o] = {i0, i1, t};
  }
  return taps;
}

/// Nearest source index for half-pixel centred resizing.
inline std::vector<std::size_t> nearest_taps(std::size_t n_in, std::size_t n_out, double inv_scale) {
  std::vector<std::size_t> idx(n_out);
  for (std::size_t o = 0; o < n_out; ++o)
    idx[o] = std::min(static_cast<std::size_t>(std::floor((static_cast<double>(o) + 0.5) * inv_scale)), n_in - 1);
  return idx;
}

/// Trilinear gather over one (d, h, w) block. Accumulates in double.
template <class In, class Out>
void trilinear_gather(const In* src, std::size_t hi, std::size_t wi, Out* dst, const std::vector<lerp_tap>& tz,
                      const std::vector<lerp_tap>& ty, const std::vector<lerp_tap>& tx) {
  std::size_t n = 0;
  for (const auto& z : tz)
    for (const auto& y : ty) {
      const In* r00 = src + (z.i0 * hi + y.i0) * wi;
      const In* r01 = src + (z.i0 * hi + y.i1) * wi;
      const In* r10 = src + (z.i1 * hi + y.i0) * wi;
      const In* r11 = src + (z.i1 * hi + y.i1) * wi;
      const double wz1 = z.t, wz0 = 1.0 - z.t, wy1 = y.t, wy0 = 1.0 - y.t;
      for (const auto& x : tx) {
        const double wx1 = x.t, wx0 = 1.0 - x.t;
        auto lin = [&](const In* r) { return wx0 * static_cast<double>(r[x.i0]) + wx1 * static_cast<double>(r[x.i1]); };
        dst[n++] = static_cast<Out>(wz0 * (wy0 * lin(r00) + wy1 * lin(r01)) + wz1 * (wy0 * lin(r10) + wy1 * lin(r11)));
      }
    }
}

/// Transpose of trilinear_gather: scatters dst-shaped gradients back onto src.
template <class T>
void trilinear_scatter(const T* grad_out, std::size_t hi, std::size_t wi, T* grad_in, const std::vector<lerp_tap>& tz,
                       const std::vector<lerp_tap>& ty, const std::vector<lerp_tap>& tx) {
  std::size_t n = 0;
  for (const auto& z : tz)
    for (const auto& y : ty) {
      const std::size_t rows[4] = {(z.i0 * hi + y.i0) * wi, (z.i0 * hi + y.i1) * wi, (z.i1 * hi + y.i0) * wi,
                                   (z.i1 * hi + y.i1) * wi};
      const double wrow[4] = {(1.0 - z.t) * (1.0 - y.t), (1.0 - z.t) * y.t, z.t * (1.0 - y.t), z.t * y.t};
      for (const auto& x : tx) {
        const double g = static_cast<double>(grad_out[n++]);
        for (int r = 0; r < 4; ++r) {
          grad_in[rows[r] + x.i0] += static_cast<T>(g * wrow[r] * (1.0 - x.t));
          grad_in[rows[r] + x.i1] += static_cast<T>(g * wrow[r] * x.t);
        }
      }
    }
}

}  // namespace phasefuse::detail
