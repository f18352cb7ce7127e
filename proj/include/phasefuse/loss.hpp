#pragma once

// Reconstruction objective: L1 on intensities plus a weighted L1 on 3D Sobel
// edge responses.

#include <algorithm>
#include <array>
#include <string>
#include <vector>

#include "phasefuse/ops.hpp"
#include "phasefuse/tensor.hpp"

namespace phasefuse {

inline constexpr double kDefaultEdgeWeight = 0.7;

/// Sobel kernels as a constant [3, 1, 3, 3, 3] array. Output channel a
/// differentiates along axis a (0 = z, 1 = y, 2 = x) with the [-1, 0, 1]
/// stencil and smooths the other two axes with [1, 2, 1].
template <class T>
tensor<T> sobel_kernels() {
  constexpr std::array<int, 3> deriv{-1, 0, 1}, smooth{1, 2, 1};
  std::vector<T> w(3 * 27);
  for (int axis = 0; axis < 3; ++axis)
    for (int z = 0; z < 3; ++z)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          const std::array<int, 3> pos{z, y, x};
          int v = 1;
          for (int a = 0; a < 3; ++a) v *= a == axis ? deriv[pos[a]] : smooth[pos[a]];
          w[static_cast<std::size_t>(axis * 27 + (z * 3 + y) * 3 + x)] = static_cast<T>(v);
        }
  return tensor<T>({3, 1, 3, 3, 3}, std::move(w));
}

namespace detail {

inline constexpr std::array<int, 3> kSobelDeriv{-1, 0, 1}, kSobelSmooth{1, 2, 1};

/// 3-tap correlation along one axis of a [d, h, w] block, with
/// clamp-to-edge indexing. `adjoint` applies the transpose instead.
template <class T>
void stencil_pass(const T* in, T* out, const std::array<std::size_t, 3>& dims, int axis,
                  const std::array<int, 3>& taps, bool adjoint) {
  const std::size_t n = dims[static_cast<std::size_t>(axis)];
  const std::size_t stride = axis == 0 ? dims[1] * dims[2] : axis == 1 ? dims[2] : 1;
  const std::size_t block = dims[0] * dims[1] * dims[2];
  const std::size_t outer = block / (n * stride);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t s = 0; s < stride; ++s) {
      const std::size_t base = o * n * stride + s;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t lo = i == 0 ? 0 : i - 1, hi = i + 1 < n ? i + 1 : n - 1;
        const std::size_t src[3] = {lo, i, hi};
        if (!adjoint) {
          T acc{0};
          for (int t = 0; t < 3; ++t)
            if (taps[static_cast<std::size_t>(t)]) acc += static_cast<T>(taps[static_cast<std::size_t>(t)]) * in[base + src[t] * stride];
          out[base + i * stride] = acc;
        } else {
          for (int t = 0; t < 3; ++t)
            if (taps[static_cast<std::size_t>(t)])
              out[base + src[t] * stride] += static_cast<T>(taps[static_cast<std::size_t>(t)]) * in[base + i * stride];
        }
      }
    }
}

}  // namespace detail

/// Per-axis edge responses [b, 3, d, h, w] (channels z, y, x) of a
/// single-channel volume. Separable: central difference along the channel's
/// axis, then [1, 2, 1] along the other two, each with clamp-to-edge borders.
template <class T>
tensor<T> sobel3d(const tensor<T>& x) {
  detail::require(x.ndim() == 5 && x.dim(1) == 1, "sobel3d: expected single-channel [b,1,d,h,w], got " + shape_str(x.shape()));
  const std::size_t b = x.dim(0);
  const std::array<std::size_t, 3> dims{x.dim(2), x.dim(3), x.dim(4)};
  const std::size_t block = dims[0] * dims[1] * dims[2];
  tensor<T> out({b, 3, dims[0], dims[1], dims[2]});
  std::vector<T> t1(block), t2(block);
  for (std::size_t n = 0; n < b; ++n)
    for (int a = 0; a < 3; ++a) {
      const int o1 = (a + 1) % 3, o2 = (a + 2) % 3;
      detail::stencil_pass(x.data().data() + n * block, t1.data(), dims, a, detail::kSobelDeriv, false);
      detail::stencil_pass(t1.data(), t2.data(), dims, o1, detail::kSobelSmooth, false);
      detail::stencil_pass(t2.data(), out.data().data() + (n * 3 + static_cast<std::size_t>(a)) * block, dims, o2, detail::kSobelSmooth, false);
    }
  return detail::record(std::move(out), {x}, [x, b, dims, block](std::span<const T> g) mutable {
    auto gx = x.grad();
    std::vector<T> t1(block), t2(block);
    for (std::size_t n = 0; n < b; ++n)
      for (int a = 0; a < 3; ++a) {
        const int o1 = (a + 1) % 3, o2 = (a + 2) % 3;
        std::fill(t2.begin(), t2.end(), T{0});
        detail::stencil_pass(g.data() + (n * 3 + static_cast<std::size_t>(a)) * block, t2.data(), dims, o2, detail::kSobelSmooth, true);
        std::fill(t1.begin(), t1.end(), T{0});
        detail::stencil_pass(t2.data(), t1.data(), dims, o1, detail::kSobelSmooth, true);
        detail::stencil_pass(t1.data(), gx.data() + n * block, dims, a, detail::kSobelDeriv, true);
      }
  });
}

template <class T>
struct loss_terms {
  tensor<T> total;
  double intensity = 0.0;  // L1(y, y_hat)
  double edge = 0.0;       // L1(S(y), S(y_hat)), before weighting
};

/// L1(y_hat, y) + lambda * L1(S(y_hat), S(y)).
template <class T>
loss_terms<T> combined_loss_terms(const tensor<T>& target, const tensor<T>& prediction, double lambda = kDefaultEdgeWeight) {
  detail::require(lambda >= 0.0, "combined_loss: edge weight must be non-negative");
  detail::require(target.shape() == prediction.shape(), "combined_loss: shape mismatch " + shape_str(target.shape()) +
                                                            " vs " + shape_str(prediction.shape()));
  auto intensity = l1_loss(prediction, target);
  auto edge = l1_loss(sobel3d(prediction), sobel3d(target));
  loss_terms<T> r;
  r.intensity = static_cast<double>(intensity.item());
  r.edge = static_cast<double>(edge.item());
  r.total = add(intensity, scale(edge, static_cast<T>(lambda)));
  return r;
}

template <class T>
tensor<T> combined_loss(const tensor<T>& target, const tensor<T>& prediction, double lambda = kDefaultEdgeWeight) {
  return combined_loss_terms(target, prediction, lambda).total;
}

}  // namespace phasefuse
