#pragma once

// Scalar 3D grids with physical geometry, plus the image-space preprocessing
// used before degradation: HU windowing, trilinear resampling, cropping and
// the synthetic multiphase phantom.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "phasefuse/error.hpp"
#include "phasefuse/interp.hpp"
#include "phasefuse/rng.hpp"

namespace phasefuse {

using dims3 = std::array<std::size_t, 3>;  // (d, h, w) = (z, y, x)
using vec3 = std::array<double, 3>;        // (z, y, x) in mm

inline std::size_t voxel_count(const dims3& d) { return d[0] * d[1] * d[2]; }

inline std::string to_string(const dims3& d) {
  return std::to_string(d[0]) + "x" + std::to_string(d[1]) + "x" + std::to_string(d[2]);
}

/// Voxel (i, j, k) sits at origin + (i*sz, j*sy, k*sx).
struct geometry {
  dims3 dims{1, 1, 1};
  vec3 spacing{1.0, 1.0, 1.0};
  vec3 origin{0.0, 0.0, 0.0};

  std::size_t voxels() const { return voxel_count(dims); }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      detail::require(dims[a] > 0, "geometry: dims must be positive, got " + to_string(dims));
      detail::require(spacing[a] > 0.0 && std::isfinite(spacing[a]), "geometry: spacing must be positive and finite");
      detail::require(std::isfinite(origin[a]), "geometry: origin must be finite");
    }
  }

  friend bool operator==(const geometry&, const geometry&) = default;
};

/// Row-major grid, x fastest. T = float for intensities, uint8_t for masks.
template <class T>
class grid {
 public:
  using value_type = T;

  grid() = default;

  explicit grid(geometry g, T fill = T{}) : geom_(g) {
    geom_.validate();
    data_.assign(geom_.voxels(), fill);
  }

  grid(geometry g, std::vector<T> data) : geom_(g), data_(std::move(data)) {
    geom_.validate();
    detail::require(data_.size() == geom_.voxels(), "grid: data length " + std::to_string(data_.size()) +
                                                        " does not match dims " + to_string(geom_.dims));
    if constexpr (std::is_floating_point_v<T>) {
      for (T v : data_) detail::require(std::isfinite(v), "grid: non-finite intensity");
    } else {
      for (T v : data_) detail::require(v == 0 || v == 1, "mask: labels must be 0 or 1");
    }
  }

  const geometry& geom() const { return geom_; }
  const dims3& dims() const { return geom_.dims; }
  const vec3& spacing() const { return geom_.spacing; }
  const vec3& origin() const { return geom_.origin; }
  std::size_t size() const { return data_.size(); }

  std::size_t index(std::size_t z, std::size_t y, std::size_t x) const {
    return (z * geom_.dims[1] + y) * geom_.dims[2] + x;
  }
  T& operator()(std::size_t z, std::size_t y, std::size_t x) { return data_[index(z, y, x)]; }
  T operator()(std::size_t z, std::size_t y, std::size_t x) const { return data_[index(z, y, x)]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T> release() && { return std::move(data_); }

  friend bool operator==(const grid&, const grid&) = default;

 private:
  geometry geom_;
  std::vector<T> data_;
};

using volume = grid<float>;
using mask = grid<std::uint8_t>;

struct window_spec {
  double level = 50.0;   // HU
  double width = 450.0;  // HU
};

/// Maps [level - width/2, level + width/2] HU affinely onto [0, 1], clamping outside.
inline volume window_hu(const volume& v, const window_spec& w) {
  detail::require(w.width > 0.0, "window width must be positive");
  const double lo = w.level - w.width / 2.0;
  std::vector<float> out(v.size());
  auto in = v.data();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(std::clamp((static_cast<double>(in[i]) - lo) / w.width, 0.0, 1.0));
  return volume(v.geom(), std::move(out));
}

namespace detail {

/// Clamp-to-edge linear tap for a continuous index u on [0, n).
inline lerp_tap make_tap(double u, std::size_t n) {
  const double r = std::round(u);
  if (std::fabs(u - r) < 1e-9) u = r;
  if (u <= 0.0) return {0, 0, 0.0};
  const double last = static_cast<double>(n - 1);
  if (u >= last) return {n - 1, n - 1, 0.0};
  const auto i0 = static_cast<std::size_t>(std::floor(u));
  return {i0, i0 + 1, u - static_cast<double>(i0)};
}

template <class In>
double sample_trilinear(const In& src, const dims3& d, const lerp_tap& tz, const lerp_tap& ty, const lerp_tap& tx) {
  auto at = [&](std::size_t z, std::size_t y, std::size_t x) {
    return static_cast<double>(src[(z * d[1] + y) * d[2] + x]);
  };
  auto row = [&](std::size_t z, std::size_t y) {
    const double a = at(z, y, tx.i0);
    return tx.t == 0.0 ? a : a * (1.0 - tx.t) + at(z, y, tx.i1) * tx.t;
  };
  auto plane = [&](std::size_t z) {
    const double a = row(z, ty.i0);
    return ty.t == 0.0 ? a : a * (1.0 - ty.t) + row(z, ty.i1) * ty.t;
  };
  const double a = plane(tz.i0);
  return tz.t == 0.0 ? a : a * (1.0 - tz.t) + plane(tz.i1) * tz.t;
}

}  // namespace detail

/// Resamples `v` onto `target` by physical position, clamping to the edge outside v.
inline volume resample_trilinear(const volume& v, const geometry& target) {
  target.validate();
  if (target == v.geom()) return v;
  std::array<std::vector<detail::lerp_tap>, 3> taps;
  for (int a = 0; a < 3; ++a) {
    taps[a].resize(target.dims[a]);
    for (std::size_t i = 0; i < target.dims[a]; ++i) {
      const double p = target.origin[a] + static_cast<double>(i) * target.spacing[a];
      taps[a][i] = detail::make_tap((p - v.origin()[a]) / v.spacing()[a], v.dims()[a]);
    }
  }
  std::vector<float> out(target.voxels());
  std::size_t n = 0;
  for (std::size_t z = 0; z < target.dims[0]; ++z)
    for (std::size_t y = 0; y < target.dims[1]; ++y)
      for (std::size_t x = 0; x < target.dims[2]; ++x)
        out[n++] = static_cast<float>(detail::sample_trilinear(v.data(), v.dims(), taps[0][z], taps[1][y], taps[2][x]));
  return volume(target, std::move(out));
}

/// Copies voxels [lo, hi) and shifts the origin by lo * spacing.
template <class T>
grid<T> crop(const grid<T>& v, const dims3& lo, const dims3& hi) {
  geometry g = v.geom();
  for (int a = 0; a < 3; ++a) {
    detail::require(lo[a] < hi[a] && hi[a] <= v.dims()[a],
                    "crop: bounds [" + to_string(lo) + ", " + to_string(hi) + ") outside " + to_string(v.dims()));
    g.dims[a] = hi[a] - lo[a];
    g.origin[a] = v.origin()[a] + static_cast<double>(lo[a]) * v.spacing()[a];
  }
  std::vector<T> out;
  out.reserve(g.voxels());
  for (std::size_t z = lo[0]; z < hi[0]; ++z)
    for (std::size_t y = lo[1]; y < hi[1]; ++y) {
      const auto row = v.data().subspan(v.index(z, y, lo[2]), g.dims[2]);
      out.insert(out.end(), row.begin(), row.end());
    }
  return grid<T>(g, std::move(out));
}

enum class phase { noncontrast = 0, arterial = 1, portal_venous = 2 };

inline const char* phase_name(phase p) {
  switch (p) {
    case phase::noncontrast: return "noncontrast";
    case phase::arterial: return "arterial";
    case phase::portal_venous: return "portal_venous";
  }
  return "?";
}

inline phase parse_phase(const std::string& s) {
  if (s == "nc" || s == "noncontrast" || s == "non-contrast") return phase::noncontrast;
  if (s == "art" || s == "arterial") return phase::arterial;
  if (s == "pv" || s == "portal_venous" || s == "portal-venous") return phase::portal_venous;
  throw usage_error("unknown phase '" + s + "' (expected nc|art|pv)");
}

namespace detail {

struct phantom_structure {
  vec3 center;  // normalized [-1, 1] coordinates
  vec3 radii;
  std::array<double, 3> hu;  // per phase: noncontrast, arterial, portal venous
};

}  // namespace detail

inline constexpr std::size_t kPhantomTextureWaves = 8;
inline constexpr double kPhantomTextureAmplitude = 10.0;  // HU per wave; ~20 HU std in total

/// Synthetic abdomen: body with fat rim, organs, vessels and liver lesions as
/// soft-edged ellipsoids, with fine tissue texture inside the body. Geometry depends only on the seed; the phase only
/// selects the contrast level of each structure. Values are windowed to [0, 1]
/// with the default abdominal window.
inline volume make_phantom(std::uint64_t seed, const dims3& dims, phase ph, vec3 spacing = {1.0, 1.0, 1.0}) {
  for (std::size_t d : dims) detail::require(d >= 16, "phantom: dims must be >= 16 per axis, got " + to_string(dims));
  counter_rng rng(seed, 0x9a17);
  auto jitter = [&](double s) { return rng.uniform(-s, s); };
  auto scale = [&](double s) { return 1.0 + rng.uniform(-s, s); };

  using S = detail::phantom_structure;
  std::vector<S> parts;
  auto add = [&](vec3 c, vec3 r, std::array<double, 3> hu, double cj = 0.04, double rj = 0.08) {
    parts.push_back({{c[0] + jitter(cj), c[1] + jitter(cj), c[2] + jitter(cj)},
                     {r[0] * scale(rj), r[1] * scale(rj), r[2] * scale(rj)},
                     hu});
  };
  add({0, 0, 0}, {1.6, 0.86, 0.94}, {-100, -100, -100}, 0.0, 0.03);  // subcutaneous fat
  add({0, 0.02, 0}, {1.6, 0.76, 0.86}, {35, 40, 45}, 0.0, 0.03);     // muscle / soft tissue
  add({0, -0.1, -0.38}, {0.62, 0.42, 0.36}, {55, 80, 125});          // liver
  add({0.05, -0.05, 0.52}, {0.36, 0.2, 0.16}, {45, 125, 115});       // spleen
  add({-0.25, 0.35, -0.42}, {0.28, 0.13, 0.11}, {30, 185, 155});     // kidneys
  add({-0.25, 0.35, 0.42}, {0.28, 0.13, 0.11}, {30, 185, 155});
  add({0.1, 0.05, 0.12}, {0.16, 0.08, 0.34}, {40, 110, 100});        // pancreas
  add({0, 0.26, 0.05}, {1.6, 0.085, 0.085}, {40, 320, 160}, 0.02);   // aorta
  add({0, 0.22, -0.12}, {1.6, 0.1, 0.1}, {40, 90, 165}, 0.02);       // inferior vena cava
  add({0.05, 0.0, -0.08}, {0.45, 0.05, 0.06}, {40, 95, 185});        // portal vein
  add({0, 0.6, 0.0}, {1.6, 0.13, 0.13}, {450, 450, 450}, 0.01);      // vertebral column
  const int lesions = 2 + static_cast<int>(rng.below(3));
  for (int i = 0; i < lesions; ++i) {
    const double r = rng.uniform(0.05, 0.1);
    add({rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.1), rng.uniform(-0.55, -0.25)}, {r, r, r}, {30, 60, 65}, 0.0, 0.0);
  }
  const int vessels = 3 + static_cast<int>(rng.below(3));
  for (int i = 0; i < vessels; ++i) {
    const double r = rng.uniform(0.03, 0.05);
    add({rng.uniform(-0.4, 0.4), rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5)},
        {rng.uniform(0.2, 0.5), r, r}, {40, 210, 170}, 0.0, 0.0);
  }
  const vec3 freq{rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.5), rng.uniform(1.0, 2.5)};
  const vec3 shift{rng.uniform(0, 6.28), rng.uniform(0, 6.28), rng.uniform(0, 6.28)};
  // Parenchymal texture: random plane waves, wavelengths 3-8 voxels.
  struct wave {
    vec3 k;
    double phase;
  };
  std::array<wave, kPhantomTextureWaves> waves;
  for (auto& wv : waves) {
    vec3 dir{rng.normal(), rng.normal(), rng.normal()};
    const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]) + 1e-12;
    const double k = 2.0 * 3.14159265358979323846 / rng.uniform(3.0, 8.0);
    for (auto& c : dir) c *= k / len;
    wv = {dir, rng.uniform(0.0, 6.283185307179586)};
  }

  const geometry g{dims, spacing, {0.0, 0.0, 0.0}};
  std::vector<float> hu(g.voxels());
  const auto pi = static_cast<std::size_t>(ph);
  std::size_t n = 0;
  for (std::size_t z = 0; z < dims[0]; ++z) {
    const double pz = 2.0 * (static_cast<double>(z) + 0.5) / static_cast<double>(dims[0]) - 1.0;
    for (std::size_t y = 0; y < dims[1]; ++y) {
      const double py = 2.0 * (static_cast<double>(y) + 0.5) / static_cast<double>(dims[1]) - 1.0;
      for (std::size_t x = 0; x < dims[2]; ++x) {
        const double px = 2.0 * (static_cast<double>(x) + 0.5) / static_cast<double>(dims[2]) - 1.0;
        const vec3 p{pz, py, px};
        double value = -1000.0;
        bool inside_body = false;
        for (std::size_t s = 0; s < parts.size(); ++s) {
          const auto& part = parts[s];
          double r2 = 0.0, rmin = 1e9;
          for (int a = 0; a < 3; ++a) {
            const double q = (p[a] - part.center[a]) / part.radii[a];
            r2 += q * q;
            rmin = std::min(rmin, part.radii[a] * 0.5 * static_cast<double>(dims[a]));
          }
          // Signed distance to the surface in voxels, roughly; edges span about one voxel.
          const double dist = (1.0 - std::sqrt(r2)) * rmin;
          const double m = 1.0 / (1.0 + std::exp(-dist / 0.35));
          if (s == 0) inside_body = m > 0.5;
          value = value * (1.0 - m) + part.hu[pi] * m;
        }
        if (inside_body) {
          value += 8.0 * std::sin(freq[0] * pz * 3.0 + shift[0]) * std::cos(freq[1] * py * 3.0 + shift[1]) *
                   std::sin(freq[2] * px * 3.0 + shift[2]);
          double tex = 0.0;
          for (const auto& wv : waves)
            tex += std::sin(wv.k[0] * double(z) + wv.k[1] * double(y) + wv.k[2] * double(x) + wv.phase);
          value += kPhantomTextureAmplitude * tex;
        }
        hu[n++] = static_cast<float>(value);
      }
    }
  }
  return window_hu(volume(g, std::move(hu)), window_spec{});
}

}  // namespace phasefuse
