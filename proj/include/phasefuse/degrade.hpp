#pragma once

// Seeded second-order degradation: two stages of (blur -> resize -> noise),
// each op applied with a fixed probability and random parameters, followed by
// a final trilinear resize to 1/final_scale of the input dims. Every draw is
// recorded in a degradation_recipe, which replays bit-exactly.
//
// Draw order per stage s (stream s+1 of counter_rng(seed)):
//   blur:   u < p_blur; if applied: u < p_isotropic; sigma (1 draw, or z,y,x)
//   resize: u < p_resize; if applied: scale; u < 0.5 selects nearest
//   noise:  u < p_noise; if applied: u < p_gaussian; strength; child seed (u64)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "phasefuse/error.hpp"
#include "phasefuse/interp.hpp"
#include "phasefuse/keyvalue.hpp"
#include "phasefuse/rng.hpp"
#include "phasefuse/volume.hpp"

namespace phasefuse {

enum class blur_kind { isotropic, anisotropic };
enum class noise_kind { gaussian, poisson };
enum class resize_method { trilinear, nearest };

/// Separable sampled Gaussian. weights[a] holds the 2*radius+1 taps along
/// axis a (z, y, x), each normalized to sum 1, so the 3D kernel sums to 1.
struct blur_kernel {
  blur_kind kind = blur_kind::isotropic;
  vec3 sigmas{1.0, 1.0, 1.0};
  int radius = 3;
  std::array<std::vector<double>, 3> weights;

  std::size_t extent() const { return static_cast<std::size_t>(2 * radius + 1); }

  double weight(int dz, int dy, int dx) const {
    return weights[0][static_cast<std::size_t>(dz + radius)] * weights[1][static_cast<std::size_t>(dy + radius)] *
           weights[2][static_cast<std::size_t>(dx + radius)];
  }
};

inline blur_kernel gaussian_kernel_3d(const vec3& sigmas, int radius) {
  detail::require(radius >= 0, "blur kernel radius must be non-negative");
  blur_kernel k;
  k.sigmas = sigmas;
  k.radius = radius;
  k.kind = (sigmas[0] == sigmas[1] && sigmas[1] == sigmas[2]) ? blur_kind::isotropic : blur_kind::anisotropic;
  for (int a = 0; a < 3; ++a) {
    detail::require(sigmas[a] > 0.0 && std::isfinite(sigmas[a]), "blur sigma must be positive");
    auto& w = k.weights[a];
    w.resize(k.extent());
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
      const double e = static_cast<double>(i) / sigmas[a];
      w[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * e * e);
      sum += w[static_cast<std::size_t>(i + radius)];
    }
    for (auto& x : w) x /= sum;
  }
  return k;
}

/// Separable convolution with clamp-to-edge borders.
inline volume apply_blur(const volume& v, const blur_kernel& k) {
  const auto& d = v.dims();
  for (int a = 0; a < 3; ++a)
    detail::require(k.extent() <= d[a], "blur kernel extent " + std::to_string(k.extent()) +
                                            " exceeds volume dims " + to_string(d));
  std::vector<double> cur(v.data().begin(), v.data().end()), next(cur.size());
  const std::array<std::size_t, 3> stride{d[1] * d[2], d[2], 1};
  const auto r = static_cast<std::ptrdiff_t>(k.radius);
  for (int a = 0; a < 3; ++a) {
    const auto n = static_cast<std::ptrdiff_t>(d[a]);
    const auto& w = k.weights[a];
    for (std::size_t z = 0; z < d[0]; ++z)
      for (std::size_t y = 0; y < d[1]; ++y)
        for (std::size_t x = 0; x < d[2]; ++x) {
          const std::size_t idx = z * stride[0] + y * stride[1] + x;
          const std::array<std::size_t, 3> pos{z, y, x};
          const std::size_t base = idx - pos[a] * stride[a];
          const auto p = static_cast<std::ptrdiff_t>(pos[a]);
          double acc = 0.0;
          for (std::ptrdiff_t t = -r; t <= r; ++t) {
            const auto q = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(p + t, 0, n - 1));
            acc += w[static_cast<std::size_t>(t + r)] * cur[base + q * stride[a]];
          }
          next[idx] = acc;
        }
    std::swap(cur, next);
  }
  std::vector<float> out(cur.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(cur[i]);
  return volume(v.geom(), std::move(out));
}

/// Gaussian: x + N(0, strength^2). Poisson: Poisson(x * strength) / strength.
/// Voxel i draws from stream i of counter_rng(seed); output clamped to [0, 1].
/// A gaussian strength of 0 is the identity.
inline volume add_noise(const volume& v, noise_kind kind, double strength, std::uint64_t seed) {
  detail::require(std::isfinite(strength) && strength >= 0.0, "noise strength must be non-negative");
  if (kind == noise_kind::gaussian && strength == 0.0) return v;
  detail::require(strength > 0.0, "poisson photon scale must be positive");
  auto in = v.data();
  std::vector<float> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    counter_rng rng(seed, i);
    const double x = in[i];
    double y;
    if (kind == noise_kind::gaussian)
      y = x + strength * rng.normal();
    else
      y = static_cast<double>(rng.poisson(std::max(0.0, x) * strength)) / strength;
    out[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
  }
  return volume(v.geom(), std::move(out));
}

/// Resizes to explicit dims; spacing scales by the per-axis dims ratio.
inline volume resize_to_dims(const volume& v, const dims3& out_dims, resize_method method) {
  for (std::size_t n : out_dims) detail::require(n >= 1, "resize: degenerate output dims " + to_string(out_dims));
  if (out_dims == v.dims()) return v;
  geometry g = v.geom();
  g.dims = out_dims;
  vec3 inv{};
  for (int a = 0; a < 3; ++a) {
    inv[a] = static_cast<double>(v.dims()[a]) / static_cast<double>(out_dims[a]);
    g.spacing[a] = v.spacing()[a] * inv[a];
  }
  std::vector<float> out(g.voxels());
  const auto& d = v.dims();
  if (method == resize_method::trilinear) {
    detail::trilinear_gather(v.data().data(), d[1], d[2], out.data(), detail::half_pixel_taps(d[0], out_dims[0], inv[0]),
                             detail::half_pixel_taps(d[1], out_dims[1], inv[1]),
                             detail::half_pixel_taps(d[2], out_dims[2], inv[2]));
  } else {
    const auto tz = detail::nearest_taps(d[0], out_dims[0], inv[0]);
    const auto ty = detail::nearest_taps(d[1], out_dims[1], inv[1]);
    const auto tx = detail::nearest_taps(d[2], out_dims[2], inv[2]);
    std::size_t n = 0;
    for (std::size_t z : tz)
      for (std::size_t y : ty)
        for (std::size_t x : tx) out[n++] = v(z, y, x);
  }
  return volume(g, std::move(out));
}

/// Output dims floor(d * scale) per axis; spacing divided by scale.
inline volume resize_volume(const volume& v, double scale, resize_method method) {
  detail::require(scale > 0.0 && std::isfinite(scale), "resize: scale must be positive");
  dims3 out{};
  for (int a = 0; a < 3; ++a) {
    const double s = static_cast<double>(v.dims()[a]) * scale;
    out[a] = static_cast<std::size_t>(std::floor(s + 1e-9));
    detail::require(out[a] >= 1, "resize: scale " + format_double(scale) + " collapses dims " + to_string(v.dims()));
  }
  if (scale == 1.0) return v;
  volume r = resize_to_dims(v, out, method);
  geometry g = r.geom();
  for (int a = 0; a < 3; ++a) g.spacing[a] = v.spacing()[a] / scale;
  return volume(g, std::move(r).release());
}

struct degradation_options {
  double p_blur = 0.8;
  double p_resize = 0.7;
  double p_noise = 0.9;
  double p_isotropic = 0.5;
  double p_gaussian = 0.5;
  double sigma_min = 0.2, sigma_max = 2.0;        // voxels
  double gauss_min = 0.005, gauss_max = 0.05;     // noise sigma
  double poisson_min = 200.0, poisson_max = 4000.0;  // photon scale
  double resize_min = 0.5, resize_max = 1.5;

  void validate() const {
    for (double p : {p_blur, p_resize, p_noise, p_isotropic, p_gaussian})
      detail::require(p >= 0.0 && p <= 1.0, "degradation probabilities must lie in [0, 1]");
    detail::require(0.0 < sigma_min && sigma_min <= sigma_max, "invalid blur sigma range");
    detail::require(0.0 <= gauss_min && gauss_min <= gauss_max, "invalid gaussian noise range");
    detail::require(0.0 < poisson_min && poisson_min <= poisson_max, "invalid poisson range");
    detail::require(0.0 < resize_min && resize_min <= resize_max, "invalid resize range");
  }
};

struct blur_step {
  bool applied = false;
  blur_kind kind = blur_kind::isotropic;
  vec3 sigmas{0, 0, 0};
  int radius = 0;
  friend bool operator==(const blur_step&, const blur_step&) = default;
};

struct resize_step {
  bool applied = false;
  double scale = 1.0;
  resize_method method = resize_method::trilinear;
  friend bool operator==(const resize_step&, const resize_step&) = default;
};

struct noise_step {
  bool applied = false;
  noise_kind kind = noise_kind::gaussian;
  double strength = 0.0;
  std::uint64_t seed = 0;
  friend bool operator==(const noise_step&, const noise_step&) = default;
};

struct degradation_stage {
  blur_step blur;
  resize_step resize;
  noise_step noise;
  friend bool operator==(const degradation_stage&, const degradation_stage&) = default;
};

struct degradation_recipe {
  std::uint64_t seed = 0;
  int final_scale = 1;
  std::array<degradation_stage, 2> stages;
  friend bool operator==(const degradation_recipe&, const degradation_recipe&) = default;
};

namespace detail {

inline int blur_radius(const vec3& sigmas, const dims3& d) {
  const double smax = std::max({sigmas[0], sigmas[1], sigmas[2]});
  const auto wanted = static_cast<std::size_t>(std::ceil(3.0 * smax));
  const std::size_t dmin = std::min({d[0], d[1], d[2]});
  return static_cast<int>(std::min(wanted, (dmin - 1) / 2));
}

inline volume apply_stage(volume v, const degradation_stage& st) {
  if (st.blur.applied && st.blur.radius > 0) v = apply_blur(v, gaussian_kernel_3d(st.blur.sigmas, st.blur.radius));
  if (st.resize.applied) v = resize_volume(v, st.resize.scale, st.resize.method);
  if (st.noise.applied) v = add_noise(v, st.noise.kind, st.noise.strength, st.noise.seed);
  return v;
}

inline dims3 reduced_dims(const dims3& d, int final_scale) {
  dims3 out{};
  for (int a = 0; a < 3; ++a) out[a] = (d[a] + static_cast<std::size_t>(final_scale) - 1) / static_cast<std::size_t>(final_scale);
  return out;
}

inline volume finish(const volume& original, volume v, int final_scale) {
  const dims3 target = reduced_dims(original.dims(), final_scale);
  v = resize_to_dims(v, target, resize_method::trilinear);
  geometry g = original.geom();
  g.dims = target;
  for (int a = 0; a < 3; ++a)
    g.spacing[a] = original.spacing()[a] * static_cast<double>(original.dims()[a]) / static_cast<double>(target[a]);
  return volume(g, std::move(v).release());
}

inline void check_final_scale(const volume& v, int final_scale) {
  require(final_scale == 1 || final_scale == 2 || final_scale == 4, "final_scale must be 1, 2 or 4");
  for (std::size_t n : v.dims())
    require(n >= static_cast<std::size_t>(final_scale), "volume " + to_string(v.dims()) + " too small for final_scale " +
                                                            std::to_string(final_scale));
}

}  // namespace detail

struct degraded {
  volume image;
  degradation_recipe recipe;
};

inline degraded degrade_second_order(const volume& v, std::uint64_t seed, int final_scale,
                                     const degradation_options& opt = {}) {
  opt.validate();
  detail::check_final_scale(v, final_scale);
  degradation_recipe recipe;
  recipe.seed = seed;
  recipe.final_scale = final_scale;
  volume cur = v;
  for (std::size_t s = 0; s < recipe.stages.size(); ++s) {
    counter_rng rng(seed, s + 1);
    auto& st = recipe.stages[s];
    if (rng.bernoulli(opt.p_blur)) {
      st.blur.applied = true;
      if (rng.bernoulli(opt.p_isotropic)) {
        st.blur.kind = blur_kind::isotropic;
        const double sg = rng.uniform(opt.sigma_min, opt.sigma_max);
        st.blur.sigmas = {sg, sg, sg};
      } else {
        st.blur.kind = blur_kind::anisotropic;
        for (auto& sg : st.blur.sigmas) sg = rng.uniform(opt.sigma_min, opt.sigma_max);
      }
      st.blur.radius = detail::blur_radius(st.blur.sigmas, cur.dims());
    }
    if (rng.bernoulli(opt.p_resize)) {
      st.resize.applied = true;
      st.resize.scale = rng.uniform(opt.resize_min, opt.resize_max);
      st.resize.method = rng.bernoulli(0.5) ? resize_method::nearest : resize_method::trilinear;
    }
    if (rng.bernoulli(opt.p_noise)) {
      st.noise.applied = true;
      if (rng.bernoulli(opt.p_gaussian)) {
        st.noise.kind = noise_kind::gaussian;
        st.noise.strength = rng.uniform(opt.gauss_min, opt.gauss_max);
      } else {
        st.noise.kind = noise_kind::poisson;
        st.noise.strength = rng.uniform(opt.poisson_min, opt.poisson_max);
      }
      st.noise.seed = rng.next_u64();
    }
    cur = detail::apply_stage(std::move(cur), st);
  }
  return {detail::finish(v, std::move(cur), final_scale), recipe};
}

/// Re-applies a recorded recipe; bit-identical to the original degradation.
inline volume replay_recipe(const volume& v, const degradation_recipe& recipe) {
  detail::check_final_scale(v, recipe.final_scale);
  volume cur = v;
  for (const auto& st : recipe.stages) cur = detail::apply_stage(std::move(cur), st);
  return detail::finish(v, std::move(cur), recipe.final_scale);
}

inline kv_pairs recipe_to_kv(const degradation_recipe& r) {
  kv_pairs kv;
  kv.emplace_back("generator", kRngName);
  kv.emplace_back("seed", std::to_string(r.seed));
  kv.emplace_back("final_scale", std::to_string(r.final_scale));
  for (std::size_t s = 0; s < r.stages.size(); ++s) {
    const auto& st = r.stages[s];
    const std::string p = "stage" + std::to_string(s + 1) + ".";
    kv.emplace_back(p + "blur", st.blur.applied ? "1" : "0");
    if (st.blur.applied) {
      kv.emplace_back(p + "blur.kind", st.blur.kind == blur_kind::isotropic ? "isotropic" : "anisotropic");
      kv.emplace_back(p + "blur.sigma", format_double(st.blur.sigmas[0]) + "," + format_double(st.blur.sigmas[1]) +
                                            "," + format_double(st.blur.sigmas[2]));
      kv.emplace_back(p + "blur.radius", std::to_string(st.blur.radius));
    }
    kv.emplace_back(p + "resize", st.resize.applied ? "1" : "0");
    if (st.resize.applied) {
      kv.emplace_back(p + "resize.scale", format_double(st.resize.scale));
      kv.emplace_back(p + "resize.direction", st.resize.scale < 1.0 ? "down" : "up");
      kv.emplace_back(p + "resize.method", st.resize.method == resize_method::trilinear ? "trilinear" : "nearest");
    }
    kv.emplace_back(p + "noise", st.noise.applied ? "1" : "0");
    if (st.noise.applied) {
      kv.emplace_back(p + "noise.kind", st.noise.kind == noise_kind::gaussian ? "gaussian" : "poisson");
      kv.emplace_back(p + "noise.strength", format_double(st.noise.strength));
      kv.emplace_back(p + "noise.seed", std::to_string(st.noise.seed));
    }
  }
  return kv;
}

/// Parses a recipe written by recipe_to_kv. Every key that recipe_to_kv
/// would emit for the recorded steps must be present.
inline degradation_recipe recipe_from_kv(const kv_pairs& kv) {
  degradation_recipe r;
  auto bad = [](const std::string& k, const std::string& v) -> usage_error {
    return usage_error("recipe: bad value '" + v + "' for key '" + k + "'");
  };
  std::set<std::string> seen;
  for (const auto& [k, v] : kv) {
    if (!seen.insert(k).second) throw usage_error("recipe: duplicate key '" + k + "'");
    if (k == "generator") {
      if (v != kRngName) throw bad(k, v);
      continue;
    }
    if (k == "seed") {
      r.seed = parse_int<std::uint64_t>(k, v);
      continue;
    }
    if (k == "final_scale") {
      r.final_scale = parse_int<int>(k, v);
      continue;
    }
    if (k.size() < 8 || k.compare(0, 5, "stage") != 0 || (k[5] != '1' && k[5] != '2') || k[6] != '.')
      throw usage_error("recipe: unknown key '" + k + "'");
    auto& st = r.stages[static_cast<std::size_t>(k[5] - '1')];
    const std::string f = k.substr(7);
    if (f == "blur") st.blur.applied = parse_bool(k, v);
    else if (f == "blur.kind") {
      if (v == "isotropic") st.blur.kind = blur_kind::isotropic;
      else if (v == "anisotropic") st.blur.kind = blur_kind::anisotropic;
      else throw bad(k, v);
    } else if (f == "blur.sigma") {
      std::stringstream ss(v);
      std::string item;
      int a = 0;
      while (std::getline(ss, item, ',')) {
        if (a >= 3) throw bad(k, v);
        st.blur.sigmas[static_cast<std::size_t>(a++)] = parse_double(k, item);
      }
      if (a != 3) throw bad(k, v);
    } else if (f == "blur.radius") st.blur.radius = parse_int<int>(k, v);
    else if (f == "resize") st.resize.applied = parse_bool(k, v);
    else if (f == "resize.scale") st.resize.scale = parse_double(k, v);
    else if (f == "resize.direction") {
      if (v != "up" && v != "down") throw bad(k, v);
    } else if (f == "resize.method") {
      if (v == "trilinear") st.resize.method = resize_method::trilinear;
      else if (v == "nearest") st.resize.method = resize_method::nearest;
      else throw bad(k, v);
    } else if (f == "noise") st.noise.applied = parse_bool(k, v);
    else if (f == "noise.kind") {
      if (v == "gaussian") st.noise.kind = noise_kind::gaussian;
      else if (v == "poisson") st.noise.kind = noise_kind::poisson;
      else throw bad(k, v);
    } else if (f == "noise.strength") st.noise.strength = parse_double(k, v);
    else if (f == "noise.seed") st.noise.seed = parse_int<std::uint64_t>(k, v);
    else throw usage_error("recipe: unknown key '" + k + "'");
  }
  const kv_pairs expected = recipe_to_kv(r);
  for (const auto& [k, _] : expected)
    if (!seen.count(k)) throw usage_error("recipe: missing key '" + k + "'");
  if (seen.size() != expected.size()) throw usage_error("recipe: keys for steps that are not applied");
  return r;
}

}  // namespace phasefuse
