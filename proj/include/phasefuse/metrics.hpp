#pragma once

// Image-quality metrics (PSNR, 3D SSIM), segmentation overlap (Dice,
// normalized surface distance) and the paired Wilcoxon signed-rank test.

#include <algorithm>
#include <array>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "phasefuse/error.hpp"
#include "phasefuse/keyvalue.hpp"
#include "phasefuse/volume.hpp"

namespace phasefuse {

namespace detail {

template <class A, class B>
void require_same_dims(const grid<A>& a, const grid<B>& b, const char* what) {
  require(a.dims() == b.dims(), std::string(what) + ": dimension mismatch " + to_string(a.dims()) + " vs " + to_string(b.dims()));
}

}  // namespace detail

/// 10 log10(range^2 / MSE) in dB; +infinity when the volumes are identical.
inline double psnr(const volume& ref, const volume& test, double data_range = 1.0) {
  detail::require_same_dims(ref, test, "psnr");
  detail::require(data_range > 0.0, "psnr: data range must be positive");
  double se = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double d = static_cast<double>(ref.data()[i]) - static_cast<double>(test.data()[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / (se / static_cast<double>(ref.size())));
}

struct ssim_options {
  double data_range = 1.0;
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
};

/// Normalized 1D Gaussian taps; the 3D window is their outer product.
inline std::vector<double> ssim_window_1d(const ssim_options& opt) {
  std::vector<double> w(opt.window);
  const double c = static_cast<double>(opt.window - 1) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < opt.window; ++i) {
    const double e = (static_cast<double>(i) - c) / opt.sigma;
    w[i] = std::exp(-0.5 * e * e);
    s += w[i];
  }
  for (auto& v : w) v /= s;
  return w;
}

namespace detail {

/// "Valid" separable filtering: output dims shrink by window-1 per axis.
inline std::vector<double> filter_valid(std::vector<double> f, dims3 d, const std::vector<double>& w) {
  const std::size_t k = w.size();
  for (int a = 0; a < 3; ++a) {
    dims3 od = d;
    od[a] = d[a] - k + 1;
    std::vector<double> out(voxel_count(od), 0.0);
    const std::array<std::size_t, 3> in_stride{d[1] * d[2], d[2], 1};
    std::size_t n = 0;
    for (std::size_t z = 0; z < od[0]; ++z)
      for (std::size_t y = 0; y < od[1]; ++y)
        for (std::size_t x = 0; x < od[2]; ++x) {
          const std::size_t base = z * in_stride[0] + y * in_stride[1] + x;
          double acc = 0.0;
          for (std::size_t t = 0; t < k; ++t) acc += w[t] * f[base + t * in_stride[a]];
          out[n++] = acc;
        }
    f = std::move(out);
    d = od;
  }
  return f;
}

}  // namespace detail

/// Mean local SSIM over every window position fully inside the volume.
inline double ssim3d(const volume& ref, const volume& test, const ssim_options& opt = {}) {
  detail::require_same_dims(ref, test, "ssim3d");
  for (std::size_t n : ref.dims())
    detail::require(n >= opt.window, "ssim3d: volume " + to_string(ref.dims()) + " smaller than the " +
                                         std::to_string(opt.window) + "^3 window");
  const auto w = ssim_window_1d(opt);
  const std::size_t n = ref.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = ref.data()[i];
    y[i] = test.data()[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto& d = ref.dims();
  const auto mx = detail::filter_valid(std::move(x), d, w), my = detail::filter_valid(std::move(y), d, w);
  const auto sxx = detail::filter_valid(std::move(xx), d, w), syy = detail::filter_valid(std::move(yy), d, w);
  const auto sxy = detail::filter_valid(std::move(xy), d, w);
  const double c1 = std::pow(opt.k1 * opt.data_range, 2), c2 = std::pow(opt.k2 * opt.data_range, 2);
  double acc = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
    acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return acc / static_cast<double>(mx.size());
}

/// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dice(const mask& a, const mask& b) {
  detail::require_same_dims(a, b, "dice");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a.data()[i];
    nb += b.data()[i];
    inter += a.data()[i] & b.data()[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

/// Foreground voxels with a background 6-neighbour or on the volume edge.
inline std::vector<dims3> boundary_voxels(const mask& m) {
  const auto& d = m.dims();
  std::vector<dims3> out;
  for (std::size_t z = 0; z < d[0]; ++z)
    for (std::size_t y = 0; y < d[1]; ++y)
      for (std::size_t x = 0; x < d[2]; ++x) {
        if (!m(z, y, x)) continue;
        const bool edge = z == 0 || y == 0 || x == 0 || z + 1 == d[0] || y + 1 == d[1] || x + 1 == d[2];
        if (edge || !m(z - 1, y, x) || !m(z + 1, y, x) || !m(z, y - 1, x) || !m(z, y + 1, x) || !m(z, y, x - 1) ||
            !m(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

namespace detail {

/// Number of voxels in `from` with some voxel of `to_grid` within tau mm.
/// Exhaustive over the tau-box around each voxel, so distances are exact.
inline std::size_t count_within(const std::vector<dims3>& from, const std::vector<std::uint8_t>& to_grid, const dims3& d,
                                 const vec3& sp, double tau) {
  std::array<std::ptrdiff_t, 3> r{};
  for (int a = 0; a < 3; ++a) r[a] = static_cast<std::ptrdiff_t>(std::floor(tau / sp[a]));
  std::size_t hits = 0;
  for (const auto& p : from) {
    bool found = false;
    const auto pz = static_cast<std::ptrdiff_t>(p[0]), py = static_cast<std::ptrdiff_t>(p[1]),
               px = static_cast<std::ptrdiff_t>(p[2]);
    for (std::ptrdiff_t z = std::max<std::ptrdiff_t>(0, pz - r[0]);
         !found && z <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(d[0]) - 1, pz + r[0]); ++z)
      for (std::ptrdiff_t y = std::max<std::ptrdiff_t>(0, py - r[1]);
           !found && y <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(d[1]) - 1, py + r[1]); ++y)
        for (std::ptrdiff_t x = std::max<std::ptrdiff_t>(0, px - r[2]);
             !found && x <= std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(d[2]) - 1, px + r[2]); ++x) {
          if (!to_grid[(static_cast<std::size_t>(z) * d[1] + static_cast<std::size_t>(y)) * d[2] + static_cast<std::size_t>(x)])
            continue;
          const double dz = static_cast<double>(z - pz) * sp[0], dy = static_cast<double>(y - py) * sp[1],
                       dx = static_cast<double>(x - px) * sp[2];
          if (std::sqrt(dz * dz + dy * dy + dx * dx) <= tau) found = true;
        }
    hits += found;
  }
  return hits;
}

}  // namespace detail

/// Normalized surface distance at tolerance tau (mm): the fraction of both
/// boundaries lying within tau of the other boundary.
inline double nsd(const mask& a, const mask& b, double tau) {
  detail::require_same_dims(a, b, "nsd");
  for (int i = 0; i < 3; ++i)
    detail::require(std::fabs(a.spacing()[i] - b.spacing()[i]) <= 1e-6 * a.spacing()[i], "nsd: voxel spacing mismatch");
  detail::require(tau > 0.0, "nsd: tolerance must be positive");
  const auto sa = boundary_voxels(a), sb = boundary_voxels(b);
  if (sa.empty() && sb.empty()) return 1.0;
  if (sa.empty() || sb.empty()) return 0.0;
  auto as_grid = [&](const std::vector<dims3>& s) {
    std::vector<std::uint8_t> g(a.size(), 0);
    for (const auto& p : s) g[a.index(p[0], p[1], p[2])] = 1;
    return g;
  };
  const std::size_t ab = detail::count_within(sa, as_grid(sb), a.dims(), a.spacing(), tau);
  const std::size_t ba = detail::count_within(sb, as_grid(sa), a.dims(), a.spacing(), tau);
  return static_cast<double>(ab + ba) / static_cast<double>(sa.size() + sb.size());
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test

inline constexpr std::size_t kWilcoxonExactMax = 25;

struct wilcoxon_result {
  enum class method_kind { exact, normal_approx };
  std::size_t n_effective = 0;
  double w = 0.0;  // min(W+, W-)
  double w_plus = 0.0, w_minus = 0.0;
  double p_two_sided = 1.0;
  method_kind method = method_kind::exact;
  double z = 0.0;  // normal approximation only
};

inline const char* method_name(wilcoxon_result::method_kind m) {
  return m == wilcoxon_result::method_kind::exact ? "exact" : "normal_approx";
}

/// Mid-ranks of |d| doubled so that tied ranks stay integral.
inline std::vector<std::uint64_t> doubled_midranks(const std::vector<double>& absd) {
  const std::size_t n = absd.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return absd[i] < absd[j]; });
  std::vector<std::uint64_t> r2(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && absd[order[j + 1]] == absd[order[i]]) ++j;
    // ranks i+1 .. j+1 share (i+1 + j+1)/2; doubled: i + j + 2
    for (std::size_t k = i; k <= j; ++k) r2[order[k]] = i + j + 2;
    i = j + 1;
  }
  return r2;
}

/// Paired two-sided signed-rank test on x - y. Zero differences are dropped.
/// Exact null distribution (all 2^n sign assignments over the realized ranks,
/// ties included) up to n = 25, otherwise a tie-corrected normal
/// approximation with continuity correction.
inline wilcoxon_result wilcoxon_signed_rank(const std::vector<double>& x, const std::vector<double>& y) {
  detail::require(x.size() == y.size(), "wilcoxon: samples differ in length (" + std::to_string(x.size()) + " vs " +
                                            std::to_string(y.size()) + ")");
  detail::require(!x.empty(), "wilcoxon: empty samples");
  std::vector<double> absd;
  std::vector<bool> positive;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    detail::require(std::isfinite(d), "wilcoxon: non-finite difference");
    if (d == 0.0) continue;
    absd.push_back(std::fabs(d));
    positive.push_back(d > 0.0);
  }
  detail::require(!absd.empty(), "wilcoxon: undefined, every paired difference is zero");
  const std::size_t n = absd.size();
  const auto r2 = doubled_midranks(absd);
  std::uint64_t wp2 = 0, wm2 = 0;
  for (std::size_t i = 0; i < n; ++i) (positive[i] ? wp2 : wm2) += r2[i];

  wilcoxon_result res;
  res.n_effective = n;
  res.w_plus = static_cast<double>(wp2) / 2.0;
  res.w_minus = static_cast<double>(wm2) / 2.0;
  res.w = std::min(res.w_plus, res.w_minus);
  const std::uint64_t w2 = std::min(wp2, wm2);

  if (n <= kWilcoxonExactMax) {
    res.method = wilcoxon_result::method_kind::exact;
    const std::uint64_t total = wp2 + wm2;
    std::vector<std::uint64_t> count(total + 1, 0);
    count[0] = 1;
    for (std::uint64_t r : r2)
      for (std::uint64_t s = total; s >= r; --s) {
        count[s] += count[s - r];
        if (s == r) break;
      }
    std::uint64_t tail = 0;
    for (std::uint64_t s = 0; s <= w2; ++s) tail += count[s];
    res.p_two_sided = std::min(1.0, 2.0 * static_cast<double>(tail) / std::ldexp(1.0, static_cast<int>(n)));
  } else {
    res.method = wilcoxon_result::method_kind::normal_approx;
    const double nn = static_cast<double>(n);
    const double mean = nn * (nn + 1.0) / 4.0;
    double tie = 0.0;
    std::vector<double> sorted = absd;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
      const double t = static_cast<double>(j - i + 1);
      tie += t * t * t - t;
      i = j + 1;
    }
    const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie / 48.0;
    res.z = (std::fabs(res.w_plus - mean) - 0.5) / std::sqrt(var);
    res.p_two_sided = std::min(1.0, std::erfc(res.z / std::sqrt(2.0)));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Reports

struct metric_row {
  std::string case_id;
  double psnr = std::numeric_limits<double>::quiet_NaN();
  double ssim = std::numeric_limits<double>::quiet_NaN();
  double dice = std::numeric_limits<double>::quiet_NaN();
  double nsd = std::numeric_limits<double>::quiet_NaN();
};

struct metric_summary {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double sd = std::numeric_limits<double>::quiet_NaN();
  std::size_t n = 0;
};

/// Mean and sample standard deviation over the non-NaN values.
inline metric_summary summarize(const std::vector<double>& v) {
  metric_summary s;
  double acc = 0.0;
  for (double x : v)
    if (!std::isnan(x)) {
      acc += x;
      ++s.n;
    }
  if (s.n == 0) return s;
  s.mean = acc / static_cast<double>(s.n);
  double ss = 0.0;
  for (double x : v)
    if (!std::isnan(x)) ss += (x - s.mean) * (x - s.mean);
  s.sd = s.n > 1 ? std::sqrt(ss / static_cast<double>(s.n - 1)) : 0.0;
  return s;
}

struct metric_report {
  std::vector<metric_row> rows;
  double tau_mm = std::numeric_limits<double>::quiet_NaN();

  metric_summary summary(double metric_row::*field) const {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.*field);
    return summarize(v);
  }

  /// case,psnr,ssim,dice,nsd rows followed by `mean` and `sd` rows; empty
  /// cells for metrics that were not computed.
  void write_csv(std::ostream& os) const {
    auto cell = [](double v) { return std::isnan(v) ? std::string{} : (std::isinf(v) ? std::string(v > 0 ? "inf" : "-inf") : format_double(v)); };
    if (!std::isnan(tau_mm)) os << "# nsd_tau_mm=" << format_double(tau_mm) << '\n';
    os << "case,psnr,ssim,dice,nsd\n";
    for (const auto& r : rows)
      os << r.case_id << ',' << cell(r.psnr) << ',' << cell(r.ssim) << ',' << cell(r.dice) << ',' << cell(r.nsd) << '\n';
    const std::array<double metric_row::*, 4> fields{&metric_row::psnr, &metric_row::ssim, &metric_row::dice, &metric_row::nsd};
    os << "mean";
    for (auto f : fields) os << ',' << cell(summary(f).mean);
    os << "\nsd";
    for (auto f : fields) os << ',' << cell(summary(f).sd);
    os << '\n';
  }
};

/// Reads a single-column CSV with a header line.
inline std::vector<double> read_value_column(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path);
  std::string line;
  std::vector<double> out;
  bool header = true;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    if (header) {
      header = false;
      continue;
    }
    double v = 0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc{} || res.ptr != t.data() + t.size())
      throw data_error(path + ":" + std::to_string(lineno) + ": not a number: '" + t + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace phasefuse
