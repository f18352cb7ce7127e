#pragma once

// Central-difference verification of backward rules in float64.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "phasefuse/ops.hpp"
#include "phasefuse/rng.hpp"
#include "phasefuse/tensor.hpp"

namespace phasefuse {

struct grad_check_options {
  double eps = 1e-3;
  double tol = 1e-4;
  /// Denominator floor, so near-zero gradients are compared absolutely.
  double abs_floor = 1e-6;
  /// Coordinates probed per input; 0 probes all of them.
  std::size_t max_elements = 0;
  std::uint64_t seed = 0;
  /// Skip coordinates whose +-eps evaluations switch any piecewise-linear op
  /// (leaky_relu, l1_loss) to another piece; central differences straddling
  /// a kink do not estimate the derivative.
  bool skip_kink_crossings = false;
};

struct grad_check_entry {
  std::string name;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // kink crossings
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0, numeric = 0.0;  // at worst_index
  bool passed = true;
};

struct grad_check_report {
  std::vector<grad_check_entry> entries;
  double max_rel_error = 0.0;
  std::size_t checked = 0, skipped = 0;
  bool passed = true;

  std::string summary() const {
    std::ostringstream os;
    for (const auto& e : entries) {
      os << (e.passed ? "ok   " : "FAIL ") << e.name << ": max rel err " << e.max_rel_error << " over " << e.checked
         << " coords";
      if (e.skipped) os << " (" << e.skipped << " skipped at kinks)";
      os << " (worst #" << e.worst_index << ": analytic " << e.analytic << ", numeric " << e.numeric << ")\n";
    }
    return os.str();
  }
};

/// Compares analytic gradients of the scalar f(inputs) against central
/// differences for every input that requires grad. f must be deterministic.
template <class F>
grad_check_report grad_check(F&& f, std::vector<tensord> inputs, const grad_check_options& opt = {},
                             const std::vector<std::string>& names = {}) {
  for (auto& t : inputs) t.zero_grad();
  std::vector<std::uint8_t> base_branches, probe_branches;
  struct log_scope {
    explicit log_scope(std::vector<std::uint8_t>* l) : prev(detail::branch_log()) {
      if (l) l->clear();
      detail::branch_log() = l;
    }
    ~log_scope() { detail::branch_log() = prev; }
    std::vector<std::uint8_t>* prev;
  };
  {
    log_scope ls(opt.skip_kink_crossings ? &base_branches : nullptr);
    tensord out = f(inputs);
    backward(out);
  }
  auto eval = [&](std::vector<tensord>& in, bool& crossed) {
    if (!opt.skip_kink_crossings) return f(in).item();
    log_scope ls(&probe_branches);
    const double v = f(in).item();
    crossed = crossed || probe_branches != base_branches;
    return v;
  };
  grad_check_report report;
  counter_rng rng(opt.seed, 0x6c);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto& t = inputs[i];
    if (!t.requires_grad()) continue;
    grad_check_entry e;
    e.name = i < names.size() ? names[i] : "input" + std::to_string(i);
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());

    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opt.max_elements && coords.size() > opt.max_elements) {
      for (std::size_t k = 0; k < opt.max_elements; ++k)
        std::swap(coords[k], coords[k + rng.below(coords.size() - k)]);
      coords.resize(opt.max_elements);
    }

    no_grad_guard ng;
    for (std::size_t c : coords) {
      double& x = t.data()[c];
      const double saved = x;
      bool crossed = false;
      x = saved + opt.eps;
      const double fp = eval(inputs, crossed);
      x = saved - opt.eps;
      const double fm = eval(inputs, crossed);
      x = saved;
      if (crossed) {
        ++e.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[c];
      const double err = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), opt.abs_floor});
      if (err > e.max_rel_error || e.checked == 0) {
        e.max_rel_error = err;
        e.worst_index = c;
        e.analytic = a;
        e.numeric = numeric;
      }
      ++e.checked;
    }
    e.passed = e.max_rel_error < opt.tol && (e.checked > 0 || coords.empty());
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.checked += e.checked;
    report.skipped += e.skipped;
    report.passed = report.passed && e.passed;
    report.entries.push_back(e);
  }
  for (auto& t : inputs) t.zero_grad();
  return report;
}

/// Fixed random weighting that turns a tensor-valued op into a scalar:
/// sum(y * w) with w ~ N(0, 1) drawn from `seed`.
template <class T>
tensor<T> random_readout(const tensor<T>& y, std::uint64_t seed) {
  counter_rng rng(seed, 0x7e);
  std::vector<T> w(y.numel());
  for (auto& v : w) v = static_cast<T>(rng.normal());
  return sum(mul(y, tensor<T>(y.shape(), std::move(w))));
}

/// Standard-normal tensor, optionally kept at least `min_abs` away from 0.
template <class T>
tensor<T> random_tensor(shape_t shape, std::uint64_t seed, bool requires_grad = false, double min_abs = 0.0,
                        double stddev = 1.0) {
  counter_rng rng(seed, 0x52);
  std::vector<T> d(shape_numel(shape));
  for (auto& v : d) {
    double x = rng.normal() * stddev;
    if (min_abs > 0.0 && std::fabs(x) < min_abs) x = x < 0 ? x - min_abs : x + min_abs;
    v = static_cast<T>(x);
  }
  return tensor<T>(std::move(shape), std::move(d), requires_grad);
}

}  // namespace phasefuse
