#pragma once

// The full gradient suite: every differentiable op plus the complete network,
// each checked against central differences in float64 over several seeds.

#include <chrono>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "phasefuse/gradcheck.hpp"
#include "phasefuse/loss.hpp"
#include "phasefuse/model.hpp"
#include "phasefuse/ops.hpp"

namespace phasefuse {

struct gradient_suite_entry {
  std::string op;
  std::uint64_t seed = 0;
  double tol = 0.0;
  grad_check_report report;
  bool passed = false;
};

struct gradient_suite_result {
  std::vector<gradient_suite_entry> entries;
  double seconds = 0.0;
  bool passed = true;

  /// Largest error over entries whose name does (model) or does not (ops)
  /// equal "pfnl_forward".
  double max_rel_error(bool model) const {
    double m = 0.0;
    for (const auto& e : entries)
      if ((e.op == "pfnl_forward") == model) m = std::max(m, e.report.max_rel_error);
    return m;
  }
};

struct gradient_suite_options {
  std::size_t seeds = 3;
  double eps = 1e-3;
  double op_tol = 1e-4;
  double model_tol = 1e-3;
  bool include_model = true;
};

namespace detail {

using suite_fn = std::function<tensord(const std::vector<tensord>&)>;

struct suite_case {
  std::string op;
  suite_fn f;
  std::vector<tensord> inputs;
  bool kinks = false;
};

inline std::vector<suite_case> op_cases(std::uint64_t s) {
  auto R = [](shape_t sh, std::uint64_t seed, double min_abs = 0.0) { return random_tensor<double>(std::move(sh), seed, true, min_abs); };
  auto readout = [s](tensord y) { return random_readout(y, 1000 + s); };
  std::vector<suite_case> c;
  c.push_back({"conv3d_3x3x3", [=](const auto& in) { return readout(conv3d(in[0], in[1], in[2])); },
               {R({1, 2, 4, 4, 4}, s), R({3, 2, 3, 3, 3}, s + 1), R({3}, s + 2)}});
  c.push_back({"conv3d_1x1x1", [=](const auto& in) { return readout(conv3d(in[0], in[1], in[2])); },
               {R({2, 3, 2, 3, 2}, s), R({4, 3, 1, 1, 1}, s + 1), R({4}, s + 2)}});
  c.push_back({"leaky_relu", [=](const auto& in) { return readout(leaky_relu(in[0])); }, {R({1, 2, 3, 3, 3}, s, 0.01)}, true});
  c.push_back({"add", [=](const auto& in) { return readout(add(in[0], in[1])); }, {R({1, 2, 3, 3, 3}, s), R({1, 2, 3, 3, 3}, s + 1)}});
  c.push_back({"mul", [=](const auto& in) { return readout(mul(in[0], in[1])); }, {R({1, 2, 3, 3, 3}, s), R({1, 2, 3, 3, 3}, s + 1)}});
  c.push_back({"scale", [=](const auto& in) { return readout(scale(in[0], -1.7)); }, {R({1, 2, 3, 3, 3}, s)}});
  c.push_back({"sum", [=](const auto& in) { return sum(mul(in[0], in[0])); }, {R({1, 1, 2, 3, 4}, s)}});
  c.push_back({"l1_loss", [](const auto& in) { return l1_loss(in[0], in[1]); }, {R({1, 1, 3, 3, 3}, s), R({1, 1, 3, 3, 3}, s + 1)}, true});
  c.push_back({"concat_channels", [=](const auto& in) { return readout(concat_channels(in)); },
               {R({2, 1, 2, 3, 2}, s), R({2, 2, 2, 3, 2}, s + 1)}});
  c.push_back({"slice_channels", [=](const auto& in) { return readout(slice_channels(in[0], 1, 2)); }, {R({2, 4, 2, 2, 2}, s)}});
  c.push_back({"voxel_shuffle", [=](const auto& in) { return readout(voxel_shuffle(in[0], 2)); }, {R({1, 16, 2, 1, 2}, s)}});
  c.push_back({"voxel_unshuffle", [=](const auto& in) { return readout(voxel_unshuffle(in[0], 2)); }, {R({1, 2, 4, 2, 4}, s)}});
  c.push_back({"trilinear_upsample", [=](const auto& in) { return readout(trilinear_upsample(in[0], 2)); }, {R({1, 2, 2, 3, 2}, s)}});
  c.push_back({"trilinear_resize", [=](const auto& in) { return readout(trilinear_resize(in[0], {5, 2, 7})); }, {R({2, 1, 3, 4, 3}, s)}});
  c.push_back({"subsample", [=](const auto& in) { return readout(subsample(in[0], 2)); }, {R({1, 2, 3, 4, 5}, s)}});
  c.push_back({"attention", [=](const auto& in) { return readout(attention(in[0], in[1], in[2])); },
               {R({1, 2, 2, 2, 2}, s), R({1, 2, 2, 2, 2}, s + 1), R({1, 3, 2, 2, 2}, s + 2)}});
  c.push_back({"nonlocal_attention",
               [=](const auto& in) {
                 const nonlocal_params<double> p{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8]};
                 return readout(nonlocal_attention(in[0], p, 64));
               },
               {R({1, 2, 2, 2, 2}, s), R({2, 2, 1, 1, 1}, s + 1), R({2}, s + 2), R({2, 2, 1, 1, 1}, s + 3), R({2}, s + 4),
                R({2, 2, 1, 1, 1}, s + 5), R({2}, s + 6), R({2, 2, 1, 1, 1}, s + 7), R({2}, s + 8)}});
  c.push_back({"sobel3d", [=](const auto& in) { return readout(sobel3d(in[0])); }, {R({1, 1, 3, 4, 5}, s)}});
  c.push_back({"combined_loss", [](const auto& in) { return combined_loss(in[0], in[1]); },
               {R({1, 1, 4, 4, 4}, s), R({1, 1, 4, 4, 4}, s + 1)}, true});
  return c;
}

/// Small network whose 2x2x2 inputs and He-initialized parameters are all
/// probed; biases are randomized so that no gradient is trivially zero.
inline suite_case model_case(std::uint64_t s) {
  const pfnl_config cfg{3, 4, 1, 2, 4096};
  const auto layout = parameter_layout(cfg);
  const auto ps = init_params<double>(cfg, s);
  std::vector<tensord> inputs;
  for (std::uint64_t k = 0; k < 3; ++k) inputs.push_back(random_tensor<double>({1, 1, 2, 2, 2}, 10 * s + k, true));
  for (const auto& [name, t] : ps)
    inputs.push_back(name.ends_with(".bias") ? random_tensor<double>(t.shape(), 1000 + 100 * s + inputs.size(), true, 0.0, 0.1)
                                             : t.clone(true));
  auto f = [cfg, layout, s](const std::vector<tensord>& in) {
    param_store<double> p;
    for (std::size_t i = 0; i < layout.size(); ++i) p.add(layout[i].first, in[3 + i]);
    return random_readout(pfnl_forward(p, cfg, in[0], in[1], in[2]), 77 + s);
  };
  return {"pfnl_forward", f, std::move(inputs), true};
}

}  // namespace detail

/// Runs every op case (and optionally the network) for seeds 0..n-1.
/// Coordinates whose stencil crosses an activation or L1 kink are skipped;
/// a case fails if more than 10% of its coordinates had to be skipped.
inline gradient_suite_result run_gradient_suite(const gradient_suite_options& opt = {},
                                                const std::function<void(const gradient_suite_entry&)>& on_entry = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  gradient_suite_result res;
  for (std::uint64_t s = 0; s < opt.seeds; ++s) {
    auto cases = detail::op_cases(s);
    if (opt.include_model) cases.push_back(detail::model_case(s));
    for (auto& c : cases) {
      grad_check_options o;
      o.eps = opt.eps;
      o.seed = s;
      o.skip_kink_crossings = c.kinks;
      const bool model = c.op == "pfnl_forward";
      o.tol = model ? opt.model_tol : opt.op_tol;
      if (model) o.abs_floor = 1e-4;
      gradient_suite_entry e;
      e.op = c.op;
      e.seed = s;
      e.tol = o.tol;
      e.report = grad_check(c.f, c.inputs, o);
      e.passed = e.report.passed && e.report.skipped * 10 <= e.report.checked + e.report.skipped;
      res.passed = res.passed && e.passed;
      if (on_entry) on_entry(e);
      res.entries.push_back(std::move(e));
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace phasefuse
