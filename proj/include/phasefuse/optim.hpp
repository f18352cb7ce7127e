#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "phasefuse/error.hpp"
#include "phasefuse/tensor.hpp"

namespace phasefuse {

struct adam_config {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments per parameter, in param_store order.
struct adam_state {
  std::vector<std::vector<float>> m, v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update over every parameter, then zeroes grads.
/// Parameters that never received a gradient see g = 0.
template <class T>
void adam_step(param_store<T>& params, adam_state& st, const adam_config& cfg) {
  if (st.m.empty()) {
    for (auto& [_, p] : params) {
      st.m.emplace_back(p.numel(), 0.0f);
      st.v.emplace_back(p.numel(), 0.0f);
    }
  }
  detail::require(st.m.size() == params.size(), "adam_step: optimizer state does not match parameter count");
  for (auto& [name, p] : params)
    if (p.has_grad())
      for (T g : p.grad())
        if (!std::isfinite(g)) detail::fail("adam_step: non-finite gradient in '" + name + "'");
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  std::size_t k = 0;
  for (auto& [name, p] : params) {
    auto& m = st.m[k];
    auto& v = st.v[k];
    ++k;
    detail::require(m.size() == p.numel(), "adam_step: moment shape mismatch for '" + name + "'");
    const bool has = p.has_grad();
    auto data = p.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has ? static_cast<double>(p.grad()[i]) : 0.0;
      const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double step = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      data[i] = static_cast<T>(static_cast<double>(data[i]) - step);
    }
    p.zero_grad();
  }
}

}  // namespace phasefuse
