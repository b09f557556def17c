#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "nlden/autograd.hpp"

namespace nlden {

// Per-parameter Adam moments. Moments are stored in f32 and updated in f64.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t t = 0;
  ParamMap<float> m;
  ParamMap<float> v;
};

// One bias-corrected Adam update. A non-finite gradient refuses the whole
// step: nothing in params or state changes.
inline void adam_step(ParamMap<float>& params, const Gradients<float>& grads, AdamState& st, double lr) {
  if (!(lr > 0)) throw ContractError("adam learning rate must be positive");
  for (const auto& [name, p] : params) {
    auto g = grads.find(name);
    if (g == grads.end()) throw ContractError("no gradient for parameter '" + name + "'");
    if (g->second.shape() != p.shape()) throw DimensionError("gradient shape mismatch for '" + name + "'");
    if (!g->second.all_finite()) throw NumericError("non-finite gradient for '" + name + "', step refused");
  }
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, double(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, double(st.t));
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = st.m.try_emplace(name, p.shape()).first->second;
    auto& v = st.v.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i];
      const double mi = st.beta1 * double(m[i]) + (1.0 - st.beta1) * gi;
      const double vi = st.beta2 * double(v[i]) + (1.0 - st.beta2) * gi * gi;
      m[i] = float(mi);
      v[i] = float(vi);
      const double step = lr * (mi / bc1) / (std::sqrt(vi / bc2) + st.eps);
      p[i] = float(double(p[i]) - step);
    }
  }
}

}  // namespace nlden
