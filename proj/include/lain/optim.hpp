#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "lain/tensor.hpp"

namespace lain {

struct OptimizerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First / second moments per parameter, in the order the parameters were
/// first stepped.
struct OptimizerState {
  AdamConfig cfg;
  std::int64_t t = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> m, v;
};

/// One Adam update over the trainable parameters.
///   m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
inline void adam_step(std::span<Parameter* const> params, OptimizerState& s) {
  std::size_t slot = 0;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    if (!p->tensor.has_grad() || p->tensor.grad().size() != p->tensor.size()) {
      throw OptimizerError("missing gradient for parameter " + p->name);
    }
  }
  if (s.names.empty()) {
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      s.names.push_back(p->name);
      s.m.emplace_back(p->tensor.size(), 0.0);
      s.v.emplace_back(p->tensor.size(), 0.0);
    }
  }
  ++s.t;
  const auto& c = s.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.t));
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    if (slot >= s.names.size() || s.names[slot] != p->name || s.m[slot].size() != p->tensor.size()) {
      throw OptimizerError("optimizer state does not match parameter " + p->name);
    }
    auto& m = s.m[slot];
    auto& v = s.v[slot];
    auto& x = p->tensor.data();
    const auto& g = p->tensor.grad();
    for (std::size_t i = 0; i < x.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      x[i] -= c.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.eps);
    }
    ++slot;
  }
}

inline void adam_step(ParameterStore& store, OptimizerState& s) {
  std::vector<Parameter*> ps;
  store.for_each([&](Parameter& p) { ps.push_back(&p); });
  adam_step(ps, s);
}

}  // namespace lain
