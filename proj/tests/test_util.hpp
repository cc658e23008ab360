#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lain/data.hpp"
#include "lain/grad_check.hpp"
#include "lain/model.hpp"

namespace lain::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Full central-difference check of every scalar.
inline GradCheckReport check_all(const Objective& f, const std::vector<Parameter*>& ps, double tol = 1e-6) {
  GradCheckOptions opt;
  opt.tol = tol;
  return grad_check(f, ps, opt);
}

/// A small generated bundle for tests that need realistic samples.
inline DatasetBundle small_bundle(std::size_t users = 120, std::uint64_t seed = 7, std::size_t items = 400) {
  GeneratorConfig g;
  g.n_users = users;
  g.n_items = items;
  g.seed = seed;
  return generate_synthetic(g);
}

inline ModelConfig small_model(const std::string& variant = "full") {
  ModelConfig c;
  c.d = 8;
  c.d_f = 4;
  c.hidden = 16;
  c.k = 2;
  c.short_window = 5;
  c.gsu_topk = 7;
  c.head_dims = {12, 6};
  return apply_variant(c, variant);
}

inline std::vector<const Sample*> pointers(const std::vector<Sample>& v, std::size_t n = SIZE_MAX) {
  std::vector<const Sample*> out;
  for (std::size_t i = 0; i < v.size() && i < n; ++i) out.push_back(&v[i]);
  return out;
}

}  // namespace lain::testing
