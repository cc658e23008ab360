#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lain/autodiff.hpp"

namespace lain {

/// Raised when the objective is not a deterministic function of the
/// parameters, which makes finite differencing meaningless.
struct OracleInvalidError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GradCheckOptions {
  double h = 1e-4;
  double tol = 1e-4;
  // Denominator floor for the relative error, so that gradients which are
  // zero up to round-off are compared absolutely.
  double abs_floor = 1e-6;
  // 0 checks every scalar. Otherwise each tensor contributes its largest
  // |analytic| entries plus a seeded random sample, this many in total.
  std::size_t max_per_param = 0;
  std::uint64_t seed = 0;
  // When f(x+h) or f(x-h) lands on a different smooth piece than f(x) (a
  // ReLU, clamp or top-k decision flipped), the step is divided by 10 until
  // the three evaluations agree or it falls below min_step.
  bool refine_kinks = true;
  double min_step = 1e-9;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  double step = 0.0;    // step actually used
  bool kink = false;    // the h window crossed a non-smooth point
  bool ok = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;

  std::size_t failures() const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return !e.ok; }));
  }
  bool passed() const { return failures() == 0; }
  std::size_t kinks() const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.kink; }));
  }
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
  const GradCheckEntry* worst() const {
    if (entries.empty()) return nullptr;
    return &*std::max_element(entries.begin(), entries.end(),
                              [](const auto& a, const auto& b) { return a.rel_error < b.rel_error; });
  }
};

/// Builds the scalar objective on a fresh tape.
using Objective = std::function<Var(Tape&)>;

inline double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {
inline double evaluate(const Objective& f) {
  Tape tape;
  return tape.item(f(tape));
}

struct Probe {
  double value;
  std::uint64_t branches;
};

inline Probe probe(const Objective& f) {
  Tape tape;
  const double v = tape.item(f(tape));
  return {v, tape.branch_digest()};
}

inline std::vector<std::size_t> pick_indices(const std::vector<double>& grad, std::size_t limit, Rng& rng) {
  const std::size_t n = grad.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (limit == 0 || limit >= n) return all;
  const std::size_t top = limit / 2;
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top), all.end(),
                    [&](std::size_t a, std::size_t b) { return std::abs(grad[a]) > std::abs(grad[b]); });
  std::vector<std::size_t> chosen(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(top));
  std::vector<std::size_t> rest(all.begin() + static_cast<std::ptrdiff_t>(top), all.end());
  rng.shuffle(rest);
  chosen.insert(chosen.end(), rest.begin(), rest.begin() + static_cast<std::ptrdiff_t>(limit - top));
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}
}  // namespace detail

/// Compares reverse-mode gradients of `f` with central differences
/// (f(x+h) - f(x-h)) / 2h for the trainable entries of `params`.
inline GradCheckReport grad_check(const Objective& f, const std::vector<Parameter*>& params,
                                  const GradCheckOptions& opt = {}) {
  const auto base = detail::probe(f);
  const double f0 = base.value;
  const double f1 = detail::evaluate(f);
  if (f0 != f1) {
    throw OracleInvalidError("objective is not deterministic (" + std::to_string(f0) + " vs " + std::to_string(f1) +
                             "); disable dropout and sampling before checking gradients");
  }

  for (Parameter* p : params) p->tensor.zero_grad();
  {
    Tape tape;
    Var out = f(tape);
    tape.backward(out);
  }

  GradCheckReport report;
  report.tol = opt.tol;
  Rng rng(opt.seed);
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    const std::vector<double> analytic = p->tensor.grad();
    for (std::size_t i : detail::pick_indices(analytic, opt.max_per_param, rng)) {
      double& x = p->tensor.data()[i];
      const double saved = x;
      GradCheckEntry e;
      e.name = p->name;
      e.index = i;
      e.analytic = analytic[i];
      for (double h = opt.h;; h /= 10.0) {
        x = saved + h;
        const auto fp = detail::probe(f);
        x = saved - h;
        const auto fm = detail::probe(f);
        x = saved;
        const bool smooth = fp.branches == base.branches && fm.branches == base.branches;
        e.numeric = (fp.value - fm.value) / (2.0 * h);
        e.step = h;
        if (smooth || !opt.refine_kinks || h / 10.0 < opt.min_step) break;
        e.kink = true;
      }
      e.rel_error = relative_error(e.analytic, e.numeric, opt.abs_floor);
      e.ok = e.rel_error <= opt.tol;
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

inline GradCheckReport grad_check(const Objective& f, ParameterStore& store, const GradCheckOptions& opt = {}) {
  std::vector<Parameter*> ps;
  store.for_each([&](Parameter& p) { ps.push_back(&p); });
  return grad_check(f, ps, opt);
}

}  // namespace lain
