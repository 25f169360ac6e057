#pragma once

// Central finite-difference checks against tape gradients.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "xres/tensor.hpp"

namespace xres {

struct GradProbe {
  std::size_t tensor = 0;  // index into the probed tensor list
  std::size_t index = 0;   // flat element index
};

// central: (f(θ+ε) − f(θ−ε)) / 2ε
// richardson: (4·D(ε/2) − D(ε)) / 3 over two central differences, cancelling
// the ε² truncation term so larger steps stay accurate.
enum class FdScheme { central, richardson };

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t worst = 0;  // probe position of max_rel_err
  std::vector<double> analytic;
  std::vector<double> numeric;
};

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

// Compares `analytic[p]` with (f(θ+ε) − f(θ−ε)) / 2ε for each probe p, where
// θ is element probes[p].index of tensors[probes[p].tensor]. `f` must be a
// deterministic forward-only evaluation reading the tensors' current data.
template <class T, class F>
GradCheckResult finite_diff_check(F&& f, std::span<Tensor<T>> tensors, std::span<const GradProbe> probes,
                                  std::span<const double> analytic, double eps,
                                  FdScheme scheme = FdScheme::central) {
  if constexpr (std::is_same_v<T, double>) {
    if (eps < 1e-6 || eps > 1e-3) throw ContractError("finite_diff_check: eps outside [1e-6, 1e-3] for f64");
  }
  if (analytic.size() != probes.size()) throw ContractError("finite_diff_check: one analytic value per probe");
  NoGradScope<T> no_grad;
  GradCheckResult res;
  res.analytic.assign(analytic.begin(), analytic.end());
  for (std::size_t p = 0; p < probes.size(); ++p) {
    auto data = tensors[probes[p].tensor].mutable_data();
    T& slot = data[probes[p].index];
    const T saved = slot;
    auto central = [&](double h) {
      slot = saved + static_cast<T>(h);
      const double fp = static_cast<double>(f());
      slot = saved - static_cast<T>(h);
      const double fm = static_cast<double>(f());
      slot = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericError("finite_diff_check: non-finite objective at probe " + std::to_string(p));
      return (fp - fm) / (2.0 * h);
    };
    const double num =
        scheme == FdScheme::central ? central(eps) : (4.0 * central(eps / 2) - central(eps)) / 3.0;
    res.numeric.push_back(num);
    const double e = relative_error(analytic[p], num);
    if (p == 0 || e > res.max_rel_err) {
      res.max_rel_err = e;
      res.worst = p;
    }
  }
  return res;
}

// Single-tensor convenience: probes every element (or `indices` when given)
// and takes analytic values from the tensor's gradient buffer.
template <class T, class F>
GradCheckResult finite_diff_check(F&& f, Tensor<T>& theta, double eps, std::vector<std::size_t> indices = {}) {
  if (indices.empty())
    for (std::size_t i = 0; i < theta.numel(); ++i) indices.push_back(i);
  std::vector<GradProbe> probes;
  std::vector<double> analytic;
  for (std::size_t i : indices) {
    probes.push_back({0, i});
    analytic.push_back(theta.has_grad() ? static_cast<double>(theta.grad()[i]) : 0.0);
  }
  std::vector<Tensor<T>> ts{theta};
  return finite_diff_check<T>(f, std::span<Tensor<T>>(ts), probes, analytic, eps);
}

}  // namespace xres
