#pragma once

#include <gtest/gtest.h>

#include <functional>

#include "xres/gradcheck.hpp"
#include "xres/ops.hpp"
#include "xres/rng.hpp"

namespace xres::test {

template <class T = double>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(scale * rng.normal());
  t.set_requires_grad(grad);
  return t;
}

// Checks d/dx Σ r ⊙ op(x) for every element of x against central differences,
// with r a fixed random projection.
inline double op_grad_error(const std::function<Tensor<double>(const Tensor<double>&)>& op, Tensor<double> x,
                            std::uint64_t seed = 9, double eps = 1e-6) {
  Rng rng(seed);
  Tensor<double> probe_shape;
  {
    NoGradScope<double> ng;
    probe_shape = op(x);
  }
  auto r = random_tensor(probe_shape.shape(), rng, 1.0, false);
  auto objective = [&] { return sum(mul(op(x), r)); };
  x.clear_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto l = objective();
    backward(l);
  }
  const auto res = finite_diff_check<double>([&] { return objective().item(); }, x, eps);
  return res.max_rel_err;
}

}  // namespace xres::test
