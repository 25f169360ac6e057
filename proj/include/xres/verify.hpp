#pragma once

// Self-check suites: OT against the Hungarian oracle, BRA against dense
// attention, end-to-end gradients against finite differences, and CA/VA
// mask invariants.

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "xres/anlc.hpp"
#include "xres/gradcheck.hpp"
#include "xres/model.hpp"
#include "xres/ot.hpp"

namespace xres {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

inline SuiteResult timed(const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{name, false, "", 0};
  try {
    auto [ok, detail] = body();
    r.passed = ok;
    r.detail = detail;
  } catch (const std::exception& e) {
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ------------------------------------------------------------------------ OT

struct OtStats {
  std::size_t trials = 0;
  double max_cost_gap = 0;      // |cost(exact) − cost(oracle)|
  double max_marginal_err = 0;  // over row and column sums
};

inline OtStats ot_oracle_stats(std::size_t trials, std::uint64_t seed) {
  Rng rng(seed);
  OtStats s;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t n = 2 + rng.below(7);  // 2..8
    CostMatrix c{n, std::vector<double>(n * n)};
    // Mix of continuous and heavily tied costs.
    const bool tied = rng.bernoulli(0.3);
    for (auto& v : c.c) v = tied ? static_cast<double>(rng.below(3)) : rng.uniform();
    const auto exact = solve_exact(c);
    const auto oracle = solve_oracle(c);
    s.max_cost_gap = std::max(s.max_cost_gap, std::abs(exact.cost - oracle.cost));
    const auto rs = exact.row_sums(), cs = exact.col_sums();
    for (std::size_t i = 0; i < n; ++i)
      s.max_marginal_err =
          std::max({s.max_marginal_err, std::abs(rs[i] - exact.a[i]), std::abs(cs[i] - exact.b[i])});
    ++s.trials;
  }
  return s;
}

inline SuiteResult verify_ot(std::size_t trials = 200, std::uint64_t seed = 1) {
  return timed("ot_oracle", [=] {
    const auto s = ot_oracle_stats(trials, seed);
    std::ostringstream os;
    os << s.trials << " instances, max cost gap " << s.max_cost_gap << ", max marginal error " << s.max_marginal_err;
    return std::pair{s.max_cost_gap <= 1e-9 && s.max_marginal_err <= 1e-8, os.str()};
  });
}

// ----------------------------------------------------------------------- BRA

// Max |bra_forward − dense attention| with k = S² over random inputs.
template <class T>
double bra_dense_gap(std::size_t trials, std::uint64_t seed, std::size_t hw = 16, std::size_t c = 8,
                     std::size_t s = 4, std::size_t heads = 2) {
  Rng rng(seed);
  double gap = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    ParamSet<T> ps;
    BraParams<T> p(ps, "bra", c, rng);
    // Non-zero biases so every parameter participates.
    for (auto& e : ps.entries())
      for (auto& v : e.tensor.mutable_data()) v += static_cast<T>(0.05 * rng.normal());
    Tensor<T> x({hw, hw, c});
    for (auto& v : x.mutable_data()) v = static_cast<T>(rng.normal());
    const auto a = bra_forward(x, p, s, s * s, heads);
    const auto b = dense_attention_forward(x, p, heads);
    for (std::size_t i = 0; i < a.numel(); ++i)
      gap = std::max(gap, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return gap;
}

inline SuiteResult verify_bra(std::size_t trials = 20, std::uint64_t seed = 2) {
  return timed("bra_dense", [=] {
    const double g32 = bra_dense_gap<float>(trials, seed), g64 = bra_dense_gap<double>(trials, seed);
    std::ostringstream os;
    os << trials << " inputs 16x16x8, S=4, k=16: max abs gap f32 " << g32 << ", f64 " << g64;
    return std::pair{g32 <= 1e-5 && g64 <= 1e-10, os.str()};
  });
}

// ----------------------------------------------------------------- gradients

struct GradientCheckSetup {
  std::size_t size = 32, channels = 8, classes = 4;
  std::size_t probes = 25;
  double eps = 1e-4;
  std::uint64_t seed = 1;
  bool flip_sign = false;  // corrupts the analytic gradient (sensitivity fixture)
};

// ∂L^AnN/∂θ on a tiny f64 model. The CA/VA mask is a fixed checkerboard of
// 16-pixel blocks, W^c, the DVA assignment and the BRA routing are computed
// once and held constant across probes.
inline GradCheckResult anlc_gradient_check(const GradientCheckSetup& g) {
  ModelConfig mc;
  mc.size = g.size;
  mc.channels = g.channels;
  mc.classes = g.classes;
  Model<double> model(mc, g.seed);
  Rng rng(g.seed + 1);
  Tensor<double> x({g.size, g.size, mc.in_channels});
  for (auto& v : x.mutable_data()) v = rng.normal();
  LabelRaster y(g.size, g.size);
  for (auto& v : y.labels) v = static_cast<std::uint8_t>(rng.below(g.classes));

  RoutingFreeze freeze;
  AnlcConstants<double> k;
  {
    NoGradScope<double> ng;
    const auto fa = model.forward(x);
    k = anlc_constants(fa.logits, y);
    const std::size_t gw = g.size / kTargetGrid;
    for (std::size_t i = 0; i < k.mask.block.size(); ++i) k.mask.block[i] = ((i / gw) + (i % gw)) % 2 == 0;
    std::size_t on = 0;
    for (std::size_t py = 0; py < g.size; ++py)
      for (std::size_t px = 0; px < g.size; ++px)
        on += k.mask.pixel[py * g.size + px] = k.mask.block[(py / kTargetGrid) * gw + px / kTargetGrid];
    k.mask.ca_fraction = static_cast<double>(on) / static_cast<double>(g.size * g.size);
    k.dva = dva_assignment(fa.logits, k.mask);
  }

  model.params().zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    freeze.rewind();
    auto l = anlc_loss(model.forward(x), y, &k);
    backward(l.total);
  }

  std::vector<Tensor<double>> tensors;
  std::size_t total = 0;
  for (const auto& e : model.params().entries()) {
    tensors.push_back(e.tensor);
    total += e.tensor.numel();
  }
  std::vector<GradProbe> probes;
  std::vector<double> analytic;
  for (std::size_t p = 0; p < g.probes; ++p) {
    std::size_t flat = rng.below(total), t = 0;
    while (flat >= tensors[t].numel()) flat -= tensors[t++].numel();
    probes.push_back({t, flat});
    const double a = tensors[t].has_grad() ? tensors[t].grad()[flat] : 0.0;
    analytic.push_back(g.flip_sign ? -a : a);
  }
  auto f = [&] {
    freeze.rewind();
    return anlc_loss(model.forward(x), y, &k).l_ann;
  };
  return finite_diff_check<double>(f, std::span<Tensor<double>>(tensors), probes, analytic, g.eps);
}

inline SuiteResult verify_gradients(GradientCheckSetup g = {}) {
  return timed("gradient", [=] {
    const auto r = anlc_gradient_check(g);
    std::ostringstream os;
    os << g.probes << " parameters of W=" << g.size << " C=" << g.channels << " model: max rel err " << r.max_rel_err
       << " (analytic " << r.analytic[r.worst] << ", numeric " << r.numeric[r.worst] << ")";
    return std::pair{r.max_rel_err <= 1e-3, os.str()};
  });
}

// --------------------------------------------------------------------- masks

inline TransportPlan permutation_plan(const std::vector<std::size_t>& perm) {
  const std::size_t n = perm.size();
  TransportPlan p;
  p.n = n;
  p.gamma.assign(n * n, 0.0);
  p.a.assign(n, 1.0 / static_cast<double>(n));
  p.b = p.a;
  for (std::size_t i = 0; i < n; ++i) p.gamma[i * n + perm[i]] = 1.0 / static_cast<double>(n);
  return p;
}

struct MaskChecks {
  double identity = 0;      // γ = I/N
  double antidiagonal = 0;  // γ = antidiagonal/N
  double matched = 0;       // Ô = Ŷ with distinct rows
};

inline MaskChecks mask_checks(std::uint64_t seed = 3) {
  MaskChecks m;
  const std::size_t n = 16, side = 64;
  std::vector<std::size_t> id(n), anti(n);
  for (std::size_t i = 0; i < n; ++i) {
    id[i] = i;
    anti[i] = n - 1 - i;
  }
  m.identity = cava_mask(permutation_plan(id), side, side).ca_fraction;
  m.antidiagonal = cava_mask(permutation_plan(anti), side, side).ca_fraction;

  // Pooled rows from a random label map whose blocks all differ; predictions
  // pool to exactly the same rows.
  Rng rng(seed);
  std::vector<double> rows;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> r(4);
    double s = 0;
    for (auto& v : r) s += v = rng.uniform(0.05, 1.0);
    for (auto& v : r) rows.push_back(v / s);
  }
  const auto plan = solve_exact(cost_matrix(rows, rows, 4));
  m.matched = cava_mask(plan, side, side).ca_fraction;
  return m;
}

inline SuiteResult verify_masks() {
  return timed("mask", [] {
    const auto m = mask_checks();
    std::ostringstream os;
    os << "CA fraction: identity " << m.identity << ", antidiagonal " << m.antidiagonal << ", matched rows "
       << m.matched;
    return std::pair{m.identity == 1.0 && m.antidiagonal == 0.0 && m.matched == 1.0, os.str()};
  });
}

inline std::vector<SuiteResult> verify_all() {
  return {verify_ot(), verify_bra(), verify_gradients(), verify_masks()};
}

}  // namespace xres
