#pragma once

// Anti-noise loss.
//
// Coarse labels and softmax predictions are average-pooled onto a fixed
// 16-pixel grid; an exact OT plan between the two pooled row sets marks a
// cell confident (CA) when its row maximum sits on the diagonal. CA pixels get
// a confidence-weighted cross-entropy against the coarse labels; the
// remaining vague area (VA) only enters through a per-category variance term
// that pulls CA and VA feature means of the same category together.
//
// The mask, confidence weights and DVA category assignment are constants of
// the step: they are computed from forward values and carry no gradient.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xres/model.hpp"
#include "xres/ot.hpp"
#include "xres/raster.hpp"

namespace xres {

inline constexpr std::size_t kTargetGrid = 16;  // pooling window for the OT rows
inline constexpr std::size_t kDvaGrid = 8;      // DVA cell footprint in pixels

struct PooledTargets {
  std::size_t rows = 0, classes = 0;
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<double> yhat;  // rows × K, pooled one-hot coarse labels
  std::vector<double> ohat;  // rows × K, pooled softmax probabilities
};

struct CavaMask {
  std::size_t grid_h = 0, grid_w = 0;  // G^p extent
  std::size_t height = 0, width = 0;   // pixel extent
  std::vector<std::uint8_t> block;     // G^v == G^p in row-major order
  std::vector<std::uint8_t> pixel;     // 16× nearest-neighbour replication
  double ca_fraction = 0.0;
};

struct DvaAssignment {
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<int> category;        // per W/8 cell
  std::vector<std::uint8_t> in_ca;  // per W/8 cell
  double p_ca = 0.0, p_va = 0.0;    // pixel-level area proportions
};

template <class T>
struct AnlcConstants {
  PooledTargets pooled;
  TransportPlan plan;
  CavaMask mask;
  std::vector<T> confidence;  // W^c per pixel
  DvaAssignment dva;
};

template <class T>
struct LossBreakdown {
  Tensor<T> total;  // differentiable L^AnN
  T l_ca = 0, l_va = 0, l_ann = 0;
  double ca_fraction = 0.0;
  std::vector<double> sigma2;
};

namespace detail {

inline void check_labels(const LabelRaster& y, std::size_t h, std::size_t w, std::size_t k) {
  if (y.height != h || y.width != w)
    throw DimensionError("labels " + std::to_string(y.height) + "x" + std::to_string(y.width) +
                         " vs predictions " + std::to_string(h) + "x" + std::to_string(w));
  for (auto v : y.labels)
    if (v >= k) throw DataError("class index " + std::to_string(v) + " >= K=" + std::to_string(k));
}

// Row-wise softmax of logits [P, K] in double.
template <class T>
std::vector<double> pixel_probabilities(std::span<const T> z, std::size_t k) {
  std::vector<double> p(z.size());
  for (std::size_t i = 0; i < z.size() / k; ++i) {
    double mx = z[i * k];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, static_cast<double>(z[i * k + c]));
    double s = 0;
    for (std::size_t c = 0; c < k; ++c) s += p[i * k + c] = std::exp(static_cast<double>(z[i * k + c]) - mx);
    for (std::size_t c = 0; c < k; ++c) p[i * k + c] /= s;
  }
  return p;
}

// Averages per-pixel K-vectors of an h×w grid over cell×cell windows.
inline std::vector<double> pool_cells(std::span<const double> v, std::size_t h, std::size_t w, std::size_t k,
                                      std::size_t cell) {
  const std::size_t gh = h / cell, gw = w / cell;
  std::vector<double> out(gh * gw * k, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t r = (y / cell) * gw + x / cell;
      for (std::size_t c = 0; c < k; ++c) out[r * k + c] += v[(y * w + x) * k + c];
    }
  const double inv = 1.0 / static_cast<double>(cell * cell);
  for (auto& e : out) e *= inv;
  return out;
}

}  // namespace detail

// Ŷ = APool16(onehot(Y^crs)), Ô = APool16(softmax(O)), flattened to N^s × K.
template <class T>
PooledTargets pool_targets(const LabelRaster& coarse, const Tensor<T>& logits) {
  if (logits.rank() != 3) throw DimensionError("pool_targets: logits must be [H, W, K]");
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  if (h % kTargetGrid != 0 || w % kTargetGrid != 0)
    throw DimensionError("pool_targets: " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by 16");
  detail::check_labels(coarse, h, w, k);
  std::vector<double> onehot(h * w * k, 0.0);
  for (std::size_t i = 0; i < h * w; ++i) onehot[i * k + coarse.labels[i]] = 1.0;
  PooledTargets p;
  p.classes = k;
  p.grid_h = h / kTargetGrid;
  p.grid_w = w / kTargetGrid;
  p.rows = p.grid_h * p.grid_w;
  p.yhat = detail::pool_cells(onehot, h, w, k, kTargetGrid);
  p.ohat = detail::pool_cells(detail::pixel_probabilities(logits.data(), k), h, w, k, kTargetGrid);
  return p;
}

// G^v(i) = 1 iff the row maximum of γ is on the diagonal (a diagonal tie
// counts), reshaped to the 16-pixel grid and replicated to pixels.
inline CavaMask cava_mask(const TransportPlan& plan, std::size_t height, std::size_t width) {
  if (height % kTargetGrid != 0 || width % kTargetGrid != 0)
    throw DimensionError("cava_mask: extent not divisible by 16");
  const std::size_t gh = height / kTargetGrid, gw = width / kTargetGrid;
  if (plan.n != gh * gw)
    throw DimensionError("cava_mask: plan of " + std::to_string(plan.n) + " rows for a " + std::to_string(gh) + "x" +
                         std::to_string(gw) + " grid");
  CavaMask m;
  m.grid_h = gh;
  m.grid_w = gw;
  m.height = height;
  m.width = width;
  m.block.assign(plan.n, 0);
  for (std::size_t i = 0; i < plan.n; ++i) {
    double mx = plan(i, 0);
    for (std::size_t j = 1; j < plan.n; ++j) mx = std::max(mx, plan(i, j));
    m.block[i] = plan(i, i) >= mx ? 1 : 0;
  }
  m.pixel.assign(height * width, 0);
  std::size_t on = 0;
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      const auto v = m.block[(y / kTargetGrid) * gw + x / kTargetGrid];
      m.pixel[y * width + x] = v;
      on += v;
    }
  m.ca_fraction = static_cast<double>(on) / static_cast<double>(height * width);
  return m;
}

// W^c(i, j) = exp(max_k softmax(O(i, j, :)))
template <class T>
std::vector<T> confidence_weights(const Tensor<T>& logits) {
  const std::size_t k = logits.shape().back();
  const auto p = detail::pixel_probabilities(logits.data(), k);
  std::vector<T> w(logits.numel() / k);
  for (std::size_t i = 0; i < w.size(); ++i) {
    double mx = p[i * k];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, p[i * k + c]);
    w[i] = static_cast<T>(std::exp(mx));
  }
  return w;
}

// Category of each W/8 cell from 8×8-pooled softmax(O); CA membership by
// strict majority of the pixel mask inside the cell (ties go to VA).
template <class T>
DvaAssignment dva_assignment(const Tensor<T>& logits, const CavaMask& mask) {
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  if (mask.height != h || mask.width != w) throw DimensionError("dva_assignment: mask extent differs from logits");
  if (h % kDvaGrid != 0 || w % kDvaGrid != 0) throw DimensionError("dva_assignment: extent not divisible by 8");
  DvaAssignment a;
  a.grid_h = h / kDvaGrid;
  a.grid_w = w / kDvaGrid;
  const auto pooled = detail::pool_cells(detail::pixel_probabilities(logits.data(), k), h, w, k, kDvaGrid);
  const std::size_t cells = a.grid_h * a.grid_w;
  a.category.resize(cells);
  a.in_ca.resize(cells);
  std::vector<std::size_t> votes(cells, 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) votes[(y / kDvaGrid) * a.grid_w + x / kDvaGrid] += mask.pixel[y * w + x];
  for (std::size_t r = 0; r < cells; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (pooled[r * k + c] > pooled[r * k + best]) best = c;
    a.category[r] = static_cast<int>(best);
    a.in_ca[r] = 2 * votes[r] > kDvaGrid * kDvaGrid ? 1 : 0;
  }
  a.p_ca = mask.ca_fraction;
  a.p_va = 1.0 - mask.ca_fraction;
  return a;
}

template <class T>
AnlcConstants<T> anlc_constants(const Tensor<T>& logits, const LabelRaster& coarse) {
  AnlcConstants<T> c;
  c.pooled = pool_targets(coarse, logits);
  c.plan = solve_exact(cost_matrix(c.pooled.yhat, c.pooled.ohat, c.pooled.classes));
  c.mask = cava_mask(c.plan, logits.dim(0), logits.dim(1));
  c.confidence = confidence_weights(logits);
  c.dva = dva_assignment(logits, c.mask);
  return c;
}

// (1/HW) Σ G^p · W^c · (logsumexp(O) − O[Y^crs])
template <class T>
Tensor<T> loss_ca(const Tensor<T>& logits, const LabelRaster& coarse, std::span<const std::uint8_t> pixel_mask,
                  std::span<const T> confidence) {
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  detail::check_labels(coarse, h, w, k);
  if (pixel_mask.size() != h * w || confidence.size() != h * w)
    throw DimensionError("loss_ca: mask/weights do not cover " + std::to_string(h * w) + " pixels");
  const T inv = T(1) / static_cast<T>(h * w);
  std::vector<int> labels(coarse.labels.begin(), coarse.labels.end());
  std::vector<T> weights(h * w);
  for (std::size_t i = 0; i < h * w; ++i) weights[i] = pixel_mask[i] ? confidence[i] * inv : T(0);
  return weighted_cross_entropy(reshape(logits, {h * w, k}), std::span<const int>(labels),
                                std::span<const T>(weights));
}

template <class T>
struct VarianceLoss {
  Tensor<T> value;
  std::vector<double> sigma2;  // per category
};

// Σ_k p^ca ‖X̄k^ca − X̄k‖² + p^va ‖X̄k^va − X̄k‖² over X̂agg = Cat(MPool2, APool2)(X̂1d).
template <class T>
VarianceLoss<T> loss_va(const Tensor<T>& decoder1, const DvaAssignment& a, std::size_t classes) {
  if (decoder1.rank() != 3 || decoder1.dim(0) != 2 * a.grid_h || decoder1.dim(1) != 2 * a.grid_w)
    throw DimensionError("loss_va: decoder map " + shape_str(decoder1.shape()) + " does not match the DVA grid");
  const std::size_t cells = a.grid_h * a.grid_w, c2 = 2 * decoder1.dim(2);
  auto agg = reshape(concat_last<T>({pool2d(decoder1, PoolMode::max, 2, 2), pool2d(decoder1, PoolMode::avg, 2, 2)}),
                     {cells, c2});

  // Each row of `diff` is a linear combination of cells: mean(side) − mean(all).
  std::vector<T> diff;
  std::vector<T> row_weight;
  std::vector<std::size_t> row_class;
  for (std::size_t k = 0; k < classes; ++k) {
    std::size_t n_all = 0, n_ca = 0;
    for (std::size_t r = 0; r < cells; ++r)
      if (a.category[r] == static_cast<int>(k)) {
        ++n_all;
        n_ca += a.in_ca[r];
      }
    if (n_all == 0) continue;
    const std::size_t n_va = n_all - n_ca;
    for (int side = 1; side >= 0; --side) {
      const std::size_t n_side = side ? n_ca : n_va;
      if (n_side == 0) continue;
      for (std::size_t r = 0; r < cells; ++r) {
        T v = 0;
        if (a.category[r] == static_cast<int>(k)) {
          v = -T(1) / static_cast<T>(n_all);
          if (a.in_ca[r] == side) v += T(1) / static_cast<T>(n_side);
        }
        diff.push_back(v);
      }
      row_weight.push_back(static_cast<T>(side ? a.p_ca : a.p_va));
      row_class.push_back(k);
    }
  }
  const std::size_t rows = row_weight.size();
  VarianceLoss<T> out;
  out.sigma2.assign(classes, 0.0);
  if (rows == 0) {
    out.value = sum(scale(agg, T(0)));
    return out;
  }
  auto d = matmul(Tensor<T>({rows, cells}, std::move(diff)), agg);  // [rows, 2C]
  std::vector<T> wfull(rows * c2);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < c2; ++j) wfull[r * c2 + j] = row_weight[r];
  out.value = sum(mul(mul(d, d), Tensor<T>({rows, c2}, std::move(wfull))));
  auto dd = d.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0;
    for (std::size_t j = 0; j < c2; ++j) s += static_cast<double>(dd[r * c2 + j]) * static_cast<double>(dd[r * c2 + j]);
    out.sigma2[row_class[r]] += static_cast<double>(row_weight[r]) * s;
  }
  return out;
}

// L^AnN = L^CA + L^VA
template <class T>
LossBreakdown<T> loss_total(const Tensor<T>& l_ca, const Tensor<T>& l_va) {
  if (!std::isfinite(static_cast<double>(l_ca.item()))) throw NumericError("loss component L_CA is not finite");
  if (!std::isfinite(static_cast<double>(l_va.item()))) throw NumericError("loss component L_VA is not finite");
  LossBreakdown<T> b;
  b.total = add(l_ca, l_va);
  b.l_ca = l_ca.item();
  b.l_va = l_va.item();
  b.l_ann = b.total.item();
  return b;
}

// Full anti-noise loss for one image; constants are derived from the current
// logits unless supplied (e.g. held fixed across finite-difference probes).
template <class T>
LossBreakdown<T> anlc_loss(const ForwardArtifacts<T>& fa, const LabelRaster& coarse,
                           const AnlcConstants<T>* fixed = nullptr) {
  AnlcConstants<T> local;
  if (fixed == nullptr) {
    local = anlc_constants(fa.logits, coarse);
    fixed = &local;
  }
  auto lca = loss_ca(fa.logits, coarse, fixed->mask.pixel, std::span<const T>(fixed->confidence));
  auto lva = loss_va(fa.decoder1, fixed->dva, fa.logits.dim(2));
  auto b = loss_total(lca, lva.value);
  b.ca_fraction = fixed->mask.ca_fraction;
  b.sigma2 = std::move(lva.sigma2);
  return b;
}

// Plain mean cross-entropy against the coarse labels (baseline objective).
template <class T>
LossBreakdown<T> ce_loss(const ForwardArtifacts<T>& fa, const LabelRaster& coarse) {
  const std::size_t h = fa.logits.dim(0), w = fa.logits.dim(1), k = fa.logits.dim(2);
  detail::check_labels(coarse, h, w, k);
  std::vector<int> labels(coarse.labels.begin(), coarse.labels.end());
  std::vector<T> weights(h * w, T(1) / static_cast<T>(h * w));
  auto l = weighted_cross_entropy(reshape(fa.logits, {h * w, k}), std::span<const int>(labels),
                                  std::span<const T>(weights));
  if (!std::isfinite(static_cast<double>(l.item()))) throw NumericError("loss component CE is not finite");
  LossBreakdown<T> b;
  b.total = l;
  b.l_ca = l.item();
  b.l_ann = b.l_ca;
  b.ca_fraction = 1.0;
  return b;
}

}  // namespace xres
