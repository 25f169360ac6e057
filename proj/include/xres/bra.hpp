#pragma once

// Bi-level routing attention and the BiFormer block.
//
// Tokens of an [H, W, C] map are grouped into S×S non-overlapping regions.
// Region means of Q and K give an S²×S² affinity matrix; every query region
// keeps its k most affine key regions and attends only to their tokens. A
// depth-wise 5×5 convolution of V (local context enhancement) is added to the
// attention output before the output projection.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "xres/layers.hpp"

namespace xres {

struct RegionGrid {
  std::size_t height = 0, width = 0, regions_per_side = 1;
  std::size_t tokens_per_region = 0;
  // order[r * tokens_per_region + t] = row-major token index of token t of region r.
  std::vector<std::size_t> order;
  std::vector<std::size_t> inverse;

  std::size_t regions() const { return regions_per_side * regions_per_side; }
};

inline RegionGrid make_region_grid(std::size_t h, std::size_t w, std::size_t s) {
  if (s == 0 || h % s != 0 || w % s != 0)
    throw DimensionError("region partition: " + std::to_string(h) + "x" + std::to_string(w) +
                         " not divisible by S=" + std::to_string(s));
  RegionGrid g;
  g.height = h;
  g.width = w;
  g.regions_per_side = s;
  const std::size_t rh = h / s, rw = w / s;
  g.tokens_per_region = rh * rw;
  g.order.reserve(h * w);
  for (std::size_t ry = 0; ry < s; ++ry)
    for (std::size_t rx = 0; rx < s; ++rx)
      for (std::size_t y = 0; y < rh; ++y)
        for (std::size_t x = 0; x < rw; ++x) g.order.push_back((ry * rh + y) * w + rx * rw + x);
  g.inverse.assign(h * w, 0);
  for (std::size_t i = 0; i < g.order.size(); ++i) g.inverse[g.order[i]] = i;
  return g;
}

// tokens[HW, C] (row-major) -> [S², HW/S², C]
template <class T>
Tensor<T> region_partition(const Tensor<T>& tokens, const RegionGrid& g) {
  const std::size_t c = tokens.shape().back();
  auto rows = gather_rows(reshape(tokens, {g.height * g.width, c}), g.order);
  return reshape(rows, {g.regions(), g.tokens_per_region, c});
}

// [S², HW/S², C] -> tokens[HW, C]
template <class T>
Tensor<T> region_reassemble(const Tensor<T>& regions, const RegionGrid& g) {
  const std::size_t c = regions.shape().back();
  return gather_rows(reshape(regions, {g.height * g.width, c}), g.inverse);
}

// A^r = mean_region(Q) · mean_region(K)ᵀ for partitioned Q, K [S², T, C].
// Routing is index selection only, so this is computed off-tape.
template <class T>
std::vector<T> region_affinity(const Tensor<T>& q, const Tensor<T>& k) {
  if (q.rank() != 3 || q.shape() != k.shape())
    throw DimensionError("region_affinity: " + shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  const std::size_t n = q.dim(0), t = q.dim(1), c = q.dim(2);
  auto region_mean = [&](std::span<const T> d) {
    std::vector<T> m(n * c, T(0));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j < c; ++j) m[r * c + j] += d[(r * t + i) * c + j];
    for (auto& v : m) v /= static_cast<T>(t);
    return m;
  };
  const auto qr = region_mean(q.data()), kr = region_mean(k.data());
  std::vector<T> a(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::size_t p = 0; p < c; ++p) acc += qr[i * c + p] * kr[j * c + p];
      a[i * n + j] = acc;
    }
  return a;
}

struct RoutingIndex {
  std::size_t regions = 0, k = 0;
  std::vector<std::size_t> index;  // regions × k, row-major, descending affinity

  std::span<const std::size_t> row(std::size_t i) const { return {index.data() + i * k, k}; }
};

// Row-wise top-k of an n×n affinity; ties go to the lower column index.
template <class T>
RoutingIndex topk_route(std::span<const T> affinity, std::size_t n, std::size_t k) {
  if (k < 1 || k > n)
    throw ConfigError("topk_route: k=" + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  if (affinity.size() != n * n) throw DimensionError("topk_route: affinity is not n×n");
  RoutingIndex r{n, k, {}};
  r.index.reserve(n * k);
  std::vector<std::size_t> cols(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(cols.begin(), cols.end(), std::size_t{0});
    const T* row = affinity.data() + i * n;
    std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(k), cols.end(),
                      [row](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    r.index.insert(r.index.end(), cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return r;
}

// For each query region, the tokens of its routed regions concatenated in
// routing order: [S², T, C] -> [S², k·T, C].
template <class T>
Tensor<T> gather_kv(const Tensor<T>& x, const RoutingIndex& route) {
  const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
  if (route.regions != n) throw DimensionError("gather_kv: routing for a different region count");
  std::vector<std::size_t> idx;
  idx.reserve(n * route.k * t);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t r : route.row(i))
      for (std::size_t j = 0; j < t; ++j) idx.push_back(r * t + j);
  return reshape(gather_rows(reshape(x, {n * t, c}), std::move(idx)), {n, route.k * t, c});
}

template <class T>
struct BraParams {
  std::size_t channels = 0;
  Linear<T> qkv;   // C -> 3C
  Conv2d<T> lce;   // depth-wise 5×5, stride 1, pad 2
  Linear<T> proj;  // C -> C

  BraParams() = default;
  BraParams(ParamSet<T>& ps, const std::string& name, std::size_t c, Rng& rng)
      : channels(c),
        qkv(ps, name + ".qkv", c, 3 * c, rng),
        lce(ps, name + ".lce", c, c, 5, {.stride = 1, .pad = 2, .groups = c}, rng),
        proj(ps, name + ".proj", c, c, rng) {}
};

template <class T>
struct BraTrace {
  RoutingIndex route;
  std::vector<T> affinity;
  std::vector<Tensor<T>> attention;  // per head, [S², T, k·T]
};

namespace detail {

template <class T>
void check_heads(std::size_t c, std::size_t heads) {
  if (heads == 0 || c % heads != 0)
    throw ConfigError("attention: heads " + std::to_string(heads) + " must divide " + std::to_string(c) + " channels");
}

// Multi-head scaled dot-product attention on batched [B, Tq, C] / [B, Tk, C].
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               std::vector<Tensor<T>>* weights_out) {
  const std::size_t c = q.shape().back(), d = c / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(d));
  std::vector<Tensor<T>> outs;
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = slice_last(q, h * d, d), kh = slice_last(k, h * d, d), vh = slice_last(v, h * d, d);
    auto w = softmax(scale(matmul(qh, transpose_last2(kh)), sc), 2);
    if (weights_out != nullptr) weights_out->push_back(w);
    outs.push_back(matmul(w, vh));
  }
  return heads == 1 ? outs[0] : concat_last(outs);
}

}  // namespace detail

// Holds routing decisions constant while active: the first pass through each
// BRA call site records its routing, later passes replay it in call order.
class RoutingFreeze {
 public:
  RoutingFreeze() : prev_(active()) { active() = this; }
  ~RoutingFreeze() { active() = prev_; }
  RoutingFreeze(const RoutingFreeze&) = delete;
  RoutingFreeze& operator=(const RoutingFreeze&) = delete;

  // Starts a new pass; routes recorded so far are replayed from the start.
  void rewind() { cursor_ = 0; }
  std::size_t recorded() const { return routes_.size(); }

  RoutingIndex next(RoutingIndex fresh) {
    if (cursor_ == routes_.size()) routes_.push_back(std::move(fresh));
    return routes_[cursor_++];
  }

  static RoutingFreeze*& active() {
    thread_local RoutingFreeze* f = nullptr;
    return f;
  }

 private:
  RoutingFreeze* prev_;
  std::vector<RoutingIndex> routes_;
  std::size_t cursor_ = 0;
};

// x[H, W, C] -> [H, W, C]
template <class T>
Tensor<T> bra_forward(const Tensor<T>& x, const BraParams<T>& p, std::size_t s, std::size_t k, std::size_t heads,
                      BraTrace<T>* trace = nullptr) {
  if (x.rank() != 3 || x.dim(2) != p.channels)
    throw ConfigError("bra: input " + shape_str(x.shape()) + " vs " + std::to_string(p.channels) + " channels");
  detail::check_heads<T>(p.channels, heads);
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const RegionGrid grid = make_region_grid(h, w, s);
  if (k < 1 || k > grid.regions())
    throw ConfigError("bra: k=" + std::to_string(k) + " outside [1, " + std::to_string(grid.regions()) + "]");

  auto qkv = p.qkv(reshape(x, {h * w, c}));
  auto q = region_partition(slice_last(qkv, 0, c), grid);
  auto key = region_partition(slice_last(qkv, c, c), grid);
  auto vtok = slice_last(qkv, 2 * c, c);
  auto v = region_partition(vtok, grid);

  auto affinity = region_affinity(q, key);
  auto route = topk_route<T>(affinity, grid.regions(), k);
  if (auto* f = RoutingFreeze::active()) route = f->next(std::move(route));
  auto kg = gather_kv(key, route);
  auto vg = gather_kv(v, route);

  auto attn = detail::multi_head_attention(q, kg, vg, heads, trace ? &trace->attention : nullptr);
  auto merged = region_reassemble(attn, grid);
  auto local = reshape(p.lce(reshape(vtok, {h, w, c})), {h * w, c});
  auto y = p.proj(add(merged, local));
  if (trace != nullptr) {
    trace->route = std::move(route);
    trace->affinity = std::move(affinity);
  }
  return reshape(y, {h, w, c});
}

// Full attention over all H·W tokens plus the same LCE term and projection.
// Reference path for checking bra_forward with k = S².
template <class T>
Tensor<T> dense_attention_forward(const Tensor<T>& x, const BraParams<T>& p, std::size_t heads) {
  detail::check_heads<T>(p.channels, heads);
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto qkv = p.qkv(reshape(x, {h * w, c}));
  auto q = reshape(slice_last(qkv, 0, c), {1, h * w, c});
  auto key = reshape(slice_last(qkv, c, c), {1, h * w, c});
  auto vtok = slice_last(qkv, 2 * c, c);
  auto attn = detail::multi_head_attention(q, key, reshape(vtok, {1, h * w, c}), heads,
                                           static_cast<std::vector<Tensor<T>>*>(nullptr));
  auto local = reshape(p.lce(reshape(vtok, {h, w, c})), {h * w, c});
  return reshape(p.proj(add(reshape(attn, {h * w, c}), local)), {h, w, c});
}

struct BlockSettings {
  std::size_t regions_per_side = 4;
  std::size_t topk = 1;
  std::size_t heads = 2;
};

// x <- x + DWConv3x3(x); x <- x + BRA(LN(x)); x <- x + MLP(LN(x))
template <class T>
struct BiFormerBlock {
  std::size_t channels = 0;
  BlockSettings settings;
  Conv2d<T> pos;  // depth-wise 3×3
  LayerNorm<T> norm1, norm2;
  BraParams<T> attn;
  MlpGelu<T> mlp;

  BiFormerBlock() = default;
  BiFormerBlock(ParamSet<T>& ps, const std::string& name, std::size_t c, BlockSettings bs, std::size_t mlp_ratio,
                Rng& rng)
      : channels(c),
        settings(bs),
        pos(ps, name + ".pos", c, c, 3, {.stride = 1, .pad = 1, .groups = c}, rng),
        norm1(ps, name + ".norm1", c),
        norm2(ps, name + ".norm2", c),
        attn(ps, name + ".attn", c, rng),
        mlp(ps, name + ".mlp", c, mlp_ratio, rng) {
    detail::check_heads<T>(c, bs.heads);
  }

  Tensor<T> operator()(const Tensor<T>& x, BraTrace<T>* trace = nullptr) const {
    auto y = add(x, pos(x));
    y = add(y, bra_forward(norm1(y), attn, settings.regions_per_side, settings.topk, settings.heads, trace));
    return add(y, mlp(norm2(y)));
  }
};

}  // namespace xres
