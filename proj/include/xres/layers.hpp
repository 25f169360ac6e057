#pragma once

// Parameterized building blocks. Every layer registers its tensors in a
// ParamSet under a dotted name at construction; shapes depend only on the
// constructor arguments.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "xres/ops.hpp"
#include "xres/rng.hpp"

namespace xres {

template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
  };

  Tensor<T> add(std::string name, Tensor<T> t) {
    for (const auto& e : entries_)
      if (e.name == name) throw ConfigError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    entries_.push_back({std::move(name), t});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
  }

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.clear_grad();
  }

 private:
  std::vector<Entry> entries_;
};

namespace init {

template <class T>
Tensor<T> truncated_normal(Shape shape, double std, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.truncated_normal(std));
  return t;
}

template <class T>
Tensor<T> fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace init

// Transformer-block linears use truncated normal std 0.02; structural
// projections (embedding, merge, expand, skip fusion, head) use fan-in
// uniform like the convolutions.
enum class LinearInit { transformer, fan_in };

template <class T>
struct Linear {
  std::size_t in = 0, out = 0;
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, std::size_t in_ch, std::size_t out_ch, Rng& rng,
         LinearInit mode = LinearInit::transformer)
      : in(in_ch), out(out_ch) {
    weight = ps.add(name + ".weight", mode == LinearInit::transformer
                                          ? init::truncated_normal<T>({in, out}, 0.02, rng)
                                          : init::fan_in_uniform<T>({in, out}, in, rng));
    bias = ps.add(name + ".bias", Tensor<T>(Shape{out}));
  }

  // Applies to the last axis of x[..., in].
  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().back() != in)
      throw ConfigError("linear: expected " + std::to_string(in) + " channels, got " + shape_str(x.shape()));
    if (x.rank() == 2) return add_bias(matmul(x, weight), bias);
    Shape s = x.shape();
    const std::size_t rows = x.numel() / in;
    auto y = add_bias(matmul(reshape(x, {rows, in}), weight), bias);
    s.back() = out;
    return reshape(y, std::move(s));
  }
};

template <class T>
struct Conv2d {
  std::size_t in = 0, out = 0, kernel = 1;
  Conv2dSpec spec;
  Tensor<T> weight;  // [k, k, in/groups, out]
  Tensor<T> bias;    // [out]

  Conv2d() = default;
  Conv2d(ParamSet<T>& ps, const std::string& name, std::size_t in_ch, std::size_t out_ch, std::size_t k,
         Conv2dSpec s, Rng& rng)
      : in(in_ch), out(out_ch), kernel(k), spec(s) {
    if (s.groups == 0 || in % s.groups != 0 || out % s.groups != 0)
      throw ConfigError("conv2d " + name + ": groups " + std::to_string(s.groups) + " must divide " +
                        std::to_string(in) + " and " + std::to_string(out));
    const std::size_t cin_g = in / s.groups;
    weight = ps.add(name + ".weight", init::fan_in_uniform<T>({k, k, cin_g, out}, k * k * cin_g, rng));
    bias = ps.add(name + ".bias", Tensor<T>(Shape{out}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, &bias, spec); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, std::size_t c) {
    gamma = ps.add(name + ".gamma", Tensor<T>(Shape{c}, T(1)));
    beta = ps.add(name + ".beta", Tensor<T>(Shape{c}));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }
};

// Linear -> GELU -> Linear with hidden width ratio·C.
template <class T>
struct MlpGelu {
  Linear<T> fc1, fc2;

  MlpGelu() = default;
  MlpGelu(ParamSet<T>& ps, const std::string& name, std::size_t c, std::size_t ratio, Rng& rng)
      : fc1(ps, name + ".fc1", c, ratio * c, rng), fc2(ps, name + ".fc2", ratio * c, c, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

// Overlapping 7×7 stride-4 convolution to 48 channels, then a pointwise
// linear embedding to C channels: [W, H, 4] -> [W/4, H/4, C].
template <class T>
struct PatchEmbed {
  static constexpr std::size_t kStem = 48;
  Conv2d<T> conv;
  Linear<T> proj;

  PatchEmbed() = default;
  PatchEmbed(ParamSet<T>& ps, const std::string& name, std::size_t in_ch, std::size_t c, Rng& rng)
      : conv(ps, name + ".conv", in_ch, kStem, 7, {.stride = 4, .pad = 3, .groups = 1}, rng),
        proj(ps, name + ".proj", kStem, c, rng, LinearInit::fan_in) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) % 4 != 0 || x.dim(1) % 4 != 0)
      throw DimensionError("patch_embed: spatial extent must be divisible by 4, got " + shape_str(x.shape()));
    return proj(conv(x));
  }
};

// Row indices that gather each 2×2 neighbourhood of an [H, W] grid into
// consecutive rows: (0,0), (0,1), (1,0), (1,1).
inline std::vector<std::size_t> merge_order(std::size_t h, std::size_t w) {
  std::vector<std::size_t> idx;
  idx.reserve(h * w);
  for (std::size_t y = 0; y < h; y += 2)
    for (std::size_t x = 0; x < w; x += 2)
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) idx.push_back((y + dy) * w + x + dx);
  return idx;
}

// [H, W, C] -> [H/2, W/2, 2C]
template <class T>
struct PatchMerge {
  std::size_t channels = 0;
  Linear<T> reduce;

  PatchMerge() = default;
  PatchMerge(ParamSet<T>& ps, const std::string& name, std::size_t c, Rng& rng)
      : channels(c), reduce(ps, name + ".reduce", 4 * c, 2 * c, rng, LinearInit::fan_in) {}

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) % 2 != 0 || x.dim(1) % 2 != 0)
      throw DimensionError("patch_merge: extent must be even, got " + shape_str(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    auto tokens = gather_rows(reshape(x, {h * w, c}), merge_order(h, w));
    return reduce(reshape(tokens, {h / 2, w / 2, 4 * c}));
  }
};

// Row indices placing [H·W·f², C] sub-pixel rows onto the [fH, fW] grid.
inline std::vector<std::size_t> pixel_shuffle_order(std::size_t h, std::size_t w, std::size_t f) {
  std::vector<std::size_t> idx(h * w * f * f);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t dy = 0; dy < f; ++dy)
        for (std::size_t dx = 0; dx < f; ++dx)
          idx[(y * f + dy) * (w * f) + x * f + dx] = (y * w + x) * f * f + dy * f + dx;
  return idx;
}

// [H, W, C] -> [fH, fW, C/f]: linear to f²·(C/f) channels, then pixel
// rearrangement. Factor 2 halves channels, factor 4 quarters them.
template <class T>
struct PatchExpand {
  std::size_t factor = 2, in = 0, out = 0;
  Linear<T> proj;

  PatchExpand() = default;
  PatchExpand(ParamSet<T>& ps, const std::string& name, std::size_t c, std::size_t f, Rng& rng)
      : factor(f), in(c) {
    if ((f != 2 && f != 4) || c % f != 0)
      throw ConfigError("patch_expand: factor " + std::to_string(f) + " needs channels divisible by it, got " +
                        std::to_string(c));
    out = c / f;
    proj = Linear<T>(ps, name + ".proj", c, f * f * out, rng, LinearInit::fan_in);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.rank() != 3) throw DimensionError("patch_expand: expected [H, W, C], got " + shape_str(x.shape()));
    const std::size_t h = x.dim(0), w = x.dim(1);
    auto y = reshape(proj(x), {h * w * factor * factor, out});
    return reshape(gather_rows(y, pixel_shuffle_order(h, w, factor)), {h * factor, w * factor, out});
  }
};

}  // namespace xres
