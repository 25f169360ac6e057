#pragma once

// Reverse-difference skip connection.
//
// The bottleneck map X^h is aligned to an encoder level twice (cosine channel
// mixing and a learned 1×1 projection), both alignments are subtracted from
// the encoder map in sigmoid space, and only the positive residue is kept as
// a spatial-detail map that is fused into the decoder.

#include <string>

#include "xres/layers.hpp"

namespace xres {

// Cosine similarity of every channel of a[HW, Ca] with every channel of
// b[HW, Cb] -> [Ca, Cb]. Zero-norm channels give similarity 0.
template <class T>
Tensor<T> channel_cosine(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
    throw DimensionError("channel_cosine: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto an = l2_normalize_rows(transpose_last2(a));
  auto bn = l2_normalize_rows(transpose_last2(b));
  return matmul(an, transpose_last2(bn));
}

// xh[h, w, Ch] aligned to xe[H, W, Ce]: bilinear upsample, then each output
// channel c is the softmax(cosine(xe_c, ·))-weighted mix of X^h channels.
template <class T>
Tensor<T> cosine_align(const Tensor<T>& xh, const Tensor<T>& xe) {
  if (xh.rank() != 3 || xe.rank() != 3) throw DimensionError("cosine_align: feature maps must be [H, W, C]");
  const std::size_t H = xe.dim(0), W = xe.dim(1), ce = xe.dim(2), ch = xh.dim(2);
  auto up = reshape(upsample_bilinear(xh, H, W), {H * W, ch});
  auto mix = softmax(channel_cosine(reshape(xe, {H * W, ce}), up), 1);  // [Ce, Ch]
  return reshape(matmul(up, transpose_last2(mix)), {H, W, ce});
}

// Bilinear upsample, 1×1 convolution Ch -> Ce, GELU.
template <class T>
struct NeuralAlign {
  Linear<T> proj;

  NeuralAlign() = default;
  NeuralAlign(ParamSet<T>& ps, const std::string& name, std::size_t ch, std::size_t ce, Rng& rng)
      : proj(ps, name + ".proj", ch, ce, rng, LinearInit::fan_in) {}

  Tensor<T> operator()(const Tensor<T>& xh, std::size_t h, std::size_t w) const {
    return gelu(proj(upsample_bilinear(xh, h, w)));
  }
};

// ReLU(Cat(σ(xe) − σ(xcos), σ(xe) − σ(xneu))) -> [H, W, 2Ce]
template <class T>
Tensor<T> reverse_difference(const Tensor<T>& xe, const Tensor<T>& xcos, const Tensor<T>& xneu) {
  if (xe.shape() != xcos.shape() || xe.shape() != xneu.shape())
    throw DimensionError("reverse_difference: " + shape_str(xe.shape()) + ", " + shape_str(xcos.shape()) + ", " +
                         shape_str(xneu.shape()));
  auto se = sigmoid(xe);
  return relu(concat_last<T>({sub(se, sigmoid(xcos)), sub(se, sigmoid(xneu))}));
}

// Linear(Cat(a, b)) compressing back to `out` channels.
template <class T>
struct SkipFuse {
  Linear<T> proj;

  SkipFuse() = default;
  SkipFuse(ParamSet<T>& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng)
      : proj(ps, name + ".proj", in, out, rng, LinearInit::fan_in) {}

  Tensor<T> operator()(const Tensor<T>& a, const Tensor<T>& b) const {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(1) != b.dim(1))
      throw DimensionError("skip fuse: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return proj(concat_last<T>({a, b}));
  }
};

template <class T>
struct RdmSkip {
  NeuralAlign<T> neural;
  SkipFuse<T> fuse;  // 3Ce -> Ce

  RdmSkip() = default;
  RdmSkip(ParamSet<T>& ps, const std::string& name, std::size_t ch, std::size_t ce, Rng& rng)
      : neural(ps, name + ".neural", ch, ce, rng), fuse(ps, name + ".fuse", 3 * ce, ce, rng) {}

  Tensor<T> details(const Tensor<T>& xh, const Tensor<T>& xe) const {
    return reverse_difference(xe, cosine_align(xh, xe), neural(xh, xe.dim(0), xe.dim(1)));
  }

  // Returns the enhanced decoder map for decoder input xd.
  Tensor<T> operator()(const Tensor<T>& xh, const Tensor<T>& xe, const Tensor<T>& xd) const {
    return fuse(details(xh, xe), xd);
  }
};

}  // namespace xres
