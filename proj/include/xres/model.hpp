#pragma once

// U-shaped BiFormer segmentation network.
//
//   X [W, W, 4] -> embed -> block            X1e [W/4,  C]
//               -> merge -> block            X2e [W/8,  2C]
//               -> merge -> block            X3e [W/16, 4C]
//               -> merge -> block -> block   Xh  [W/32, 8C]
//   Xh -> expand -> X3d -> skip(Xh, X3e) -> X̂3d -> block
//      -> expand -> X2d -> skip(Xh, X2e) -> X̂2d -> block
//      -> expand -> X1d -> skip(Xh, X1e) -> X̂1d
//      -> 4× expand [W, C/4] -> linear -> O [W, W, K]
//
// With rdm disabled the skips fall back to Linear(Cat(Xie, Xid)).

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "xres/bra.hpp"
#include "xres/rdm.hpp"

namespace xres {

struct ModelConfig {
  std::size_t size = 64;  // W = H
  std::size_t channels = 16;
  std::size_t classes = 4;
  std::size_t in_channels = 4;
  std::size_t regions = 4;                         // S
  std::vector<std::size_t> topk = {1, 4, 8, 16};   // per stage, shallow -> deep
  std::size_t heads = 2;
  std::size_t mlp_ratio = 3;
  bool rdm = true;

  void validate() const {
    if (size == 0 || size % 32 != 0)
      throw ConfigError("model.size must be a positive multiple of 32, got " + std::to_string(size));
    if (classes < 2) throw ConfigError("model.classes must be >= 2");
    if (channels == 0 || channels % 4 != 0) throw ConfigError("model.channels must be a multiple of 4");
    if (heads == 0 || channels % heads != 0)
      throw ConfigError("model.heads must divide model.channels");
    if (regions == 0) throw ConfigError("model.regions must be >= 1");
    if (topk.size() != 4) throw ConfigError("model.topk needs one entry per stage (4)");
    for (std::size_t k : topk)
      if (k == 0) throw ConfigError("model.topk entries must be >= 1");
    if (mlp_ratio == 0) throw ConfigError("model.mlp_ratio must be >= 1");
  }

  // Grid side of stage 0..3 (W/4 .. W/32).
  std::size_t grid(std::size_t stage) const { return (size / 4) >> stage; }

  // Regions per side shrink to the largest divisor of the stage grid not
  // exceeding S; k is clipped to the number of regions.
  BlockSettings stage(std::size_t s) const {
    const std::size_t g = grid(s);
    std::size_t r = std::min(regions, g);
    while (g % r != 0) --r;
    return {r, std::min(topk[s], r * r), heads};
  }
};

template <class T>
struct ForwardArtifacts {
  Tensor<T> logits;                 // O   [W, W, K]
  Tensor<T> decoder1;               // X̂1d [W/4, W/4, C]
  std::array<Tensor<T>, 3> encoder; // X1e, X2e, X3e
  Tensor<T> bottleneck;             // Xh
  std::array<Tensor<T>, 3> decoder_in;   // X1d, X2d, X3d (before skip fusion)
  std::array<Tensor<T>, 3> decoder_out;  // X̂1d, X̂2d, X̂3d
};

template <class T>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t c = cfg_.channels;
    embed_ = PatchEmbed<T>(params_, "embed", cfg_.in_channels, c, rng);
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t ci = c << i;
      enc_[i] = BiFormerBlock<T>(params_, "enc" + std::to_string(i + 1), ci, cfg_.stage(i), cfg_.mlp_ratio, rng);
      merge_[i] = PatchMerge<T>(params_, "merge" + std::to_string(i + 1), ci, rng);
    }
    for (std::size_t i = 0; i < 2; ++i)
      bottleneck_[i] =
          BiFormerBlock<T>(params_, "bottleneck" + std::to_string(i + 1), 8 * c, cfg_.stage(3), cfg_.mlp_ratio, rng);
    // Decoder levels are built deep -> shallow; index i is level i+1.
    for (std::size_t i = 3; i-- > 0;) {
      const std::size_t ci = c << i;
      const std::string lvl = std::to_string(i + 1);
      expand_[i] = PatchExpand<T>(params_, "expand" + lvl, 2 * ci, 2, rng);
      if (cfg_.rdm)
        rdm_[i] = RdmSkip<T>(params_, "rdm" + lvl, 8 * c, ci, rng);
      else
        plain_[i] = SkipFuse<T>(params_, "skip" + lvl, 2 * ci, ci, rng);
      if (i > 0) dec_[i] = BiFormerBlock<T>(params_, "dec" + lvl, ci, cfg_.stage(i), cfg_.mlp_ratio, rng);
    }
    final_expand_ = PatchExpand<T>(params_, "final_expand", c, 4, rng);
    head_ = Linear<T>(params_, "head", c / 4, cfg_.classes, rng, LinearInit::fan_in);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamSet<T>& params() { return params_; }
  const ParamSet<T>& params() const { return params_; }
  std::size_t parameter_count() const { return params_.count(); }

  ForwardArtifacts<T> encode(const Tensor<T>& x) const {
    if (x.rank() != 3 || x.dim(0) != cfg_.size || x.dim(1) != cfg_.size || x.dim(2) != cfg_.in_channels)
      throw DimensionError("model input " + shape_str(x.shape()) + " does not match configured [" +
                           std::to_string(cfg_.size) + "x" + std::to_string(cfg_.size) + "x" +
                           std::to_string(cfg_.in_channels) + "]");
    ForwardArtifacts<T> a;
    a.encoder[0] = enc_[0](embed_(x));
    a.encoder[1] = enc_[1](merge_[0](a.encoder[0]));
    a.encoder[2] = enc_[2](merge_[1](a.encoder[1]));
    a.bottleneck = bottleneck_[1](bottleneck_[0](merge_[2](a.encoder[2])));
    return a;
  }

  void decode(ForwardArtifacts<T>& a) const {
    Tensor<T> y = a.bottleneck;
    for (std::size_t i = 3; i-- > 0;) {
      a.decoder_in[i] = expand_[i](y);
      a.decoder_out[i] = cfg_.rdm ? rdm_[i](a.bottleneck, a.encoder[i], a.decoder_in[i])
                                  : plain_[i](a.encoder[i], a.decoder_in[i]);
      y = i > 0 ? dec_[i](a.decoder_out[i]) : a.decoder_out[i];
    }
    a.decoder1 = a.decoder_out[0];
    a.logits = head_(final_expand_(a.decoder1));
  }

  ForwardArtifacts<T> forward(const Tensor<T>& x) const {
    auto a = encode(x);
    decode(a);
    return a;
  }

 private:
  ModelConfig cfg_;
  ParamSet<T> params_;
  PatchEmbed<T> embed_;
  std::array<BiFormerBlock<T>, 3> enc_;
  std::array<PatchMerge<T>, 3> merge_;
  std::array<BiFormerBlock<T>, 2> bottleneck_;
  std::array<PatchExpand<T>, 3> expand_;
  std::array<RdmSkip<T>, 3> rdm_;
  std::array<SkipFuse<T>, 3> plain_;
  std::array<BiFormerBlock<T>, 3> dec_;  // [0] unused
  PatchExpand<T> final_expand_;
  Linear<T> head_;
};

}  // namespace xres
