#pragma once

// Synthetic cross-resolution scenes.
//
// A Voronoi partition of the tile into blobs gives the current high-resolution
// truth; a 4-band image is drawn from fixed class means plus Gaussian texture.
// The outdated low-resolution product is derived from a copy of the truth in
// which some blobs changed class (temporal change), reduced to B×B block
// majorities, partly misclassified block-wise, and nearest-neighbour
// upsampled back onto the high-resolution grid.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "xres/raster.hpp"
#include "xres/rng.hpp"

namespace xres {

enum LandCover : std::uint8_t { kImpervious = 0, kTreeCanopy = 1, kLowVegetation = 2, kWater = 3 };

inline constexpr std::array<const char*, 4> kLandCoverNames = {"Impervious Surface", "Tree canopy",
                                                              "Low vegetation", "Water"};
inline constexpr std::array<const char*, 4> kLandCoverAbbrev = {"I.S.", "T.C.", "L.V.", "W."};

// Band means per class (R, G, B, NIR).
inline constexpr std::array<std::array<float, 4>, 4> kClassMeans = {{
    {0.55f, 0.52f, 0.50f, 0.35f},  // impervious
    {0.20f, 0.32f, 0.22f, 0.55f},  // tree canopy
    {0.38f, 0.48f, 0.30f, 0.50f},  // low vegetation
    {0.12f, 0.18f, 0.28f, 0.08f},  // water
}};
inline constexpr float kTextureSigma = 0.1f;

struct SceneSpec {
  std::size_t size = 256;
  std::size_t classes = 4;
  std::size_t blobs = 24;
  double rho_mis = 0.2;  // block misclassification rate
  double rho_chg = 0.1;  // fraction of blobs whose class changed
  std::size_t block = 8; // low-resolution block edge in pixels
  std::uint64_t seed = 0;

  void validate() const {
    if (rho_mis < 0 || rho_mis > 1 || rho_chg < 0 || rho_chg > 1)
      throw ConfigError("noise rates must lie in [0, 1]");
    if (block == 0 || size % block != 0)
      throw ConfigError("block size " + std::to_string(block) + " must divide tile size " + std::to_string(size));
    if (classes == 0 || classes > kClassMeans.size()) throw ConfigError("classes must be in [1, 4]");
    if (blobs == 0) throw ConfigError("need at least one blob");
  }
};

struct World {
  ImageRaster image;
  LabelRaster truth;     // current high-resolution labels
  LabelRaster mutated;   // truth after temporal change
  LabelRaster outdated;  // coarse product on the high-resolution grid
  std::vector<std::uint8_t> block_majority;  // mutated majority per block
  std::vector<std::uint8_t> block_flipped;   // 1 where misclassification hit
  std::size_t changed_blobs = 0;
};

namespace detail {

inline std::uint8_t other_class(std::uint8_t c, std::size_t k, Rng& rng) {
  if (k < 2) return c;
  auto o = static_cast<std::uint8_t>(rng.below(k - 1));
  return o >= c ? static_cast<std::uint8_t>(o + 1) : o;
}

}  // namespace detail

inline World synth_world(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const std::size_t n = spec.size, k = spec.classes;

  struct Site {
    double x, y;
    std::uint8_t cls;
  };
  std::vector<Site> sites(spec.blobs);
  for (auto& s : sites) {
    s.x = rng.uniform(0.0, static_cast<double>(n));
    s.y = rng.uniform(0.0, static_cast<double>(n));
    s.cls = static_cast<std::uint8_t>(rng.below(k));
  }
  std::vector<std::size_t> owner(n * n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      std::size_t best = 0;
      double bd = 0;
      for (std::size_t i = 0; i < sites.size(); ++i) {
        const double dx = sites[i].x - (static_cast<double>(x) + 0.5), dy = sites[i].y - (static_cast<double>(y) + 0.5);
        const double d = dx * dx + dy * dy;
        if (i == 0 || d < bd) {
          bd = d;
          best = i;
        }
      }
      owner[y * n + x] = best;
    }

  World w;
  w.truth = LabelRaster(n, n);
  for (std::size_t i = 0; i < n * n; ++i) w.truth.labels[i] = sites[owner[i]].cls;

  w.image = ImageRaster(n, n, 4);
  for (std::size_t i = 0; i < n * n; ++i)
    for (std::size_t c = 0; c < 4; ++c)
      w.image.pixels[i * 4 + c] =
          kClassMeans[w.truth.labels[i]][c] + kTextureSigma * static_cast<float>(rng.normal());

  // Temporal change: a fixed share of blobs switch to another class.
  std::vector<std::uint8_t> changed_cls(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) changed_cls[i] = sites[i].cls;
  std::vector<std::size_t> order(sites.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  w.changed_blobs = static_cast<std::size_t>(std::llround(spec.rho_chg * static_cast<double>(sites.size())));
  for (std::size_t i = 0; i < w.changed_blobs; ++i)
    changed_cls[order[i]] = detail::other_class(changed_cls[order[i]], k, rng);
  w.mutated = LabelRaster(n, n);
  for (std::size_t i = 0; i < n * n; ++i) w.mutated.labels[i] = changed_cls[owner[i]];

  // Low-resolution product: block majority (ties -> lower class), then flips.
  const std::size_t b = spec.block, nb = n / b;
  w.block_majority.assign(nb * nb, 0);
  w.block_flipped.assign(nb * nb, 0);
  std::vector<std::uint8_t> block_label(nb * nb);
  for (std::size_t by = 0; by < nb; ++by)
    for (std::size_t bx = 0; bx < nb; ++bx) {
      std::array<std::size_t, 4> votes{};
      for (std::size_t y = by * b; y < (by + 1) * b; ++y)
        for (std::size_t x = bx * b; x < (bx + 1) * b; ++x) ++votes[w.mutated.at(y, x)];
      std::uint8_t maj = 0;
      for (std::uint8_t c = 1; c < k; ++c)
        if (votes[c] > votes[maj]) maj = c;
      w.block_majority[by * nb + bx] = maj;
      block_label[by * nb + bx] = maj;
    }
  for (std::size_t i = 0; i < nb * nb; ++i)
    if (rng.bernoulli(spec.rho_mis) && k > 1) {
      block_label[i] = detail::other_class(block_label[i], k, rng);
      w.block_flipped[i] = 1;
    }
  w.outdated = LabelRaster(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) w.outdated.at(y, x) = block_label[(y / b) * nb + x / b];
  return w;
}

// ----------------------------------------------------------- class merging

// Source product code -> one of the four target land-cover classes.
struct ClassMap {
  std::string product;
  std::map<int, std::string> names;  // every known source code
  std::map<int, std::uint8_t> target;

  std::uint8_t map(int code) const {
    auto it = target.find(code);
    if (it != target.end()) return it->second;
    auto nm = names.find(code);
    throw DataError(product + " class " + std::to_string(code) +
                    (nm != names.end() ? " (" + nm->second + ")" : std::string()) + " has no target class");
  }

  std::uint8_t map(const std::string& name) const {
    for (const auto& [code, n] : names)
      if (n == name) return map(code);
    throw DataError(product + " class \"" + name + "\" is unknown");
  }
};

// NLCD level-II legend. Perennial Ice/Snow has no merge target.
inline ClassMap nlcd_class_map() {
  ClassMap m;
  m.product = "NLCD";
  const std::vector<std::tuple<int, const char*, int>> rows = {
      {11, "Open Water", kWater},
      {12, "Perennial Ice/Snow", -1},
      {21, "Developed Open Space", kImpervious},
      {22, "Developed Low Intensity", kImpervious},
      {23, "Developed Medium Intensity", kImpervious},
      {24, "Developed High Intensity", kImpervious},
      {31, "Barren Land", kLowVegetation},
      {41, "Deciduous Forest", kTreeCanopy},
      {42, "Evergreen Forest", kTreeCanopy},
      {43, "Mixed Forest", kTreeCanopy},
      {52, "Shrub/Scrub", kLowVegetation},
      {71, "Grassland/Herbaceous", kLowVegetation},
      {81, "Pasture/Hay", kLowVegetation},
      {82, "Cultivated Crops", kLowVegetation},
      {90, "Woody Wetlands", kTreeCanopy},
      {95, "Emergent Herbaceous Wetlands", kLowVegetation},
  };
  for (const auto& [code, name, t] : rows) {
    m.names[code] = name;
    if (t >= 0) m.target[code] = static_cast<std::uint8_t>(t);
  }
  return m;
}

// Chesapeake high-resolution land cover legend.
inline ClassMap cclc_class_map() {
  ClassMap m;
  m.product = "CCLC";
  const std::vector<std::tuple<int, const char*, int>> rows = {
      {1, "Water", kWater},          {2, "Tree canopy", kTreeCanopy}, {3, "Low vegetation", kLowVegetation},
      {4, "Barren", kImpervious},    {5, "Buildings", kImpervious},   {6, "Roads", kImpervious},
  };
  for (const auto& [code, name, t] : rows) {
    m.names[code] = name;
    m.target[code] = static_cast<std::uint8_t>(t);
  }
  return m;
}

inline LabelRaster remap_classes(const LabelRaster& source, const ClassMap& map) {
  LabelRaster out(source.height, source.width);
  for (std::size_t i = 0; i < source.size(); ++i) out.labels[i] = map.map(source.labels[i]);
  return out;
}

// ---------------------------------------------------------------- cropping

struct Patch {
  ImageRaster image;
  LabelRaster truth, outdated;
  std::size_t x0 = 0, y0 = 0;
};

template <class Raster>
Raster crop(const Raster& r, std::size_t x0, std::size_t y0, std::size_t size) {
  Raster out;
  out.height = size;
  out.width = size;
  std::size_t ch = 1;
  if constexpr (requires { r.channels; }) {
    ch = r.channels;
    out.channels = ch;
    out.pixels.resize(size * size * ch);
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(r.pixels.begin() + static_cast<std::ptrdiff_t>(((y0 + y) * r.width + x0) * ch), size * ch,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(y * size * ch));
  } else {
    out.labels.resize(size * size);
    for (std::size_t y = 0; y < size; ++y)
      std::copy_n(r.labels.begin() + static_cast<std::ptrdiff_t>((y0 + y) * r.width + x0), size,
                  out.labels.begin() + static_cast<std::ptrdiff_t>(y * size));
  }
  return out;
}

// n random crops sharing offsets across image, truth and outdated labels.
inline std::vector<Patch> crop_patches(const ImageRaster& image, const LabelRaster& truth, const LabelRaster& outdated,
                                       std::size_t n, std::size_t size, std::uint64_t seed) {
  if (size == 0 || size > image.height || size > image.width)
    throw ConfigError("patch size " + std::to_string(size) + " exceeds tile " + std::to_string(image.height) + "x" +
                      std::to_string(image.width));
  if (truth.height != image.height || truth.width != image.width || outdated.height != image.height ||
      outdated.width != image.width)
    throw DimensionError("crop_patches: rasters differ in extent");
  Rng rng(seed);
  std::vector<Patch> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Patch p;
    p.x0 = rng.below(image.width - size + 1);
    p.y0 = rng.below(image.height - size + 1);
    p.image = crop(image, p.x0, p.y0, size);
    p.truth = crop(truth, p.x0, p.y0, size);
    p.outdated = crop(outdated, p.x0, p.y0, size);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace xres
