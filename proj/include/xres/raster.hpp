#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xres/errors.hpp"

namespace xres {

// H×W grid of class indices.
struct LabelRaster {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> labels;

  LabelRaster() = default;
  LabelRaster(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }
  bool operator==(const LabelRaster&) const = default;
};

// H×W×C channel-last float image.
struct ImageRaster {
  std::size_t height = 0, width = 0, channels = 0;
  std::vector<float> pixels;

  ImageRaster() = default;
  ImageRaster(std::size_t h, std::size_t w, std::size_t c) : height(h), width(w), channels(c), pixels(h * w * c, 0.f) {}

  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  bool operator==(const ImageRaster&) const = default;
};

}  // namespace xres
