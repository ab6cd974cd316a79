#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "tbps/tensor.hpp"

namespace tbps {

// 8-bit interleaved RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* pixel(int x, int y) { return &rgb[(static_cast<std::size_t>(y) * width + x) * 3]; }
  const std::uint8_t* pixel(int x, int y) const {
    return &rgb[(static_cast<std::size_t>(y) * width + x) * 3];
  }
  bool operator==(const Image&) const = default;
};

// Binary PPM (P6), lossless.
void write_ppm(const Image& img, const std::filesystem::path& path);
Image read_ppm(const std::filesystem::path& path);

Image hflip(const Image& img);

// [3,H,W] planar tensor with values in [0,1].
Tensor image_to_tensor(const Image& img);

}  // namespace tbps
