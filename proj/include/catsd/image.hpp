#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace catsd {

// Interleaved 8-bit image, row-major. channels: 1 (gray/mask), 3 (RGB) or
// 4 (RGBA).
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const ImageU8&) const = default;
};

ImageU8 make_image(int width, int height, int channels, std::uint8_t fill = 0);

// Planar double image in [0,1], used by the synthesis/augmentation pipeline.
struct ImageF {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;  // channel-major planes

  double& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  double at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

ImageF make_imagef(int width, int height, int channels, double fill = 0.0);

ImageF to_float(const ImageU8& img);
ImageU8 to_u8(const ImageF& img);  // clamps to [0,1], rounds half up

// Minimal PNG codec (8-bit gray / RGB / RGBA, non-interlaced). The encoder
// always emits IHDR+IDAT+IEND with filter 0 scanlines and a fixed zlib level,
// so identical pixels give identical bytes.
std::vector<std::uint8_t> png_encode(const ImageU8& img);
ImageU8 png_decode(const std::vector<std::uint8_t>& bytes);

void png_save(const std::string& path, const ImageU8& img);
ImageU8 png_load(const std::string& path);

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);

}  // namespace catsd
