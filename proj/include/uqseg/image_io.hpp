#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace uqseg {

/// 8-bit image, row-major, `channels` interleaved samples per pixel.
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<std::uint8_t> pixels;

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return pixels[(y * width + x) * channels + c];
  }
};

/// Reads any PNG and converts it to 8-bit grayscale (alpha dropped).
Image8 read_png_gray(const std::filesystem::path& path);
/// Writes a 1-channel (gray) or 3-channel (RGB) image.
void write_png(const std::filesystem::path& path, const Image8& img);

/// Linear map of [lo, hi] to 0..255 (values outside are clipped); lo == hi maps to 0.
Image8 to_gray8(const std::vector<double>& values, std::size_t h, std::size_t w, double lo, double hi);

}  // namespace uqseg
