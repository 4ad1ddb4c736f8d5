#include "uqseg/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace uqseg {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Image8 read_png_gray(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw std::runtime_error("cannot read PNG '" + path.string() + "': " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  Image8 out;
  out.width = image.width;
  out.height = image.height;
  out.channels = 1;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw std::runtime_error("cannot decode PNG '" + path.string() + "': " + image.message);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: 1 or 3 channels required");
  if (img.pixels.size() != img.width * img.height * img.channels) {
    throw std::invalid_argument("write_png: pixel buffer does not match dimensions");
  }
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = img.width * img.channels;
  for (std::size_t y = 0; y < img.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * stride));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Image8 to_gray8(const std::vector<double>& values, std::size_t h, std::size_t w, double lo, double hi) {
  if (values.size() != h * w) throw std::invalid_argument("to_gray8: size mismatch");
  Image8 img{w, h, 1, std::vector<std::uint8_t>(h * w, 0)};
  if (!(hi > lo)) return img;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double t = std::clamp((values[i] - lo) / (hi - lo), 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(255.0 * t));
  }
  return img;
}

}  // namespace uqseg
