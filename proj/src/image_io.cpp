#include "sesim/image_io.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace sesim {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

unsigned char quantize(float v) {
  const float c = std::min(1.0f, std::max(0.0f, v));
  return static_cast<unsigned char>(std::floor(c * 255.0f + 0.5f));
}

void write_rgb_png(const std::vector<unsigned char>& rgb, Index h, Index w,
                   const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("save_image: cannot open '" + path + "'");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("save_image: png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("save_image: png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("save_image: png write failed for '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (Index r = 0; r < h; ++r)
    rows[static_cast<std::size_t>(r)] =
        const_cast<png_bytep>(rgb.data() + r * w * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

Tensor<float> load_image(const std::string& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("load_image: cannot open '" + path + "'");

  unsigned char header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
    throw std::runtime_error("load_image: '" + path + "' is not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("load_image: png init failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("load_image: png init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("load_image: png read failed for '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  if (depth != 8 || color != PNG_COLOR_TYPE_RGB) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("load_image: '" + path +
                             "' is not an 8-bit RGB PNG (unsupported format)");
  }

  std::vector<unsigned char> rgb(static_cast<std::size_t>(w) * h * 3);
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (png_uint_32 r = 0; r < h; ++r)
    rows[r] = rgb.data() + static_cast<std::size_t>(r) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> t(1, 3, static_cast<Index>(h), static_cast<Index>(w));
  for (Index r = 0; r < static_cast<Index>(h); ++r)
    for (Index c = 0; c < static_cast<Index>(w); ++c)
      for (Index ch = 0; ch < 3; ++ch)
        t(0, ch, r, c) =
            static_cast<float>(rgb[static_cast<std::size_t>((r * w + c) * 3 + ch)]) / 255.0f;
  return t;
}

void save_image(const Tensor<float>& image, const std::string& path) {
  if (image.batch() != 1 || image.channels() != 3)
    throw std::runtime_error("save_image: expected a (1,3,H,W) tensor");
  const Index h = image.height(), w = image.width();
  std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c)
      for (Index ch = 0; ch < 3; ++ch)
        rgb[static_cast<std::size_t>((r * w + c) * 3 + ch)] = quantize(image(0, ch, r, c));
  write_rgb_png(rgb, h, w, path);
}

void save_heatmap(const Tensor<float>& heat, const std::string& path) {
  if (heat.batch() != 1 || heat.channels() != 1)
    throw std::runtime_error("save_heatmap: expected a (1,1,H,W) tensor");

  // perceptual dark-blue -> green -> yellow ramp, interpolated from 5 anchors
  static const unsigned char anchors[5][3] = {
      {68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}};
  unsigned char lut[256][3];
  for (int i = 0; i < 256; ++i) {
    const double pos = i / 255.0 * 4.0;
    const int seg = std::min(3, static_cast<int>(pos));
    const double f = pos - seg;
    for (int c = 0; c < 3; ++c)
      lut[i][c] = static_cast<unsigned char>(
          std::floor(anchors[seg][c] + f * (anchors[seg + 1][c] - anchors[seg][c]) + 0.5));
  }

  const Index h = heat.height(), w = heat.width();
  std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
  for (Index r = 0; r < h; ++r)
    for (Index c = 0; c < w; ++c) {
      const int idx = quantize(heat(0, 0, r, c));
      for (Index ch = 0; ch < 3; ++ch)
        rgb[static_cast<std::size_t>((r * w + c) * 3 + ch)] = lut[idx][ch];
    }
  write_rgb_png(rgb, h, w, path);
}

}  // namespace sesim
