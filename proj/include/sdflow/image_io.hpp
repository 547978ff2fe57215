#pragma once

// 8-bit RGB PNG in/out via libpng, plus u8 <-> tensor conversions. PNG is the
// only interchange format; everything is converted to 3-channel 8-bit on read.

#include <png.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "sdflow/core.hpp"

namespace sdflow {

struct ImageU8 {
  long h = 0, w = 0;
  std::vector<uint8_t> v;  // RGB interleaved, row-major

  uint8_t& at(long y, long x, long c) { return v[(y * w + x) * 3 + c]; }
  uint8_t at(long y, long x, long c) const { return v[(y * w + x) * 3 + c]; }
};

inline ImageU8 read_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) fail(ErrKind::io, "cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail(ErrKind::format, "malformed PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  ImageU8 img;
  img.h = h;
  img.w = w;
  img.v.resize(size_t(h) * w * 3);
  std::vector<png_bytep> rows(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = img.v.data() + size_t(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

inline void write_png(const std::string& path, const ImageU8& img) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) fail(ErrKind::io, "cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail(ErrKind::io, "PNG write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, png_uint_32(img.w), png_uint_32(img.h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(img.h);
  for (long y = 0; y < img.h; ++y)
    rows[y] = const_cast<png_bytep>(img.v.data() + size_t(y) * img.w * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// exact value/255 conversion (no dequantization noise)
template <class R>
Tensor<R> to_tensor(const ImageU8& img) {
  Tensor<R> t({1, 3, img.h, img.w});
  for (long y = 0; y < img.h; ++y)
    for (long x = 0; x < img.w; ++x)
      for (long c = 0; c < 3; ++c) t.at(0, c, y, x) = R(img.at(y, x, c)) / R(255);
  return t;
}

template <class R>
ImageU8 to_image(const Tensor<R>& t, long batch_index = 0) {
  require(t.shape.c == 3, ErrKind::shape, "to_image: need 3 channels");
  ImageU8 img;
  img.h = t.shape.h;
  img.w = t.shape.w;
  img.v.resize(size_t(img.h) * img.w * 3);
  for (long y = 0; y < img.h; ++y)
    for (long x = 0; x < img.w; ++x)
      for (long c = 0; c < 3; ++c) {
        double v = double(t.at(batch_index, c, y, x));
        v = std::min(1.0, std::max(0.0, v));
        img.at(y, x, c) = uint8_t(std::lround(v * 255.0));
      }
  return img;
}

}  // namespace sdflow
