/* Copyright 2026 The bevcar Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#include "bevcar/png_io.hpp"

#include <png.h>

#include <csetjmp>
#include <cstdio>
#include <memory>

#include "bevcar/errors.hpp"

namespace bevcar::png {
namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

FilePtr open_or_throw(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) {
    throw DataError(std::string("cannot open '") + path + "' for " +
                    (mode[0] == 'r' ? "reading" : "writing"));
  }
  return f;
}

void write_rows(const std::string& path, int64_t height, int64_t width,
                int color_type, int bit_depth,
                const std::vector<std::vector<uint8_t>>& rows) {
  FilePtr f = open_or_throw(path, "wb");
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw DataError("'" + path + "': libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("'" + path + "': PNG encoding failed");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width),
               static_cast<png_uint_32>(height), bit_depth, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (const auto& row : rows) {
    png_write_row(png, const_cast<png_bytep>(row.data()));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write(const std::string& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) {
    throw DataError("'" + path + "': only gray or RGB images can be written");
  }
  const size_t stride = static_cast<size_t>(image.width) * image.channels;
  if (image.pixels.size() != stride * static_cast<size_t>(image.height)) {
    throw DataError("'" + path + "': pixel buffer does not match dimensions");
  }
  std::vector<std::vector<uint8_t>> rows(static_cast<size_t>(image.height));
  for (int64_t r = 0; r < image.height; ++r) {
    rows[r].assign(image.pixels.begin() + r * stride,
                   image.pixels.begin() + (r + 1) * stride);
  }
  write_rows(path, image.height, image.width,
             image.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, 8,
             rows);
}

void write_mask(const std::string& path, int64_t height, int64_t width,
                const std::vector<uint8_t>& mask) {
  if (mask.size() != static_cast<size_t>(height * width)) {
    throw DataError("'" + path + "': mask buffer does not match dimensions");
  }
  const size_t row_bytes = static_cast<size_t>((width + 7) / 8);
  std::vector<std::vector<uint8_t>> rows(static_cast<size_t>(height),
                                         std::vector<uint8_t>(row_bytes, 0));
  for (int64_t r = 0; r < height; ++r) {
    for (int64_t c = 0; c < width; ++c) {
      if (mask[r * width + c] != 0) {
        rows[r][c / 8] |= static_cast<uint8_t>(0x80u >> (c % 8));
      }
    }
  }
  write_rows(path, height, width, PNG_COLOR_TYPE_GRAY, 1, rows);
}

Image read(const std::string& path) {
  FilePtr f = open_or_throw(path, "rb");
  uint8_t signature[8] = {};
  if (std::fread(signature, 1, 8, f.get()) != 8 ||
      png_sig_cmp(signature, 0, 8) != 0) {
    throw DataError("'" + path + "': not a PNG file");
  }
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path + "': libpng initialisation failed");
  }
  Image image;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("'" + path + "': corrupt PNG data");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color_type = png_get_color_type(png, info);
  const int bit_depth = png_get_bit_depth(png, info);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) {
    png_set_expand_gray_1_2_4_to_8(png);
  }
  if (bit_depth == 16) png_set_strip_16(png);
  if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  image.height = png_get_image_height(png, info);
  image.width = png_get_image_width(png, info);
  image.channels = png_get_channels(png, info);
  const size_t stride = png_get_rowbytes(png, info);
  image.pixels.resize(stride * static_cast<size_t>(image.height));
  std::vector<png_bytep> rows(static_cast<size_t>(image.height));
  for (int64_t r = 0; r < image.height; ++r) {
    rows[r] = image.pixels.data() + r * stride;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  // 1-bit gray expands to 0/1; rescale to the 8-bit range.
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth == 1) {
    for (auto& p : image.pixels) p = p != 0 ? 255 : 0;
  }
  return image;
}

}  // namespace bevcar::png
