#pragma once

// 8-bit PNG (libpng) and PPM export. Values map linearly from [0,1] to 0..255.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "core.hpp"

namespace toddler {

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

struct PngBuffer {
  const std::vector<std::uint8_t>* in = nullptr;
  std::size_t pos = 0;
  std::vector<std::uint8_t>* out = nullptr;
};

inline void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
  buf->out->insert(buf->out->end(), data, data + len);
}
inline void png_flush_cb(png_structp) {}
inline void png_read_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* buf = static_cast<PngBuffer*>(png_get_io_ptr(png));
  if (buf->pos + len > buf->in->size()) png_error(png, "png: truncated");
  std::memcpy(data, buf->in->data() + buf->pos, len);
  buf->pos += len;
}

}  // namespace detail

/// Encodes 1-channel grids as grayscale and 3-channel grids as RGB.
inline std::vector<std::uint8_t> encode_png(const ImageGrid& img) {
  require(img.channels() == 1 || img.channels() == 3, ErrorKind::invalid_argument,
          "encode_png: only 1- or 3-channel grids");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  require(png && info, ErrorKind::io, "encode_png: libpng init failed");
  std::vector<std::uint8_t> row(static_cast<std::size_t>(img.width() * img.channels()));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorKind::io, "encode_png: libpng error");
  }
  detail::PngBuffer buf;
  buf.out = &out;
  png_set_write_fn(png, &buf, detail::png_write_cb, detail::png_flush_cb);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width()), static_cast<png_uint_32>(img.height()), 8,
               img.channels() == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < img.channels(); ++c)
        row[static_cast<std::size_t>(x * img.channels() + c)] = to_byte(img.at(y, x, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

/// Decodes 8-bit gray or RGB PNGs (alpha is dropped, palettes expanded).
inline ImageGrid decode_png(const std::vector<std::uint8_t>& bytes) {
  require(bytes.size() >= 8 && png_sig_cmp(bytes.data(), 0, 8) == 0, ErrorKind::invalid_argument,
          "decode_png: not a PNG");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  require(png && info, ErrorKind::io, "decode_png: libpng init failed");
  std::vector<std::vector<std::uint8_t>> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorKind::invalid_argument, "decode_png: malformed PNG");
  }
  detail::PngBuffer buf;
  buf.in = &bytes;
  png_set_read_fn(png, &buf, detail::png_read_cb);
  png_read_info(png, info);
  const auto width = png_get_image_width(png, info);
  const auto height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  rows.assign(height, std::vector<std::uint8_t>(png_get_rowbytes(png, info)));
  std::vector<png_bytep> ptrs(height);
  for (png_uint_32 y = 0; y < height; ++y) ptrs[y] = rows[y].data();
  png_read_image(png, ptrs.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Shape s{static_cast<int>(height), static_cast<int>(width), channels};
  std::vector<double> data(s.size());
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      for (int c = 0; c < channels; ++c)
        data[(static_cast<std::size_t>(y) * s.width + x) * channels + c] = rows[y][x * channels + c] / 255.0;
  return ImageGrid(s, std::move(data));
}

inline void write_png(const std::filesystem::path& path, const ImageGrid& img) {
  detail::write_file(path, encode_png(img));
}

inline ImageGrid read_png(const std::filesystem::path& path) { return decode_png(detail::read_file(path)); }

/// Binary PPM (P6). Gray grids are written with the value replicated to RGB.
inline void write_ppm(const std::filesystem::path& path, const ImageGrid& img) {
  const std::string header = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      for (int c = 0; c < 3; ++c) bytes.push_back(to_byte(img.at(y, x, img.channels() == 3 ? c : 0)));
  detail::write_file(path, bytes);
}

}  // namespace toddler
