#pragma once

// Minimal libpng wrappers: 8-bit RGB frames and 8-bit palette-indexed masks.

#include <png.h>

#include <array>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "mits/error.hpp"
#include "mits/geometry.hpp"

namespace mits {

/// Interleaved RGB image, values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int h, int w, float fill = 0.f) : height(h), width(w), rgb(std::size_t(h) * w * 3, fill) {}
  float& at(int r, int c, int ch) { return rgb[(std::size_t(r) * width + c) * 3 + ch]; }
  float at(int r, int c, int ch) const { return rgb[(std::size_t(r) * width + c) * 3 + ch]; }
  friend bool operator==(const Image&, const Image&) = default;
};

using Palette = std::vector<std::array<std::uint8_t, 3>>;

/// The 256-entry bit-interleaved palette used by common VOS annotation sets.
inline Palette default_palette() {
  Palette pal(256);
  for (int i = 0; i < 256; ++i) {
    int r = 0, g = 0, b = 0, c = i;
    for (int j = 0; j < 8; ++j) {
      r |= ((c >> 0) & 1) << (7 - j);
      g |= ((c >> 1) & 1) << (7 - j);
      b |= ((c >> 2) & 1) << (7 - j);
      c >>= 3;
    }
    pal[i] = {std::uint8_t(r), std::uint8_t(g), std::uint8_t(b)};
  }
  return pal;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw Error(Errc::IoError, "cannot open " + path);
  return f;
}

[[noreturn]] inline void png_error_fn(png_structp, png_const_charp msg) { throw Error(Errc::IoError, msg); }
inline void png_warning_fn(png_structp, png_const_charp) {}

class PngWriter {
 public:
  explicit PngWriter(const std::string& path) : file_(open_file(path, "wb")) {
    png_ = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
    info_ = png_create_info_struct(png_);
    png_init_io(png_, file_.get());
  }
  ~PngWriter() { png_destroy_write_struct(&png_, &info_); }
  PngWriter(const PngWriter&) = delete;
  PngWriter& operator=(const PngWriter&) = delete;
  png_structp png() { return png_; }
  png_infop info() { return info_; }

 private:
  FilePtr file_;
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

class PngReader {
 public:
  explicit PngReader(const std::string& path) : file_(open_file(path, "rb")) {
    png_ = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
    info_ = png_create_info_struct(png_);
    png_init_io(png_, file_.get());
    png_read_info(png_, info_);
  }
  ~PngReader() { png_destroy_read_struct(&png_, &info_, nullptr); }
  PngReader(const PngReader&) = delete;
  PngReader& operator=(const PngReader&) = delete;
  png_structp png() { return png_; }
  png_infop info() { return info_; }

  std::vector<std::uint8_t> read_rows(int channels) {
    const int h = png_get_image_height(png_, info_), w = png_get_image_width(png_, info_);
    std::vector<std::uint8_t> buf(std::size_t(h) * w * channels);
    std::vector<png_bytep> rows(h);
    for (int r = 0; r < h; ++r) rows[r] = buf.data() + std::size_t(r) * w * channels;
    png_read_image(png_, rows.data());
    png_read_end(png_, nullptr);
    return buf;
  }

 private:
  FilePtr file_;
  png_structp png_ = nullptr;
  png_infop info_ = nullptr;
};

}  // namespace detail

inline std::uint8_t to_byte(float v) {
  const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return std::uint8_t(c * 255.f + 0.5f);
}

inline void write_png_rgb(const std::string& path, const Image& img) {
  detail::PngWriter w(path);
  png_set_IHDR(w.png(), w.info(), img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(w.png(), w.info());
  std::vector<std::uint8_t> row(std::size_t(img.width) * 3);
  for (int r = 0; r < img.height; ++r) {
    for (int i = 0; i < img.width * 3; ++i) row[i] = to_byte(img.rgb[std::size_t(r) * img.width * 3 + i]);
    png_write_row(w.png(), row.data());
  }
  png_write_end(w.png(), nullptr);
}

inline Image read_png_rgb(const std::string& path) {
  detail::PngReader rd(path);
  auto* p = rd.png();
  auto* info = rd.info();
  const int color = png_get_color_type(p, info);
  if (png_get_bit_depth(p, info) == 16) png_set_strip_16(p);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(p);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(p);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(p);
  if (png_get_bit_depth(p, info) < 8) png_set_packing(p);
  png_read_update_info(p, info);
  Image img(png_get_image_height(p, info), png_get_image_width(p, info));
  auto buf = rd.read_rows(3);
  for (std::size_t i = 0; i < buf.size(); ++i) img.rgb[i] = float(buf[i]) / 255.f;
  return img;
}

inline void write_png_indexed(const std::string& path, const Grid<std::uint8_t>& idx,
                              const Palette& palette = default_palette()) {
  detail::PngWriter w(path);
  png_set_IHDR(w.png(), w.info(), idx.cols(), idx.rows(), 8, PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  std::vector<png_color> pal(palette.size());
  for (std::size_t i = 0; i < palette.size(); ++i) pal[i] = {palette[i][0], palette[i][1], palette[i][2]};
  png_set_PLTE(w.png(), w.info(), pal.data(), int(pal.size()));
  png_write_info(w.png(), w.info());
  for (int r = 0; r < idx.rows(); ++r)
    png_write_row(w.png(), const_cast<png_bytep>(idx.data().data() + std::size_t(r) * idx.cols()));
  png_write_end(w.png(), nullptr);
}

struct IndexedPng {
  Grid<std::uint8_t> indices;
  Palette palette;
};

/// Reads palette indices without colour conversion. Non-indexed files raise
/// PaletteMismatch.
inline IndexedPng read_png_indexed(const std::string& path) {
  detail::PngReader rd(path);
  auto* p = rd.png();
  auto* info = rd.info();
  if (png_get_color_type(p, info) != PNG_COLOR_TYPE_PALETTE)
    throw Error(Errc::PaletteMismatch, path + " is not a palette-indexed PNG");
  if (png_get_bit_depth(p, info) < 8) png_set_packing(p);
  png_read_update_info(p, info);
  IndexedPng out;
  png_colorp pal = nullptr;
  int n = 0;
  png_get_PLTE(p, info, &pal, &n);
  for (int i = 0; i < n; ++i) out.palette.push_back({pal[i].red, pal[i].green, pal[i].blue});
  const int h = png_get_image_height(p, info), w = png_get_image_width(p, info);
  auto buf = rd.read_rows(1);
  out.indices = Grid<std::uint8_t>(h, w);
  std::copy(buf.begin(), buf.end(), out.indices.data().begin());
  return out;
}

}  // namespace mits
