#pragma once

// 8/16-bit raster I/O: binary PNM (P5/P6) and PNG through libpng.

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "fundus/errors.hpp"
#include "fundus/io_util.hpp"

namespace fundus {

/// Interleaved raster, row-major, `channels` samples per pixel.
struct Raster {
  std::size_t width = 0, height = 0, channels = 1;
  std::uint32_t maxval = 255;  // 255 or 65535
  std::vector<std::uint16_t> samples;

  Raster() = default;
  Raster(std::size_t w, std::size_t h, std::size_t c, std::uint32_t mv)
      : width(w), height(h), channels(c), maxval(mv), samples(w * h * c, 0) {}

  std::uint16_t& at(std::size_t row, std::size_t col, std::size_t ch = 0) { return samples[(row * width + col) * channels + ch]; }
  std::uint16_t at(std::size_t row, std::size_t col, std::size_t ch = 0) const {
    return samples[(row * width + col) * channels + ch];
  }
};

namespace detail {

class PnmCursor {
 public:
  PnmCursor(const std::string& bytes, const fs::path& path) : b_(bytes), path_(path) {}

  std::size_t next_uint() {
    skip_space();
    if (pos_ >= b_.size() || !std::isdigit(static_cast<unsigned char>(b_[pos_]))) fail("malformed header");
    std::size_t v = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_++] - '0');
      if (v > (1u << 30)) fail("header value out of range");
    }
    return v;
  }
  // exactly one whitespace byte separates the header from the raster
  void end_header() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) fail("malformed header");
    ++pos_;
  }
  std::size_t pos() const { return pos_; }
  [[noreturn]] void fail(const std::string& what) const { throw DataError(path_.string() + ": " + what); }

 private:
  void skip_space() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }
  const std::string& b_;
  const fs::path& path_;
  std::size_t pos_ = 2;
};

}  // namespace detail

inline Raster read_pnm(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw DataError(path.string() + ": not a binary PGM/PPM file");
  detail::PnmCursor cur(bytes, path);
  const std::size_t channels = bytes[1] == '6' ? 3 : 1;
  const std::size_t w = cur.next_uint(), h = cur.next_uint(), mv = cur.next_uint();
  cur.end_header();
  if (w == 0 || h == 0) cur.fail("empty raster");
  if (mv == 0 || mv > 65535) cur.fail("unsupported maxval");
  Raster r(w, h, channels, mv > 255 ? 65535 : 255);
  r.maxval = static_cast<std::uint32_t>(mv);
  const std::size_t bps = mv > 255 ? 2 : 1;
  const std::size_t need = w * h * channels * bps;
  if (bytes.size() - cur.pos() < need) cur.fail("truncated raster");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + cur.pos());
  for (std::size_t i = 0; i < r.samples.size(); ++i)
    r.samples[i] = bps == 2 ? static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]) : p[i];
  return r;
}

inline std::string encode_pnm(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw DataError("pnm: only 1 or 3 channels");
  std::string out = (r.channels == 3 ? "P6\n" : "P5\n") + std::to_string(r.width) + " " + std::to_string(r.height) + "\n" +
                    std::to_string(r.maxval) + "\n";
  const bool wide = r.maxval > 255;
  out.reserve(out.size() + r.samples.size() * (wide ? 2 : 1));
  for (std::uint16_t v : r.samples) {
    if (wide) out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v & 0xff));
  }
  return out;
}

inline void write_pnm(const fs::path& path, const Raster& r) { write_file_atomic(path, encode_pnm(r)); }

namespace detail {

struct PngReadBuffer {
  const std::string* bytes;
  std::size_t pos;
};

inline void png_read_from_buffer(png_structp png, png_bytep out, png_size_t n) {
  auto* buf = static_cast<PngReadBuffer*>(png_get_io_ptr(png));
  if (buf->pos + n > buf->bytes->size()) png_error(png, "truncated stream");
  std::memcpy(out, buf->bytes->data() + buf->pos, n);
  buf->pos += n;
}

inline void png_write_to_string(png_structp png, png_bytep data, png_size_t n) {
  static_cast<std::string*>(png_get_io_ptr(png))->append(reinterpret_cast<const char*>(data), n);
}

inline void png_flush_noop(png_structp) {}

[[noreturn]] inline void png_throw(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  *what = msg;
  png_longjmp(png, 1);
}

}  // namespace detail

/// Decodes gray, gray+alpha, RGB and RGBA PNGs; alpha is dropped and palettes expanded.
inline Raster read_png(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8))
    throw DataError(path.string() + ": not a PNG file");
  auto err = std::make_unique<std::string>();
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, err.get(), detail::png_throw, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("png: out of memory");
  }
  detail::PngReadBuffer buf{&bytes, 0};
  // everything mutated between setjmp and longjmp lives behind this pointer
  struct State {
    Raster r;
    int out_depth = 8;
    std::vector<unsigned char> pixels;
    std::vector<png_bytep> rows;
  };
  auto st = std::make_unique<State>();
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + ": " + *err);
  }
  png_set_read_fn(png, &buf, detail::png_read_from_buffer);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  st->r.width = png_get_image_width(png, info);
  st->r.height = png_get_image_height(png, info);
  st->r.channels = png_get_channels(png, info);
  st->out_depth = png_get_bit_depth(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  st->pixels.resize(stride * st->r.height);
  st->rows.resize(st->r.height);
  for (std::size_t y = 0; y < st->r.height; ++y) st->rows[y] = st->pixels.data() + y * stride;
  png_read_image(png, st->rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Raster r = std::move(st->r);
  const bool wide = st->out_depth == 16;
  r.maxval = wide ? 65535 : 255;
  r.samples.resize(r.width * r.height * r.channels);
  for (std::size_t y = 0; y < r.height; ++y) {
    const unsigned char* row = st->rows[y];
    for (std::size_t i = 0; i < r.width * r.channels; ++i)
      r.samples[y * r.width * r.channels + i] =
          wide ? static_cast<std::uint16_t>((row[2 * i] << 8) | row[2 * i + 1]) : row[i];
  }
  return r;
}

inline std::string encode_png(const Raster& r) {
  if (r.channels != 1 && r.channels != 3) throw DataError("png: only 1 or 3 channels");
  auto err = std::make_unique<std::string>();
  auto out = std::make_unique<std::string>();
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, err.get(), detail::png_throw, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("png: out of memory");
  }
  const bool wide = r.maxval > 255;
  const std::size_t stride = r.width * r.channels * (wide ? 2 : 1);
  std::vector<unsigned char> pixels(stride * r.height);
  for (std::size_t i = 0; i < r.samples.size(); ++i) {
    if (wide) {
      pixels[2 * i] = static_cast<unsigned char>(r.samples[i] >> 8);
      pixels[2 * i + 1] = static_cast<unsigned char>(r.samples[i] & 0xff);
    } else {
      pixels[i] = static_cast<unsigned char>(r.samples[i]);
    }
  }
  std::vector<png_bytep> rows(r.height);
  for (std::size_t y = 0; y < r.height; ++y) rows[y] = pixels.data() + y * stride;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png encode: " + *err);
  }
  png_set_write_fn(png, out.get(), detail::png_write_to_string, detail::png_flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), wide ? 16 : 8,
               r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return std::move(*out);
}

inline void write_png(const fs::path& path, const Raster& r) { write_file_atomic(path, encode_png(r)); }

/// Dispatch on extension: .png through libpng, anything else as PNM.
inline Raster read_raster(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("missing file: " + path.string());
  return path.extension() == ".png" ? read_png(path) : read_pnm(path);
}

}  // namespace fundus
