#pragma once

// Raster plumbing for tiles, thumbnails and registration patches.
// TileImage is the storage type (8- or 16-bit grayscale samples plus the
// pixel-to-µm transform); FloatImage is the [0,1] working type used by the
// detector and the NCC machinery.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include <png.h>

#include "zmd/errors.hpp"
#include "zmd/geometry.hpp"

namespace zmd {

// Maps tile pixel (i,j) to slide coordinates: corner convention, so pixel
// (0,0) covers [origin, origin + mpp) on each axis.
struct TileTransform {
  double mpp = 0.25;
  double origin_x_um = 0.0;
  double origin_y_um = 0.0;

  PointUm pixel_corner_um(double i, double j) const {
    return PointUm{origin_x_um + i * mpp, origin_y_um + j * mpp};
  }
  PointUm pixel_center_um(int i, int j) const { return pixel_corner_um(i + 0.5, j + 0.5); }
};

struct TileImage {
  int width = 0;
  int height = 0;
  int bit_depth = 8;  // 8 or 16
  std::vector<uint16_t> samples;  // row-major grayscale
  TileTransform transform;

  uint16_t max_value() const { return bit_depth == 8 ? 255 : 65535; }
  uint16_t at(int x, int y) const { return samples[static_cast<std::size_t>(y) * width + x]; }
  uint16_t& at(int x, int y) { return samples[static_cast<std::size_t>(y) * width + x]; }

  bool same_pixels(const TileImage& o) const {
    return width == o.width && height == o.height && bit_depth == o.bit_depth &&
           samples == o.samples;
  }
};

struct FloatImage {
  int width = 0;
  int height = 0;
  std::vector<float> px;  // row-major

  FloatImage() = default;
  FloatImage(int w, int h, float fill = 0.0f)
      : width(w), height(h), px(static_cast<std::size_t>(w) * h, fill) {}

  float at(int x, int y) const { return px[static_cast<std::size_t>(y) * width + x]; }
  float& at(int x, int y) { return px[static_cast<std::size_t>(y) * width + x]; }
};

inline FloatImage to_float(const TileImage& t) {
  FloatImage f(t.width, t.height);
  const float scale = 1.0f / static_cast<float>(t.max_value());
  for (std::size_t i = 0; i < t.samples.size(); ++i) f.px[i] = t.samples[i] * scale;
  return f;
}

// ---------------------------------------------------------------------------
// PNG (grayscale, 8-bit)
// ---------------------------------------------------------------------------

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

inline void write_png8(const std::string& path, const TileImage& img) {
  if (img.bit_depth != 8)
    throw Error(ErrorCode::store, "png8 writer requires 8-bit samples: " + path);
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw Error(ErrorCode::store, "cannot open for write: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw Error(ErrorCode::store, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error(ErrorCode::store, "png write failed: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<png_byte> row(static_cast<std::size_t>(img.width));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      row[static_cast<std::size_t>(x)] = static_cast<png_byte>(img.at(x, y) & 0xFF);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

// Reads 8/16-bit gray or 8-bit RGB(A); color is collapsed to luma. Used both
// for tiles and for ingesting per-plane page images.
inline TileImage read_png(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw Error(ErrorCode::store, "cannot open for read: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw Error(ErrorCode::store, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw Error(ErrorCode::store, "corrupt png: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  int depth = png_get_bit_depth(png, info);
  int color = png_get_color_type(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);  // libpng reads big-endian words
  png_read_update_info(png, info);

  depth = png_get_bit_depth(png, info);
  color = png_get_color_type(png, info);
  const int channels = png_get_channels(png, info);

  TileImage img;
  img.width = static_cast<int>(w);
  img.height = static_cast<int>(h);
  img.bit_depth = depth == 16 ? 16 : 8;
  img.samples.resize(static_cast<std::size_t>(w) * h);

  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> row(rowbytes);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x) {
      uint32_t v = 0;
      if (channels >= 3) {
        // rec601 integer luma
        uint32_t r = row[x * channels + 0], g = row[x * channels + 1], b = row[x * channels + 2];
        v = (299 * r + 587 * g + 114 * b + 500) / 1000;
      } else if (depth == 16) {
        std::memcpy(&v, &row[x * 2], 2);
      } else {
        v = row[x];
      }
      img.samples[static_cast<std::size_t>(y) * w + x] = static_cast<uint16_t>(v);
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// ---------------------------------------------------------------------------
// raw16: loss-free 16-bit tiles for synthetic data.
// Layout: "ZR16" magic, u32 width, u32 height, u16 channels, u16 bit depth,
// then little-endian u16 samples row-major.
// ---------------------------------------------------------------------------

inline void write_raw16(const std::string& path, const TileImage& img) {
  if (img.bit_depth != 16)
    throw Error(ErrorCode::store, "raw16 writer requires 16-bit samples: " + path);
  std::FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw Error(ErrorCode::store, "cannot open for write: " + path);
  const char magic[4] = {'Z', 'R', '1', '6'};
  uint32_t w = static_cast<uint32_t>(img.width), h = static_cast<uint32_t>(img.height);
  uint16_t channels = 1, depth = 16;
  bool ok = std::fwrite(magic, 1, 4, fp) == 4 && std::fwrite(&w, 4, 1, fp) == 1 &&
            std::fwrite(&h, 4, 1, fp) == 1 && std::fwrite(&channels, 2, 1, fp) == 1 &&
            std::fwrite(&depth, 2, 1, fp) == 1 &&
            std::fwrite(img.samples.data(), 2, img.samples.size(), fp) == img.samples.size();
  std::fclose(fp);
  if (!ok) throw Error(ErrorCode::store, "short write: " + path);
}

inline TileImage read_raw16(const std::string& path) {
  std::FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw Error(ErrorCode::store, "cannot open for read: " + path);
  char magic[4];
  uint32_t w = 0, h = 0;
  uint16_t channels = 0, depth = 0;
  bool ok = std::fread(magic, 1, 4, fp) == 4 && std::memcmp(magic, "ZR16", 4) == 0 &&
            std::fread(&w, 4, 1, fp) == 1 && std::fread(&h, 4, 1, fp) == 1 &&
            std::fread(&channels, 2, 1, fp) == 1 && std::fread(&depth, 2, 1, fp) == 1 &&
            channels == 1 && depth == 16;
  TileImage img;
  if (ok) {
    img.width = static_cast<int>(w);
    img.height = static_cast<int>(h);
    img.bit_depth = 16;
    img.samples.resize(static_cast<std::size_t>(w) * h);
    ok = std::fread(img.samples.data(), 2, img.samples.size(), fp) == img.samples.size();
  }
  std::fclose(fp);
  if (!ok) throw Error(ErrorCode::store, "corrupt raw16 tile: " + path);
  return img;
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

// Bilinear resample used once at ingestion to bring native-resolution rasters
// to the working resolution.
inline TileImage resample_bilinear(const TileImage& src, double src_mpp, double dst_mpp) {
  if (!(src_mpp > 0.0) || !(dst_mpp > 0.0))
    throw Error(ErrorCode::invalid_geometry, "resolutions must be positive");
  TileImage dst;
  dst.bit_depth = src.bit_depth;
  dst.width = std::max(1, static_cast<int>(std::lround(src.width * src_mpp / dst_mpp)));
  dst.height = std::max(1, static_cast<int>(std::lround(src.height * src_mpp / dst_mpp)));
  dst.samples.resize(static_cast<std::size_t>(dst.width) * dst.height);
  const double scale = dst_mpp / src_mpp;
  for (int y = 0; y < dst.height; ++y) {
    const double sy = std::clamp((y + 0.5) * scale - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double fy = sy - y0;
    for (int x = 0; x < dst.width; ++x) {
      const double sx = std::clamp((x + 0.5) * scale - 0.5, 0.0, src.width - 1.0);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, src.width - 1);
      const double fx = sx - x0;
      const double v = (1 - fy) * ((1 - fx) * src.at(x0, y0) + fx * src.at(x1, y0)) +
                       fy * ((1 - fx) * src.at(x0, y1) + fx * src.at(x1, y1));
      dst.at(x, y) = static_cast<uint16_t>(std::lround(v));
    }
  }
  return dst;
}

// Block-average downsample for registration thumbnails.
inline FloatImage block_average(const FloatImage& src, int factor) {
  if (factor <= 1) return src;
  FloatImage dst((src.width + factor - 1) / factor, (src.height + factor - 1) / factor);
  for (int y = 0; y < dst.height; ++y) {
    for (int x = 0; x < dst.width; ++x) {
      double acc = 0.0;
      int n = 0;
      for (int j = y * factor; j < std::min((y + 1) * factor, src.height); ++j)
        for (int i = x * factor; i < std::min((x + 1) * factor, src.width); ++i) {
          acc += src.at(i, j);
          ++n;
        }
      dst.at(x, y) = n ? static_cast<float>(acc / n) : 0.0f;
    }
  }
  return dst;
}

}  // namespace zmd
