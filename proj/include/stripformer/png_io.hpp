// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "stripformer/data.hpp"

namespace stripformer {

// 8-bit RGB PNG in and out, values mapped to [0,1] by /255. Palette, gray,
// 16-bit, and alpha inputs are normalized to RGB8 on read.
inline Tensor<float> read_png_rgb(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!fp) throw UsageError("cannot open image '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng init failed");
  }
  std::vector<png_byte> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw UsageError("'" + path + "' is not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw UsageError("'" + path + "' did not normalize to RGB");
  }
  pixels.resize(static_cast<size_t>(w) * h * 3);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + static_cast<size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> img({3, static_cast<int64_t>(h), static_cast<int64_t>(w)});
  auto d = img.data_mut();
  for (png_uint_32 y = 0; y < h; ++y) {
    for (png_uint_32 x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        d[(c * h + y) * w + x] = pixels[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.0f;
      }
    }
  }
  return img;
}

inline void write_png_rgb(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 3 || img.extent(0) != 3) {
    throw ShapeError("write_png_rgb: expected [3,H,W], got " + shape_str(img.shape()));
  }
  const int64_t h = img.extent(1), w = img.extent(2);
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw UsageError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng init failed");
  }
  std::vector<png_byte> pixels(static_cast<size_t>(h) * w * 3);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw UsageError("PNG write failed for '" + path + "'");
  }
  auto d = img.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(d[(c * h + y) * w + x], 0.0f, 1.0f);
        pixels[(static_cast<size_t>(y) * w + x) * 3 + c] =
            static_cast<png_byte>(std::lround(v * 255.0f));
      }
    }
    rows[static_cast<size_t>(y)] = pixels.data() + static_cast<size_t>(y) * w * 3;
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Generic paired-folder loader: <dir>/blur/*.png matched with
// <dir>/sharp/*.png by filename.
inline std::vector<ImagePair<float>> load_image_pairs(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path blur_dir = fs::path(dir) / "blur";
  const fs::path sharp_dir = fs::path(dir) / "sharp";
  if (!fs::is_directory(blur_dir) || !fs::is_directory(sharp_dir)) {
    throw UsageError("dataset '" + dir + "' needs blur/ and sharp/ subdirectories");
  }
  std::map<std::string, fs::path> sharp_files;
  for (const auto& e : fs::directory_iterator(sharp_dir)) {
    if (e.path().extension() == ".png") sharp_files[e.path().filename().string()] = e.path();
  }
  std::vector<ImagePair<float>> pairs;
  std::vector<fs::path> blur_files;
  for (const auto& e : fs::directory_iterator(blur_dir)) {
    if (e.path().extension() == ".png") blur_files.push_back(e.path());
  }
  std::sort(blur_files.begin(), blur_files.end());
  for (const auto& b : blur_files) {
    auto it = sharp_files.find(b.filename().string());
    if (it == sharp_files.end()) continue;
    ImagePair<float> p;
    p.blurred = read_png_rgb(b.string());
    p.sharp = read_png_rgb(it->second.string());
    if (p.blurred.shape() != p.sharp.shape()) {
      throw UsageError("pair '" + b.filename().string() + "' has mismatched sizes");
    }
    p.provenance = b.string();
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) throw UsageError("no matched PNG pairs under '" + dir + "'");
  return pairs;
}

}  // namespace stripformer
