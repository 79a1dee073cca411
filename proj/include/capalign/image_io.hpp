// Copyright 2026 The Capalign Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <png.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "capalign/common.hpp"

namespace capalign {

// Channel-major pixel layout: row c of `pixels` is one channel, column
// y*width + x is one pixel, values in [0, 1]. The column index doubles as
// the flat region index used everywhere else in the library.
struct ImageRgb {
  int width = 0;
  int height = 0;
  Mat pixels;  // 3 x (height*width)
};

struct ImageGray {
  int width = 0;
  int height = 0;
  Mat pixels;  // 1 x (height*width)
};

inline unsigned char to_byte(double v) {
  double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<unsigned char>(std::lround(clamped * 255.0));
}

inline ImageRgb read_png(const std::string& path) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&png, path.c_str()) == 0) {
    throw std::invalid_argument("cannot read PNG " + path + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(png));
  if (png_image_finish_read(&png, nullptr, buffer.data(), 0, nullptr) == 0) {
    std::string msg = png.message;
    png_image_free(&png);
    throw std::invalid_argument("cannot decode PNG " + path + ": " + msg);
  }
  ImageRgb img;
  img.width = static_cast<int>(png.width);
  img.height = static_cast<int>(png.height);
  img.pixels = Mat(3, img.width * img.height);
  for (int i = 0; i < img.width * img.height; ++i)
    for (int c = 0; c < 3; ++c)
      img.pixels(c, i) = buffer[static_cast<std::size_t>(i) * 3 + c] / 255.0;
  return img;
}

inline void write_png(const std::string& path, const ImageRgb& img) {
  require(img.pixels.rows() == 3 && img.pixels.cols() == img.width * img.height,
          "write_png: pixel buffer does not match dimensions");
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(img.width);
  png.height = static_cast<png_uint_32>(img.height);
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int i = 0; i < img.width * img.height; ++i)
    for (int c = 0; c < 3; ++c)
      buffer[static_cast<std::size_t>(i) * 3 + c] = to_byte(img.pixels(c, i));
  if (png_image_write_to_file(&png, path.c_str(), 0, buffer.data(), 0, nullptr) == 0) {
    std::string msg = png.message;
    png_image_free(&png);
    throw std::invalid_argument("cannot write PNG " + path + ": " + msg);
  }
}

inline void write_pgm(const std::string& path, const ImageGray& img) {
  require(img.pixels.rows() == 1 && img.pixels.cols() == img.width * img.height,
          "write_pgm: pixel buffer does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write PGM " + path);
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  for (int i = 0; i < img.width * img.height; ++i) {
    unsigned char b = to_byte(img.pixels(0, i));
    out.write(reinterpret_cast<const char*>(&b), 1);
  }
}

inline ImageGray read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read PGM " + path);
  auto next_token = [&in, &path]() {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') {
        while ((ch = in.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    require(!tok.empty(), "truncated PGM header in " + path);
    return tok;
  };
  require(next_token() == "P5", path + " is not a binary PGM");
  ImageGray img;
  img.width = std::stoi(next_token());
  img.height = std::stoi(next_token());
  int maxval = std::stoi(next_token());
  require(img.width > 0 && img.height > 0 && maxval == 255,
          "unsupported PGM geometry in " + path);
  std::vector<char> buffer(static_cast<std::size_t>(img.width) * img.height);
  in.read(buffer.data(), static_cast<std::streamsize>(buffer.size()));
  require(in.gcount() == static_cast<std::streamsize>(buffer.size()),
          "truncated PGM payload in " + path);
  img.pixels = Mat(1, img.width * img.height);
  for (int i = 0; i < img.width * img.height; ++i)
    img.pixels(0, i) = static_cast<unsigned char>(buffer[static_cast<std::size_t>(i)]) / 255.0;
  return img;
}

}  // namespace capalign
