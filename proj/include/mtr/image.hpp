// SPDX-License-Identifier: Apache-2.0
//
// 8-bit RGB images, binary PPM (P6) I/O and seeded synthetic inputs.
#pragma once

#include <cctype>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "mtr/errors.hpp"

namespace mtr {

struct RgbImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;  // height x width x 3, row-major

  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

// Float view in [0, 1], height x width x channels.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 3;
  std::vector<float> values;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }

  static Image from_rgb(const RgbImage& rgb) {
    Image img{rgb.height, rgb.width, 3, std::vector<float>(rgb.pixels.size())};
    for (std::size_t i = 0; i < rgb.pixels.size(); ++i) img.values[i] = static_cast<float>(rgb.pixels[i]) / 255.0f;
    return img;
  }
};

inline RgbImage synthetic_image(std::size_t width, std::size_t height, std::uint64_t seed) {
  RgbImage img{width, height, std::vector<std::uint8_t>(width * height * 3)};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(byte(rng));
  return img;
}

namespace detail {

inline std::string ppm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c = in.get();
  while (in) {
    if (c == '#') {
      while (in && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      if (!tok.empty()) break;
    } else {
      tok.push_back(static_cast<char>(c));
    }
    c = in.get();
  }
  if (tok.empty()) throw FormatError("'" + path + "': truncated PPM header");
  return tok;
}

}  // namespace detail

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image '" + path + "'");
  if (detail::ppm_token(in, path) != "P6") throw FormatError("'" + path + "' is not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(detail::ppm_token(in, path));
    h = std::stoul(detail::ppm_token(in, path));
    maxval = std::stoul(detail::ppm_token(in, path));
  } catch (const std::logic_error&) {
    throw FormatError("'" + path + "': malformed PPM header");
  }
  if (maxval != 255) throw FormatError("'" + path + "': only 8-bit PPM (maxval 255) is supported");
  RgbImage img{w, h, std::vector<std::uint8_t>(w * h * 3)};
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size()))
    throw TruncationError("'" + path + "': pixel data truncated");
  return img;
}

inline void write_ppm(const RgbImage& img, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

}  // namespace mtr
