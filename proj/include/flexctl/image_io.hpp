#pragma once

// Binary PPM (P6) and PGM (P5) with maxval 255.
// Images map [-1, 1] -> [0, 255]; condition maps map [0, 1] -> [0, 255].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "flexctl/checkpoint.hpp"
#include "flexctl/errors.hpp"

namespace flexctl {

struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;       // 1 (PGM) or 3 (PPM)
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

inline std::uint8_t quantize_signed(double v) {
  const double q = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(q);
}
inline double dequantize_signed(std::uint8_t q) { return static_cast<double>(q) / 127.5 - 1.0; }

inline std::uint8_t quantize_unit(double v) { return static_cast<std::uint8_t>(std::round(std::clamp(v, 0.0, 1.0) * 255.0)); }
inline double dequantize_unit(std::uint8_t q) { return static_cast<double>(q) / 255.0; }

inline void write_netpbm(const RawImage& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3) throw UsageError("netpbm images have 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels) throw UsageError("netpbm pixel count mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

inline RawImage parse_netpbm(const std::string& bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > 1u << 20) throw ParseError(std::string("netpbm ") + what + " too large", start);
      ++pos;
    }
    if (pos == start) throw ParseError(std::string("netpbm: expected ") + what, start);
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw ParseError("not a binary PGM/PPM file", 0);
  }
  RawImage img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  pos = 2;
  img.width = number("width");
  img.height = number("height");
  const std::size_t at = pos;
  const std::size_t maxval = number("maxval");
  if (maxval != 255) throw ParseError("only maxval 255 is supported", at);
  if (img.width == 0 || img.height == 0) throw ParseError("netpbm: zero-sized image", at);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ParseError("netpbm: missing separator before pixel data", pos);
  }
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (bytes.size() - pos < n) throw ParseError("netpbm: truncated pixel data", bytes.size());
  if (bytes.size() - pos > n) throw ParseError("netpbm: trailing bytes after pixel data", pos + n);
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return img;
}

inline RawImage read_netpbm(const std::filesystem::path& path) { return parse_netpbm(read_file_bytes(path)); }

// [C, H, W] planar values in [-1, 1] -> interleaved 8-bit image.
inline RawImage image_from_planar(const std::vector<float>& chw, std::size_t c, std::size_t h, std::size_t w) {
  if (chw.size() != c * h * w) throw DimensionError("image_from_planar: size mismatch");
  RawImage img{w, h, c, std::vector<std::uint8_t>(c * h * w)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < h * w; ++i) img.pixels[i * c + ch] = quantize_signed(chw[ch * h * w + i]);
  }
  return img;
}

// Interleaved 8-bit image -> [C, H, W] planar values in [-1, 1].
inline std::vector<float> planar_from_image(const RawImage& img) {
  const std::size_t c = img.channels, hw = img.width * img.height;
  std::vector<float> out(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = static_cast<float>(dequantize_signed(img.pixels[i * c + ch]));
  }
  return out;
}

// Single-channel map in [0, 1] as a PGM.
inline RawImage map_to_image(const std::vector<float>& map, std::size_t h, std::size_t w) {
  if (map.size() != h * w) throw DimensionError("map_to_image: size mismatch");
  RawImage img{w, h, 1, std::vector<std::uint8_t>(h * w)};
  for (std::size_t i = 0; i < h * w; ++i) img.pixels[i] = quantize_unit(map[i]);
  return img;
}

// Condition map in [0, 1] from a PGM, or from the channel mean of a PPM.
inline std::vector<float> read_condition(const std::filesystem::path& path, std::size_t h, std::size_t w) {
  RawImage img;
  try {
    img = read_netpbm(path);
  } catch (const ParseError& e) {
    throw IoError("unreadable condition image '" + path.string() + "': " + e.what());
  }
  if (img.width != w || img.height != h) {
    throw DimensionError("condition image '" + path.string() + "' is " + std::to_string(img.width) + "x" +
                         std::to_string(img.height) + ", expected " + std::to_string(w) + "x" + std::to_string(h));
  }
  std::vector<float> out(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < img.channels; ++c) s += dequantize_unit(img.pixels[i * img.channels + c]);
    out[i] = static_cast<float>(s / static_cast<double>(img.channels));
  }
  return out;
}

}  // namespace flexctl
