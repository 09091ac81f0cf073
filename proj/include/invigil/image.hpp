#pragma once

// 8-bit RGB images: PNG through libpng's simplified API, plus binary PPM.

#include <png.h>

#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "invigil/error.hpp"

namespace invigil {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved RGB

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0)
      : width(w), height(h), rgb(w * h * 3, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) {
    return rgb[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }

  friend bool operator==(const Image&, const Image&) = default;
};

namespace detail {

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void check_image(const Image& image, const char* what) {
  if (image.width == 0 || image.height == 0 || image.rgb.size() != image.width * image.height * 3) {
    throw ImageError(std::string(what) + ": image buffer does not match " +
                     std::to_string(image.width) + "x" + std::to_string(image.height));
  }
}

} // namespace detail

inline Image decode_png(std::span<const std::uint8_t> bytes) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size())) {
    throw ImageError(std::string("png decode: ") + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  Image image(png.width, png.height);
  if (!png_image_finish_read(&png, nullptr, image.rgb.data(), 0, nullptr)) {
    png_image_free(&png);
    throw ImageError(std::string("png decode: ") + png.message);
  }
  return image;
}

inline std::vector<std::uint8_t> encode_png(const Image& image) {
  detail::check_image(image, "png encode");
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(png, size, 0, image.rgb.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode: ") + png.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.rgb.data(), 0, nullptr)) {
    throw ImageError(std::string("png encode: ") + png.message);
  }
  out.resize(size);
  return out;
}

/// Binary PPM (P6) with maxval 255.
inline Image decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&]() -> std::size_t {
    skip_space();
    std::size_t value = 0, digits = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9' && digits < 9) {
      value = value * 10 + (bytes[pos++] - '0');
      ++digits;
    }
    if (digits == 0) throw ImageError("ppm decode: malformed header");
    return value;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ImageError("ppm decode: not a binary P6 file");
  }
  pos = 2;
  const std::size_t w = number(), h = number(), maxval = number();
  if (w == 0 || h == 0) throw ImageError("ppm decode: empty image");
  if (maxval != 255) throw ImageError("ppm decode: only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  Image image(w, h);
  if (bytes.size() < pos + image.rgb.size()) throw ImageError("ppm decode: truncated raster");
  std::memcpy(image.rgb.data(), bytes.data() + pos, image.rgb.size());
  return image;
}

inline std::vector<std::uint8_t> encode_ppm(const Image& image) {
  detail::check_image(image, "ppm encode");
  const std::string header =
      "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.rgb.begin(), image.rgb.end());
  return out;
}

/// Decodes PNG or PPM by content.
inline Image decode_image(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t png_magic[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), png_magic, 4) == 0) return decode_png(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
  throw ImageError("unrecognized image format (expected PNG or binary PPM)");
}

inline Image read_image(const std::filesystem::path& path) {
  try {
    return decode_image(detail::slurp(path));
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("write failed for " + path.string());
}

/// Format chosen by extension: .ppm writes P6, anything else PNG.
inline void write_image(const std::filesystem::path& path, const Image& image) {
  write_bytes(path, path.extension() == ".ppm" ? encode_ppm(image) : encode_png(image));
}

/// File extensions accepted as frames.
inline bool is_image_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  return ext == ".png" || ext == ".ppm" || ext == ".PNG" || ext == ".PPM";
}

} // namespace invigil
