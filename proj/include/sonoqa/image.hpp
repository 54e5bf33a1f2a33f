#pragma once

// Grayscale image container and 8-bit PNG / PGM codecs.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sonoqa/error.hpp"

namespace sonoqa {

// Row-major intensities in [0,1].
class GrayImage {
 public:
  GrayImage() = default;
  GrayImage(std::size_t width, std::size_t height, double fill = 0.0)
      : width_(width), height_(height), pixels_(width * height, fill) {
    if (width == 0 || height == 0) throw InputError("image extents must be positive");
  }

  std::size_t width() const noexcept { return width_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t size() const noexcept { return pixels_.size(); }
  bool empty() const noexcept { return pixels_.empty(); }

  double& at(std::size_t x, std::size_t y) { return pixels_[y * width_ + x]; }
  double at(std::size_t x, std::size_t y) const { return pixels_[y * width_ + x]; }

  std::vector<double>& pixels() noexcept { return pixels_; }
  const std::vector<double>& pixels() const noexcept { return pixels_; }

  void clamp() {
    for (auto& p : pixels_) p = std::clamp(p, 0.0, 1.0);
  }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<double> pixels_;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline std::vector<std::uint8_t> to_bytes(const GrayImage& img) {
  std::vector<std::uint8_t> out(img.size());
  std::transform(img.pixels().begin(), img.pixels().end(), out.begin(), to_byte);
  return out;
}

inline GrayImage from_bytes(std::size_t w, std::size_t h, const std::uint8_t* data) {
  GrayImage img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels()[i] = data[i] / 255.0;
  return img;
}

// Quantizes to the 8-bit grid, as a save/load round trip would.
inline GrayImage quantized(const GrayImage& img) {
  const auto b = to_bytes(img);
  return from_bytes(img.width(), img.height(), b.data());
}

inline void write_png(const GrayImage& img, const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width());
  pi.height = static_cast<png_uint_32>(img.height());
  pi.format = PNG_FORMAT_GRAY;
  const auto bytes = to_bytes(img);
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, bytes.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + pi.message);
}

inline GrayImage read_png(const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + pi.message);
  pi.format = PNG_FORMAT_GRAY;
  if (pi.width == 0 || pi.height == 0) {
    png_image_free(&pi);
    throw IoError("empty PNG " + path.string());
  }
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw IoError("corrupt PNG " + path.string() + ": " + pi.message);
  }
  return from_bytes(pi.width, pi.height, buf.data());
}

// Binary PGM (P5), maxval 255.
inline void write_pgm(const GrayImage& img, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "P5\n" << img.width() << ' ' << img.height() << "\n255\n";
  const auto bytes = to_bytes(img);
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path.string());
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto token = [&is]() {
    std::string t;
    while (is >> std::ws && is.peek() == '#') std::getline(is, t);
    is >> t;
    return t;
  };
  if (token() != "P5") throw IoError(path.string() + " is not a binary PGM");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError("malformed PGM header in " + path.string());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255) throw IoError("unsupported PGM geometry in " + path.string());
  is.get();
  std::vector<std::uint8_t> buf(w * h);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size())) throw IoError("truncated PGM " + path.string());
  GrayImage img(w, h);
  for (std::size_t i = 0; i < buf.size(); ++i) img.pixels()[i] = static_cast<double>(buf[i]) / maxval;
  return img;
}

// Dispatches on extension (.png / .pgm).
inline GrayImage read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return read_pgm(path);
  return read_png(path);
}

inline void write_image(const GrayImage& img, const std::filesystem::path& path) {
  if (path.extension() == ".pgm")
    write_pgm(img, path);
  else
    write_png(img, path);
}

}  // namespace sonoqa
