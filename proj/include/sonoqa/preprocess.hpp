#pragma once

// Overlay-text removal and Gaussian smoothing applied before feature extraction.

#include <algorithm>
#include <cmath>
#include <vector>

#include "sonoqa/error.hpp"
#include "sonoqa/image.hpp"

namespace sonoqa {

struct GaussianKernel {
  double sigma = 1.0;
  int radius = 3;
  std::vector<double> weights;  // (2r+1)^2, row-major over (dy, dx)

  int side() const { return 2 * radius + 1; }
  double at(int dx, int dy) const { return weights[(dy + radius) * side() + (dx + radius)]; }
};

inline int default_radius(double sigma) { return std::max(1, static_cast<int>(std::ceil(3.0 * sigma))); }

// Samples exp(-(x^2+y^2)/(2 sigma^2)) on integer offsets and normalizes to unit mass.
inline GaussianKernel gaussian_kernel(double sigma, int radius) {
  if (!(sigma > 0.0)) throw ConfigError("gaussian sigma must be positive");
  if (radius < 1) throw ConfigError("gaussian radius must be at least 1");
  GaussianKernel k{sigma, radius, {}};
  const int n = k.side();
  k.weights.resize(static_cast<std::size_t>(n * n));
  double total = 0.0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      total += k.weights[(dy + radius) * n + dx + radius] = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
  for (auto& w : k.weights) w /= total;
  return k;
}

inline GaussianKernel gaussian_kernel(double sigma) { return gaussian_kernel(sigma, default_radius(sigma)); }

inline std::vector<double> gaussian_kernel_1d(double sigma, int radius) {
  if (!(sigma > 0.0)) throw ConfigError("gaussian sigma must be positive");
  if (radius < 1) throw ConfigError("gaussian radius must be at least 1");
  std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int d = -radius; d <= radius; ++d) total += w[d + radius] = std::exp(-(d * d) / (2.0 * sigma * sigma));
  for (auto& v : w) v /= total;
  return w;
}

// Half-sample symmetric reflection (... b a | a b c ... x y | y x ...).
inline std::size_t reflect_index(long i, long n) {
  const long period = 2 * n;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < n ? m : period - 1 - m);
}

inline GrayImage smooth(const GrayImage& image, const GaussianKernel& kernel) {
  if (image.empty()) throw InputError("cannot smooth an empty image");
  const long w = static_cast<long>(image.width()), h = static_cast<long>(image.height()), r = kernel.radius;
  GrayImage out(image.width(), image.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long dy = -r; dy <= r; ++dy) {
        const std::size_t sy = reflect_index(y + dy, h);
        for (long dx = -r; dx <= r; ++dx)
          acc += kernel.at(static_cast<int>(dx), static_cast<int>(dy)) * image.at(reflect_index(x + dx, w), sy);
      }
      out.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = std::clamp(acc, 0.0, 1.0);
    }
  return out;
}

// Row pass then column pass with the 1-D factor of the same Gaussian.
inline GrayImage smooth_separable(const GrayImage& image, double sigma, int radius) {
  if (image.empty()) throw InputError("cannot smooth an empty image");
  const auto k = gaussian_kernel_1d(sigma, radius);
  const long w = static_cast<long>(image.width()), h = static_cast<long>(image.height());
  GrayImage tmp(image.width(), image.height()), out(image.width(), image.height());
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long d = -radius; d <= radius; ++d) acc += k[d + radius] * image.at(reflect_index(x + d, w), y);
      tmp.at(x, y) = acc;
    }
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long d = -radius; d <= radius; ++d) acc += k[d + radius] * tmp.at(x, reflect_index(y + d, h));
      out.at(x, y) = std::clamp(acc, 0.0, 1.0);
    }
  return out;
}

// 12% of the shorter edge, at least one pixel.
inline std::size_t default_border_band(const GrayImage& image) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(0.12 * std::min(image.width(), image.height()))));
}

// Replaces bright pixels (> threshold) inside the border band with the band's
// lower median. Overlay text in scanner output sits at the margins, so the
// interior is never touched.
inline GrayImage strip_overlay_text(const GrayImage& image, double threshold, std::size_t border_band) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("text threshold must lie in (0,1)");
  if (image.empty()) return image;
  const std::size_t w = image.width(), h = image.height();
  auto in_band = [&](std::size_t x, std::size_t y) {
    return x < border_band || y < border_band || x + border_band >= w || y + border_band >= h;
  };
  std::vector<double> band;
  bool any = false;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (in_band(x, y)) {
        band.push_back(image.at(x, y));
        any = any || image.at(x, y) > threshold;
      }
  if (!any) return image;
  const auto mid = band.begin() + static_cast<std::ptrdiff_t>((band.size() - 1) / 2);
  std::nth_element(band.begin(), mid, band.end());
  const double median = *mid;
  GrayImage out = image;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      if (in_band(x, y) && out.at(x, y) > threshold) out.at(x, y) = median;
  return out;
}

struct PreprocessConfig {
  double text_threshold = 0.9;
  double sigma = 1.0;
};

// Text removal followed by Gaussian smoothing.
inline GrayImage preprocess(const GrayImage& image, const PreprocessConfig& cfg = {}) {
  const GrayImage clean = strip_overlay_text(image, cfg.text_threshold, default_border_band(image));
  return smooth(clean, gaussian_kernel(cfg.sigma));
}

}  // namespace sonoqa
