#pragma once

// Global average pooling and spatial pyramid pooling as differentiable ops.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "sonoqa/autograd.hpp"

namespace sonoqa {

// Half-open rectangle of feature-map cells.
struct CellWindow {
  std::size_t y0 = 0, y1 = 1, x0 = 0, x1 = 1;
  std::size_t height() const { return y1 - y0; }
  std::size_t width() const { return x1 - x0; }
};

inline std::size_t spp_bins(const std::vector<std::size_t>& levels) {
  std::size_t n = 0;
  for (auto g : levels) n += g * g;
  return n;
}

namespace detail {

// Cell [start, end) of bin i when an extent of n is split into g bins.
// Boundaries sit at floor(i*n/g); a bin always covers at least one element, so
// grids finer than the extent reuse elements.
inline std::pair<std::size_t, std::size_t> spp_cell(std::size_t i, std::size_t g, std::size_t n) {
  std::size_t start = i * n / g;
  if (start > n - 1) start = n - 1;
  std::size_t end = (i + 1) * n / g;
  if (end < start + 1) end = start + 1;
  return {start, end};
}

// Max-pools one window of a [C,H,W] map. Writes C*bins values and their
// flat argmax indices; ties resolve to the first element in scan order.
template <typename T>
void spp_window(const Tensor<T>& map, const CellWindow& win, const std::vector<std::size_t>& levels, T* out,
                std::size_t* arg) {
  const std::size_t c = map.dim(0), h = map.dim(1), w = map.dim(2);
  const std::size_t wh = win.height(), ww = win.width();
  std::size_t o = 0;
  for (auto g : levels)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t gy = 0; gy < g; ++gy) {
        const auto [ys, ye] = spp_cell(gy, g, wh);
        for (std::size_t gx = 0; gx < g; ++gx, ++o) {
          const auto [xs, xe] = spp_cell(gx, g, ww);
          std::size_t best = (ch * h + win.y0 + ys) * w + win.x0 + xs;
          T bv = map[best];
          for (std::size_t y = ys; y < ye; ++y)
            for (std::size_t x = xs; x < xe; ++x) {
              const std::size_t idx = (ch * h + win.y0 + y) * w + win.x0 + x;
              if (map[idx] > bv) {
                bv = map[idx];
                best = idx;
              }
            }
          out[o] = bv;
          arg[o] = best;
        }
      }
}

}  // namespace detail

namespace ag {

// [C,H,W] -> [C], per-channel arithmetic mean.
template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  if (x.value().rank() != 3) throw DimensionError("global_avg_pool needs [C,H,W], got " + shape_str(x.shape()));
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  Tensor<T> out({c});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T s = T(0);
    for (std::size_t p = 0; p < hw; ++p) s += xv[ch * hw + p];
    out[ch] = s / static_cast<T>(hw);
  }
  return x.tape().record("global_avg_pool", std::move(out), {x}, [x, c, hw](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) gx[ch * hw + p] += g[ch] / static_cast<T>(hw);
  });
}

// Spatial pyramid max pooling of a [C,H,W] map into C * sum(g^2) values.
// Layout: grids in the order given, then channel, then bin row-major.
template <typename T>
Var<T> spp(const Var<T>& x, const std::vector<std::size_t>& levels) {
  if (x.value().rank() != 3) throw DimensionError("spp needs [C,H,W], got " + shape_str(x.shape()));
  if (levels.empty()) throw DimensionError("spp needs at least one grid level");
  for (auto g : levels)
    if (g == 0) throw DimensionError("spp grid sizes must be positive");
  const std::size_t n = x.shape()[0] * spp_bins(levels);
  Tensor<T> out({n});
  std::vector<std::size_t> arg(n);
  sonoqa::detail::spp_window(x.value(), CellWindow{0, x.shape()[1], 0, x.shape()[2]}, levels, out.data(), arg.data());
  return x.tape().record("spp", std::move(out), {x}, [x, arg = std::move(arg)](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
  });
}

// SPP over several windows of one map: [C,H,W] -> [N, C * sum(g^2)].
template <typename T>
Var<T> roi_spp(const Var<T>& x, const std::vector<CellWindow>& windows, const std::vector<std::size_t>& levels) {
  if (x.value().rank() != 3) throw DimensionError("roi_spp needs [C,H,W]");
  if (windows.empty()) throw DimensionError("roi_spp with no windows");
  const std::size_t h = x.shape()[1], w = x.shape()[2];
  for (const auto& win : windows)
    if (win.y1 <= win.y0 || win.x1 <= win.x0 || win.y1 > h || win.x1 > w)
      throw DimensionError("roi_spp: window outside the feature map");
  const std::size_t d = x.shape()[0] * spp_bins(levels);
  Tensor<T> out({windows.size(), d});
  std::vector<std::size_t> arg(windows.size() * d);
  for (std::size_t i = 0; i < windows.size(); ++i)
    sonoqa::detail::spp_window(x.value(), windows[i], levels, out.data() + i * d, arg.data() + i * d);
  return x.tape().record("roi_spp", std::move(out), {x}, [x, arg = std::move(arg)](Tape<T>& t, const std::vector<T>& g) {
    if (T* gx = t.accum(x))
      for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
  });
}

}  // namespace ag
}  // namespace sonoqa
