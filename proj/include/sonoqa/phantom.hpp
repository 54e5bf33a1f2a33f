#pragma once

// Synthetic section phantoms: each essential structure is a bright or dark
// primitive (ellipse, line, crescent, ring) at a plausible relative position,
// with speckle, shadow wedges, whole-plane rotation, confusable look-alikes
// and corner overlay text. Ground-truth boxes are the tight hull of each
// structure's rasterized support.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "sonoqa/dataset.hpp"
#include "sonoqa/image.hpp"
#include "sonoqa/random.hpp"

namespace sonoqa {

enum class DropoutMode { kRandom, kOmit, kFaint };

struct DegradeParams {
  double speckle_strength = 0.0;     // std of the multiplicative noise
  std::size_t shadow_count = 0;
  double shadow_opacity = 0.0;       // fraction of intensity removed inside a wedge
  double rotation_deg = 0.0;
  std::vector<std::size_t> dropout;  // structure ids to omit or render faint
  DropoutMode dropout_mode = DropoutMode::kRandom;
  double distractor_rate = 0.0;      // chance of a confusable look-alike
  double text_rate = 0.0;            // chance of corner overlay text

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(speckle_strength)) throw ConfigError("speckle_strength must lie in [0,1]");
    if (!unit(shadow_opacity)) throw ConfigError("shadow_opacity must lie in [0,1]");
    if (!(rotation_deg >= -45.0 && rotation_deg <= 45.0)) throw ConfigError("rotation must lie in [-45, 45] degrees");
    if (!unit(distractor_rate) || !unit(text_rate)) throw ConfigError("distractor/text rates must lie in [0,1]");
  }
};

namespace phantom_detail {

struct Shape {
  enum class Kind { kEllipse, kRing, kSegment };
  Kind kind = Kind::kEllipse;
  double cx = 0, cy = 0, a = 1, b = 1, angle = 0;  // ellipse / ring (angle in radians)
  double thickness = 0;                            // ring, in units of the semi-axes
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0, half = 1; // segment

  bool contains(double x, double y) const {
    if (kind == Kind::kSegment) {
      const double vx = x1 - x0, vy = y1 - y0;
      const double len2 = vx * vx + vy * vy;
      const double t = len2 > 0 ? std::clamp(((x - x0) * vx + (y - y0) * vy) / len2, 0.0, 1.0) : 0.0;
      const double dx = x - (x0 + t * vx), dy = y - (y0 + t * vy);
      return dx * dx + dy * dy <= half * half;
    }
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = ((x - cx) * c + (y - cy) * s) / a;
    const double v = (-(x - cx) * s + (y - cy) * c) / b;
    const double r = std::sqrt(u * u + v * v);
    if (kind == Kind::kEllipse) return r <= 1.0;
    return std::abs(r - 1.0) <= thickness;
  }
};

// Shapes are built from braced specs so that random draws in the arguments
// happen left to right.
struct EllipseSpec {
  double cx, cy, a, b, angle_deg = 0.0;
};
struct SegmentSpec {
  double x0, y0, x1, y1, half;
};

inline Shape ellipse(const EllipseSpec& e) {
  Shape s;
  s.cx = e.cx, s.cy = e.cy, s.a = e.a, s.b = e.b, s.angle = e.angle_deg * std::numbers::pi / 180.0;
  return s;
}

inline Shape ring(const EllipseSpec& e, double thickness) {
  Shape s = ellipse(e);
  s.kind = Shape::Kind::kRing;
  s.thickness = thickness;
  return s;
}

inline Shape segment(const SegmentSpec& g) {
  Shape s;
  s.kind = Shape::Kind::kSegment;
  s.x0 = g.x0, s.y0 = g.y0, s.x1 = g.x1, s.y1 = g.y1, s.half = g.half;
  return s;
}

// Union of `add` minus union of `cut`, painted at one intensity.
struct Primitive {
  std::vector<Shape> add, cut;
  double intensity = 0.0;

  bool contains(double x, double y) const {
    bool in = false;
    for (const auto& s : add)
      if (s.contains(x, y)) {
        in = true;
        break;
      }
    if (!in) return false;
    for (const auto& s : cut)
      if (s.contains(x, y)) return false;
    return true;
  }
};

struct Element {
  Primitive prim;
  int structure = -1;   // -1: anatomy context or distractor
  bool distractor = false;
  double contrast = 1.0;
};

// Per-sample geometric jitter in the canonical 128-unit frame.
struct Jitter {
  double scale = 1.0;
  Rng* rng = nullptr;
  double center = 64.0;

  double pos(double v, double amount = 2.5) const { return center + scale * (v - center) + rng->uniform(-amount, amount); }
  double len(double v) const { return v * scale * rng->uniform(0.9, 1.1); }
  double level(double v) const { return std::clamp(v + rng->uniform(-0.04, 0.04), 0.0, 1.0); }
};

struct Layout {
  double background = 0.08;
  std::vector<Element> elements;  // painted in order
};

inline Element structure(int id, Primitive p) { return {std::move(p), id, false, 1.0}; }
inline Element context(Primitive p) { return {std::move(p), -1, false, 1.0}; }
inline Element distractor(Primitive p) { return {std::move(p), -1, true, 1.0}; }

inline Layout head_layout(Jitter& j, bool with_distractor) {
  Layout l;
  const double ra = j.len(52), rb = j.len(44);
  l.elements.push_back(context({{ellipse({j.center, j.center, ra, rb})}, {}, j.level(0.16)}));
  l.elements.push_back(context({{ring({j.center, j.center, ra, rb}, 0.06)}, {}, j.level(0.6)}));
  if (with_distractor) {
    const double x = j.pos(97, 3), y = j.pos(32, 3);
    l.elements.push_back(distractor({{segment({x, y, x + j.rng->uniform(2, 6), y + j.len(26), 2.5})}, {}, j.level(0.58)}));
  }
  // BM
  const double mx = j.pos(64);
  l.elements.push_back(structure(3, {{segment({mx, j.pos(29), mx + j.rng->uniform(-2, 2), j.pos(99), 3.5})}, {}, j.level(0.62)}));
  // T: paired ellipses
  const double ty = j.pos(68), tx = j.pos(64);
  const double ta = j.len(8), tb = j.len(11), tgap = 9.0 * j.scale;
  l.elements.push_back(structure(1, {{ellipse({tx - tgap, ty, ta, tb, 8}), ellipse({tx + tgap, ty, ta, tb, -8})}, {}, j.level(0.42)}));
  // TV: slit between the thalami
  l.elements.push_back(structure(2, {{ellipse({tx, ty + j.rng->uniform(-1, 1), j.len(4.5), j.len(11)})}, {}, j.level(0.03)}));
  // CSP
  l.elements.push_back(structure(0, {{ellipse({mx, j.pos(44), j.len(10), j.len(7)})}, {}, j.level(0.03)}));
  // LS: crescent
  const double lx = j.pos(33), ly = j.pos(60), la = j.len(8), lb = j.len(14);
  l.elements.push_back(structure(4, {{ellipse({lx, ly, la, lb})}, {ellipse({lx + 0.6 * la, ly, la, lb})}, j.level(0.64)}));
  // CP
  l.elements.push_back(structure(5, {{ellipse({j.pos(88), j.pos(80), j.len(11), j.len(6), j.rng->uniform(20, 40)})}, {}, j.level(0.74)}));
  return l;
}

inline Layout abdominal_layout(Jitter& j, bool with_distractor) {
  Layout l;
  const double r = j.len(52);
  l.elements.push_back(context({{ellipse({j.center, j.center, r, r * j.rng->uniform(0.92, 1.0)})}, {}, j.level(0.22)}));
  l.elements.push_back(context({{ring({j.center, j.center, r, r}, 0.07)}, {}, j.level(0.5)}));
  if (with_distractor)
    l.elements.push_back(distractor({{ellipse({j.pos(95, 3), j.pos(60, 3), j.len(11), j.len(5.5), j.rng->uniform(-45, -25)})}, {}, j.level(0.08)}));
  // ST
  l.elements.push_back(structure(0, {{ellipse({j.pos(44), j.pos(56), j.len(14), j.len(10), j.rng->uniform(-30, -10)})}, {}, j.level(0.04)}));
  // UV
  l.elements.push_back(structure(2, {{ellipse({j.pos(76), j.pos(45), j.len(12), j.len(5), j.rng->uniform(25, 45)})}, {}, j.level(0.06)}));
  // SP: three ossification centres
  const double sx = j.pos(64), sy = j.pos(97), sr = j.len(5);
  const double sd = 7.0 * j.scale;
  l.elements.push_back(structure(1, {{ellipse({sx, sy - sd * 0.8, sr, sr}), ellipse({sx - sd, sy + sd * 0.7, sr, sr}),
                                      ellipse({sx + sd, sy + sd * 0.7, sr, sr})},
                                     {},
                                     j.level(0.78)}));
  // AO
  const double ar = j.len(7);
  l.elements.push_back(structure(3, {{ellipse({j.pos(80), j.pos(80), ar, ar})}, {}, j.level(0.05)}));
  return l;
}

inline Layout heart_layout(Jitter& j, bool with_distractor) {
  Layout l;
  const double r = j.len(52);
  l.elements.push_back(context({{ellipse({j.center, j.center, r, r})}, {}, j.level(0.14)}));
  l.elements.push_back(context({{ring({j.center, j.center, r, r}, 0.07)}, {}, j.level(0.45)}));
  l.elements.push_back(context({{ellipse({j.pos(60), j.pos(61), j.len(34), j.len(30), -25})}, {}, j.level(0.42)}));
  if (with_distractor) {
    const double dr = j.len(6);
    l.elements.push_back(distractor({{ellipse({j.pos(36, 3), j.pos(96, 3), dr, dr})}, {}, j.level(0.07)}));
  }
  // RV, LV, RA, LA
  l.elements.push_back(structure(2, {{ellipse({j.pos(45), j.pos(48), j.len(10), j.len(12), 20})}, {}, j.level(0.04)}));
  l.elements.push_back(structure(0, {{ellipse({j.pos(72), j.pos(45), j.len(9), j.len(13), -20})}, {}, j.level(0.04)}));
  l.elements.push_back(structure(3, {{ellipse({j.pos(45), j.pos(75), j.len(10), j.len(9)})}, {}, j.level(0.04)}));
  l.elements.push_back(structure(1, {{ellipse({j.pos(73), j.pos(76), j.len(10), j.len(8)})}, {}, j.level(0.04)}));
  // DAO: lumen with a bright wall; the wall is part of the structure
  const double dx = j.pos(91), dy = j.pos(96), dr = j.len(7);
  l.elements.push_back(structure(4, {{ellipse({dx, dy, dr + 2.5, dr + 2.5})}, {}, j.level(0.62)}));
  l.elements.push_back(structure(4, {{ellipse({dx, dy, dr, dr})}, {}, j.level(0.05)}));
  return l;
}

// Wedge with apex above the image, darkening everything inside.
inline void apply_shadows(GrayImage& img, std::size_t count, double opacity, Rng& rng) {
  const double w = static_cast<double>(img.width()), h = static_cast<double>(img.height());
  for (std::size_t k = 0; k < count; ++k) {
    const double ax = rng.uniform(0.2, 0.8) * w, ay = -0.3 * h;
    const double dir = rng.uniform(-0.45, 0.45);  // radians from vertical
    const double half = rng.uniform(0.03, 0.07);
    for (std::size_t y = 0; y < img.height(); ++y)
      for (std::size_t x = 0; x < img.width(); ++x) {
        const double ang = std::atan2(static_cast<double>(x) + 0.5 - ax, static_cast<double>(y) + 0.5 - ay);
        if (std::abs(ang - dir) <= half) img.at(x, y) *= 1.0 - opacity;
      }
  }
}

inline void apply_speckle(GrayImage& img, double strength, Rng& rng) {
  if (strength <= 0.0) return;
  for (auto& p : img.pixels()) p *= std::max(0.0, 1.0 + strength * rng.normal());
}

// Bilinear rotation about the image centre; outside samples are 0.
inline GrayImage rotate_image(const GrayImage& img, double deg) {
  if (deg == 0.0) return img;
  const double t = deg * std::numbers::pi / 180.0, c = std::cos(t), s = std::sin(t);
  const double cx = 0.5 * static_cast<double>(img.width()), cy = 0.5 * static_cast<double>(img.height());
  GrayImage out(img.width(), img.height(), 0.0);
  const long w = static_cast<long>(img.width()), h = static_cast<long>(img.height());
  auto sample = [&](long x, long y) { return (x < 0 || y < 0 || x >= w || y >= h) ? 0.0 : img.at(x, y); };
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x) {
      const double qx = x + 0.5 - cx, qy = y + 0.5 - cy;
      const double px = c * qx + s * qy + cx - 0.5, py = -s * qx + c * qy + cy - 0.5;
      const long x0 = static_cast<long>(std::floor(px)), y0 = static_cast<long>(std::floor(py));
      const double fx = px - x0, fy = py - y0;
      out.at(x, y) = (1 - fx) * (1 - fy) * sample(x0, y0) + fx * (1 - fy) * sample(x0 + 1, y0) +
                     (1 - fx) * fy * sample(x0, y0 + 1) + fx * fy * sample(x0 + 1, y0 + 1);
    }
  return out;
}

// 3x5 block glyphs in the top corners, brighter than any anatomy.
inline void draw_overlay_text(GrayImage& img, Rng& rng) {
  const std::size_t rows = 5, glyph_w = 3;
  const std::size_t n = 3 + rng.below(4);
  const bool right = rng.bernoulli(0.5);
  const std::size_t span = n * (glyph_w + 1);
  if (img.width() < span + 4 || img.height() < rows + 4) return;
  const std::size_t x0 = right ? img.width() - span - 2 : 2, y0 = 2;
  const double level = rng.uniform(0.95, 1.0);
  for (std::size_t g = 0; g < n; ++g) {
    const std::uint64_t bits = rng.next();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < glyph_w; ++c)
        if ((bits >> (r * glyph_w + c)) & 1U) img.at(x0 + g * (glyph_w + 1) + c, y0 + r) = level;
  }
}

}  // namespace phantom_detail

// Axis-aligned hull of a box rotated by `deg` about (cx, cy), in the same
// sense as the image rotation (positive = counter-clockwise on screen).
inline Box rotate_box_hull(const Box& b, double deg, double cx, double cy) {
  if (deg == 0.0) return b;
  const double t = deg * std::numbers::pi / 180.0, c = std::cos(t), s = std::sin(t);
  const double xs[4] = {b.x_min, b.x_max, b.x_max, b.x_min}, ys[4] = {b.y_min, b.y_min, b.y_max, b.y_max};
  Box out{1e300, 1e300, -1e300, -1e300};
  for (int i = 0; i < 4; ++i) {
    const double dx = xs[i] - cx, dy = ys[i] - cy;
    const double x = c * dx - s * dy + cx, y = s * dx + c * dy + cy;
    out.x_min = std::min(out.x_min, x), out.x_max = std::max(out.x_max, x);
    out.y_min = std::min(out.y_min, y), out.y_max = std::max(out.y_max, y);
  }
  return out;
}

// Speckle, shadow wedges, then rotation about the centre.
inline GrayImage degrade(const GrayImage& image, const DegradeParams& params, std::uint64_t seed) {
  params.validate();
  GrayImage out = image;
  Rng rng = Rng::derive(seed, 3);
  phantom_detail::apply_speckle(out, params.speckle_strength, rng);
  if (params.shadow_opacity > 0.0) phantom_detail::apply_shadows(out, params.shadow_count, params.shadow_opacity, rng);
  out = phantom_detail::rotate_image(out, params.rotation_deg);
  if (params.speckle_strength > 0.0 || params.shadow_opacity > 0.0 || params.rotation_deg != 0.0) out.clamp();
  return out;
}

// Applies `degrade` to a sample, moving every box to its rotated hull
// (clipped to the image).
inline PhantomSample degrade_sample(PhantomSample s, const DegradeParams& params, std::uint64_t seed) {
  s.image = degrade(s.image, params, seed);
  const double w = static_cast<double>(s.image.width()), h = static_cast<double>(s.image.height());
  for (auto& a : s.annotations) a.box = clip_box(rotate_box_hull(a.box, params.rotation_deg, 0.5 * w, 0.5 * h), w, h);
  for (auto& b : s.distractors) b = clip_box(rotate_box_hull(b, params.rotation_deg, 0.5 * w, 0.5 * h), w, h);
  return s;
}

// Renders one section phantom. A non-standard sample degrades the structures
// in `params.dropout` (or one or two random ones when the set is empty).
// Dropout is ignored for standard samples.
inline PhantomSample generate_sample(Section section, bool standard, const DegradeParams& params, std::uint64_t seed,
                                     std::size_t image_size = 128) {
  params.validate();
  if (image_size < 32) throw ConfigError("phantom images must be at least 32 pixels wide");
  using namespace phantom_detail;
  Rng layout_rng = Rng::derive(seed, 1);
  Rng choice_rng = Rng::derive(seed, 2);
  Rng overlay_rng = Rng::derive(seed, 4);

  Jitter j{layout_rng.uniform(0.92, 1.08), &layout_rng};
  const bool with_distractor = layout_rng.bernoulli(params.distractor_rate);
  Layout layout = section == Section::kHead        ? head_layout(j, with_distractor)
                  : section == Section::kAbdominal ? abdominal_layout(j, with_distractor)
                                                   : heart_layout(j, with_distractor);
  const double tx = layout_rng.uniform(-4, 4), ty = layout_rng.uniform(-4, 4);
  std::array<double, 3> wave{};
  for (auto& v : wave) v = layout_rng.uniform(0.0, 2.0 * std::numbers::pi);

  const std::size_t k = structure_count(section);
  std::vector<int> omitted(k, 0), faint(k, 0);
  if (!standard) {
    std::vector<std::size_t> chosen = params.dropout;
    for (auto id : chosen)
      if (id >= k) throw ConfigError("dropout structure id out of range for section " + to_string(section));
    if (chosen.empty()) {
      std::vector<std::size_t> ids(k);
      for (std::size_t i = 0; i < k; ++i) ids[i] = i;
      choice_rng.shuffle(ids);
      chosen.assign(ids.begin(), ids.begin() + (choice_rng.bernoulli(0.3) ? 2 : 1));
    }
    for (auto id : chosen) {
      const bool omit = params.dropout_mode == DropoutMode::kOmit ||
                        (params.dropout_mode == DropoutMode::kRandom && choice_rng.bernoulli(0.5));
      (omit ? omitted : faint)[id] = 1;
    }
  }
  for (auto& e : layout.elements)
    if (e.structure >= 0 && faint[static_cast<std::size_t>(e.structure)]) e.contrast = choice_rng.uniform(0.22, 0.35);

  // Render in the canonical frame through the inverse rotation.
  const double unit = static_cast<double>(image_size) / 128.0;
  const double theta = params.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(theta), s = std::sin(theta);
  const double centre = 0.5 * static_cast<double>(image_size);
  GrayImage img(image_size, image_size, layout.background);
  std::vector<Box> hulls(layout.elements.size(), Box{1e300, 1e300, -1e300, -1e300});
  std::vector<int> touched(layout.elements.size(), 0);
  for (std::size_t y = 0; y < image_size; ++y)
    for (std::size_t x = 0; x < image_size; ++x) {
      const double qx = static_cast<double>(x) + 0.5 - centre, qy = static_cast<double>(y) + 0.5 - centre;
      const double px = (c * qx + s * qy + centre) / unit - tx, py = (-s * qx + c * qy + centre) / unit - ty;
      double v = layout.background + 0.02 * std::sin(px * 0.11 + wave[0]) * std::cos(py * 0.07 + wave[1]) +
                 0.015 * std::sin((px + py) * 0.05 + wave[2]);
      for (std::size_t e = 0; e < layout.elements.size(); ++e) {
        const Element& el = layout.elements[e];
        if (el.structure >= 0 && omitted[static_cast<std::size_t>(el.structure)]) continue;
        if (!el.prim.contains(px, py)) continue;
        v += el.contrast * (el.prim.intensity - v);
        Box& h = hulls[e];
        touched[e] = 1;
        h.x_min = std::min(h.x_min, static_cast<double>(x));
        h.y_min = std::min(h.y_min, static_cast<double>(y));
        h.x_max = std::max(h.x_max, static_cast<double>(x + 1));
        h.y_max = std::max(h.y_max, static_cast<double>(y + 1));
      }
      img.at(x, y) = v;
    }

  PhantomSample out;
  out.section = section;
  out.seed = seed;
  std::vector<std::optional<Box>> boxes(k);
  for (std::size_t e = 0; e < layout.elements.size(); ++e) {
    if (!touched[e]) continue;
    const Element& el = layout.elements[e];
    if (el.distractor) out.distractors.push_back(hulls[e]);
    if (el.structure < 0) continue;
    auto& b = boxes[static_cast<std::size_t>(el.structure)];
    if (!b) b = hulls[e];
    else b = Box{std::min(b->x_min, hulls[e].x_min), std::min(b->y_min, hulls[e].y_min),
                 std::max(b->x_max, hulls[e].x_max), std::max(b->y_max, hulls[e].y_max)};
  }
  for (std::size_t id = 0; id < k; ++id)
    if (boxes[id]) out.annotations.push_back({*boxes[id], id, faint[id] ? 0 : 1});

  DegradeParams noise = params;
  noise.rotation_deg = 0.0;
  out.image = degrade(img, noise, seed);
  if (overlay_rng.bernoulli(params.text_rate)) draw_overlay_text(out.image, overlay_rng);
  out.image.clamp();
  out.image = quantized(out.image);
  out.plane_label = derive_plane_label(section, out.annotations);
  return out;
}

// ------------------------------------------------------------------ datasets

struct DatasetConfig {
  std::map<Section, std::size_t> counts{{Section::kHead, 300}, {Section::kAbdominal, 300}, {Section::kHeart, 300}};
  double standard_ratio = 0.5;
  std::uint64_t seed = 42;
  std::size_t image_size = 128;
  double speckle_max = 0.3;
  std::size_t shadow_max = 2;
  double shadow_opacity_max = 0.4;
  double rotation_max_deg = 15.0;
  double distractor_rate = 0.35;
  double text_rate = 0.5;
  std::string format = "png";

  void validate() const {
    if (counts.empty()) throw ConfigError("dataset config lists no sections");
    for (const auto& [s, n] : counts)
      if (n < 5) throw ConfigError("need at least 5 samples for section " + to_string(s));
    if (!(standard_ratio >= 0.0 && standard_ratio <= 1.0)) throw ConfigError("standard_ratio must lie in [0,1]");
    if (format != "png" && format != "pgm") throw ConfigError("image format must be png or pgm");
    if (image_size % 32 != 0 || image_size < 32) throw ConfigError("image_size must be a positive multiple of 32");
    DegradeParams probe;
    probe.speckle_strength = speckle_max;
    probe.shadow_opacity = shadow_opacity_max;
    probe.rotation_deg = rotation_max_deg;
    probe.distractor_rate = distractor_rate;
    probe.text_rate = text_rate;
    probe.validate();
  }
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [s, n] : c.counts) counts[to_string(s)] = n;
  j = {{"counts", counts},
       {"standard_ratio", c.standard_ratio},
       {"seed", c.seed},
       {"image_size", c.image_size},
       {"speckle_max", c.speckle_max},
       {"shadow_max", c.shadow_max},
       {"shadow_opacity_max", c.shadow_opacity_max},
       {"rotation_max_deg", c.rotation_max_deg},
       {"distractor_rate", c.distractor_rate},
       {"text_rate", c.text_rate},
       {"format", c.format}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  if (!j.is_object()) throw ConfigError("dataset config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "counts") {
        c.counts.clear();
        for (const auto& [s, n] : v.items()) c.counts[parse_section(s)] = n.get<std::size_t>();
      } else if (key == "standard_ratio") c.standard_ratio = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "image_size") c.image_size = v.get<std::size_t>();
      else if (key == "speckle_max") c.speckle_max = v.get<double>();
      else if (key == "shadow_max") c.shadow_max = v.get<std::size_t>();
      else if (key == "shadow_opacity_max") c.shadow_opacity_max = v.get<double>();
      else if (key == "rotation_max_deg") c.rotation_max_deg = v.get<double>();
      else if (key == "distractor_rate") c.distractor_rate = v.get<double>();
      else if (key == "text_rate") c.text_rate = v.get<double>();
      else if (key == "format") c.format = v.get<std::string>();
      else throw ConfigError("unknown dataset config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for dataset config key '" + key + "': " + e.what());
    }
  }
}

inline std::uint64_t sample_seed(std::uint64_t seed, Section section, std::size_t index) {
  return Rng::derive(seed, static_cast<std::uint64_t>(section) + 1, index).next();
}

// Per-sample degradation drawn from the config's ranges.
inline DegradeParams sample_degradation(const DatasetConfig& cfg, std::uint64_t sample_seed) {
  Rng rng = Rng::derive(sample_seed, 5);
  DegradeParams p;
  p.speckle_strength = rng.uniform(0.3, 1.0) * cfg.speckle_max;
  p.shadow_count = cfg.shadow_max == 0 ? 0 : rng.below(cfg.shadow_max + 1);
  p.shadow_opacity = p.shadow_count == 0 ? 0.0 : rng.uniform(0.5, 1.0) * cfg.shadow_opacity_max;
  p.rotation_deg = rng.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg);
  p.distractor_rate = cfg.distractor_rate;
  p.text_rate = cfg.text_rate;
  return p;
}

// Which indices of a section are standard: exactly round(ratio * n) of them.
inline std::vector<int> standard_assignment(const DatasetConfig& cfg, Section section, std::size_t n) {
  const auto n_std = static_cast<std::size_t>(std::llround(cfg.standard_ratio * static_cast<double>(n)));
  std::vector<int> flags(n, 0);
  std::fill(flags.begin(), flags.begin() + static_cast<std::ptrdiff_t>(n_std), 1);
  Rng rng = Rng::derive(cfg.seed, 0x57D, static_cast<std::uint64_t>(section));
  rng.shuffle(flags);
  return flags;
}

inline std::string sample_stem(Section s, std::size_t index) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  return to_string(s) + "_" + buf;
}

inline PhantomSample generate_indexed(const DatasetConfig& cfg, Section section, std::size_t index, bool standard) {
  const std::uint64_t s = sample_seed(cfg.seed, section, index);
  return generate_sample(section, standard, sample_degradation(cfg, s), s, cfg.image_size);
}

// Writes images/, annotations/ and manifest.json under `out_dir`.
inline Manifest generate_dataset(const DatasetConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  fs::create_directories(out_dir / "annotations", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "annotations").string() + ": " + ec.message());

  Manifest m;
  m.root = out_dir;
  m.seed = cfg.seed;
  m.image_size = cfg.image_size;
  for (const auto& [section, n] : cfg.counts) {
    const auto standard = standard_assignment(cfg, section, n);
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const auto parts = split_dataset(idx, SplitSpec{cfg.seed + static_cast<std::uint64_t>(section)});
    std::vector<Split> split_of(n, Split::kTrain);
    for (auto i : parts.val) split_of[i] = Split::kVal;
    for (auto i : parts.test) split_of[i] = Split::kTest;
    for (std::size_t i = 0; i < n; ++i) {
      const PhantomSample s = generate_indexed(cfg, section, i, standard[i] == 1);
      const std::string stem = sample_stem(section, i);
      const std::string image_rel = "images/" + stem + "." + cfg.format;
      const std::string ann_rel = "annotations/" + stem + ".json";
      write_image(s.image, out_dir / image_rel);
      write_json(out_dir / ann_rel, annotation_to_json(s, image_rel));
      m.samples.push_back({image_rel, ann_rel, section, split_of[i], s.plane_label});
    }
  }
  write_json(out_dir / "manifest.json", manifest_to_json(m));
  return m;
}

}  // namespace sonoqa
