#pragma once

// Region proposal: FPN anchors, IoU, anchor assignment, box regression
// parameterization, NMS and the shared RPN head.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sonoqa/autograd.hpp"
#include "sonoqa/backbone.hpp"
#include "sonoqa/params.hpp"

namespace sonoqa {

struct Box {
  double x_min = 0, y_min = 0, x_max = 1, y_max = 1;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x_min + x_max); }
  double cy() const { return 0.5 * (y_min + y_max); }
  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(y_min) && std::isfinite(x_max) && std::isfinite(y_max) &&
           x_max > x_min && y_max > y_min;
  }

  friend bool operator==(const Box&, const Box&) = default;
};

inline void to_json(nlohmann::json& j, const Box& b) { j = {b.x_min, b.y_min, b.x_max, b.y_max}; }
inline void from_json(const nlohmann::json& j, Box& b) {
  if (!j.is_array() || j.size() != 4) throw InputError("box must be [x_min,y_min,x_max,y_max]");
  b = Box{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline Box clip_box(const Box& b, double w, double h) {
  return Box{std::clamp(b.x_min, 0.0, w), std::clamp(b.y_min, 0.0, h), std::clamp(b.x_max, 0.0, w),
             std::clamp(b.y_max, 0.0, h)};
}

// area(a & b) / area(a | b); 0 when disjoint.
inline double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

// ------------------------------------------------------------------ anchors

struct FpnLevel {
  int level;
  std::size_t stride;
  double size;
};

struct FpnConfig {
  std::vector<FpnLevel> levels{{3, 8, 32}, {4, 16, 64}, {5, 32, 128}, {6, 64, 256}, {7, 128, 512}};
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};  // height / width

  std::size_t anchors_per_location() const { return aspect_ratios.size(); }

  void validate() const {
    if (levels.empty() || aspect_ratios.empty()) throw ConfigError("FPN config needs levels and aspect ratios");
    for (std::size_t i = 0; i < levels.size(); ++i) {
      if (levels[i].level != 3 + static_cast<int>(i))
        throw ConfigError("FPN levels must run 3,4,5,... in order");
      if (levels[i].stride != (std::size_t{8} << i)) throw ConfigError("FPN strides must double per level from 8");
      if (!(levels[i].size > 0)) throw ConfigError("FPN anchor sizes must be positive");
    }
    for (double r : aspect_ratios)
      if (!(r > 0)) throw ConfigError("aspect ratios must be positive");
  }
};

struct Anchor {
  Box box;
  int level;
};

// Grid cells per axis at a stride: ceil(extent / stride), the output size of
// the padded stride-2 conv chain.
inline std::size_t grid_extent(std::size_t extent, std::size_t stride) { return (extent + stride - 1) / stride; }

// One anchor per aspect ratio at every stride-spaced cell center, area size^2,
// clipped to the image. Ordered by level, then row, column and ratio.
inline std::vector<Anchor> generate_anchors(std::size_t image_w, std::size_t image_h, const FpnConfig& cfg) {
  cfg.validate();
  std::vector<Anchor> out;
  for (const auto& lv : cfg.levels) {
    const std::size_t gh = grid_extent(image_h, lv.stride), gw = grid_extent(image_w, lv.stride);
    for (std::size_t y = 0; y < gh; ++y)
      for (std::size_t x = 0; x < gw; ++x) {
        const double cx = (static_cast<double>(x) + 0.5) * static_cast<double>(lv.stride);
        const double cy = (static_cast<double>(y) + 0.5) * static_cast<double>(lv.stride);
        for (double r : cfg.aspect_ratios) {
          const double w = lv.size / std::sqrt(r), h = lv.size * std::sqrt(r);
          Box b{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
          out.push_back({clip_box(b, static_cast<double>(image_w), static_cast<double>(image_h)), lv.level});
        }
      }
  }
  return out;
}

// ---------------------------------------------------------------- assignment

struct AnchorAssignment {
  std::size_t anchor = 0;
  bool positive = false;
  int matched = -1;  // ground-truth index for positives
  double max_iou = 0.0;
  bool forced = false;  // positive only through best-anchor matching
};

// Positive iff max IoU > threshold (strict). Each ground truth additionally
// claims its single best anchor so small structures always get a positive.
inline std::vector<AnchorAssignment> assign(const std::vector<Box>& anchors, const std::vector<Box>& ground_truths,
                                            double threshold = 0.5) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("assignment threshold must lie in (0,1)");
  std::vector<AnchorAssignment> out(anchors.size());
  std::vector<double> best_iou(ground_truths.size(), 0.0);
  std::vector<std::size_t> best_anchor(ground_truths.size(), anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    auto& as = out[a];
    as.anchor = a;
    for (std::size_t g = 0; g < ground_truths.size(); ++g) {
      const double v = iou(anchors[a], ground_truths[g]);
      if (v > as.max_iou) {
        as.max_iou = v;
        as.matched = static_cast<int>(g);
      }
      if (v > best_iou[g]) {
        best_iou[g] = v;
        best_anchor[g] = a;
      }
    }
    as.positive = as.max_iou > threshold;
    if (!as.positive) as.matched = -1;
  }
  for (std::size_t g = 0; g < ground_truths.size(); ++g) {
    const std::size_t a = best_anchor[g];
    if (a == anchors.size() || out[a].positive) continue;
    out[a].positive = true;
    out[a].forced = true;
    out[a].matched = static_cast<int>(g);
  }
  return out;
}

// ------------------------------------------------------------ box regression

struct BoxDelta {
  double dx = 0, dy = 0, dw = 0, dh = 0;
};

inline BoxDelta encode_box(const Box& gt, const Box& anchor) {
  if (!gt.valid() || !anchor.valid()) throw InputError("encode_box needs valid boxes");
  return {(gt.cx() - anchor.cx()) / anchor.width(), (gt.cy() - anchor.cy()) / anchor.height(),
          std::log(gt.width() / anchor.width()), std::log(gt.height() / anchor.height())};
}

inline Box decode_box(const BoxDelta& d, const Box& anchor) {
  if (!std::isfinite(d.dx) || !std::isfinite(d.dy) || !std::isfinite(d.dw) || !std::isfinite(d.dh))
    throw NumericalError("decode_box: non-finite delta");
  const double cx = anchor.cx() + d.dx * anchor.width();
  const double cy = anchor.cy() + d.dy * anchor.height();
  const double w = anchor.width() * std::exp(d.dw), h = anchor.height() * std::exp(d.dh);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

// ---------------------------------------------------------------------- NMS

struct Proposal {
  Box box;
  int level = 0;
  double score = 0.0;
  std::size_t anchor = 0;
};

inline void to_json(nlohmann::json& j, const Proposal& p) {
  j = {{"box", p.box}, {"level", p.level}, {"score", p.score}};
}

// Greedy by descending score (ties: smaller anchor index first); drops any
// box whose IoU with an already kept box exceeds the threshold.
inline std::vector<Proposal> nms(std::vector<Proposal> dets, double iou_threshold = 0.5,
                                 std::size_t max_keep = std::numeric_limits<std::size_t>::max()) {
  std::stable_sort(dets.begin(), dets.end(), [](const Proposal& a, const Proposal& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor < b.anchor;
  });
  std::vector<Proposal> kept;
  for (const auto& d : dets) {
    if (kept.size() >= max_keep) break;
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(d.box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// ------------------------------------------------------------ FPN + RPN head

struct DetectorConfig {
  FpnConfig fpn;
  std::size_t pyramid_width = 64;
  std::size_t head_width = 32;
  double positive_iou = 0.5;
  double nms_iou = 0.5;
  std::size_t top_k = 100;
  std::size_t pre_nms_top = 400;
  double objectness_prior = 0.01;
};

template <typename T>
void add_detector_params(ParameterSet<T>& p, const FenConfig& fen, const DetectorConfig& cfg, std::uint64_t seed) {
  cfg.fpn.validate();
  if (cfg.fpn.levels.size() != 5) throw ConfigError("the pyramid is built from C3..C5 plus two extra levels (3..7)");
  const auto ch = fen.channels();
  const std::size_t w = cfg.pyramid_width, hw = cfg.head_width, a = cfg.fpn.anchors_per_location();
  for (std::size_t s = 2; s < 5; ++s) {
    const std::string n = "fpn.lat" + std::to_string(s + 1);
    p.add_glorot(n + ".w", {w, ch[s], 1, 1}, ch[s], w, seed);
    p.add_zeros(n + ".b", {w});
  }
  p.add_glorot("fpn.p6.w", {w, ch[4], 3, 3}, ch[4] * 9, w * 9, seed);
  p.add_zeros("fpn.p6.b", {w});
  p.add_glorot("fpn.p7.w", {w, w, 3, 3}, w * 9, w * 9, seed);
  p.add_zeros("fpn.p7.b", {w});
  p.add_glorot("rpn.conv.w", {hw, w, 3, 3}, w * 9, hw * 9, seed);
  p.add_zeros("rpn.conv.b", {hw});
  p.add_glorot("rpn.obj.w", {a, hw, 1, 1}, hw, a, seed);
  p.add("rpn.obj.b", Tensor<T>({a}, static_cast<T>(-std::log((1.0 - cfg.objectness_prior) / cfg.objectness_prior))));
  p.add_glorot("rpn.box.w", {4 * a, hw, 1, 1}, hw, 4 * a, seed);
  p.add_zeros("rpn.box.b", {4 * a});
}

template <typename T>
struct RpnOutputs {
  std::vector<Var<T>> pyramid;  // P3..P7
  Var<T> objectness;            // [num_anchors] logits
  Var<T> deltas;                // [num_anchors, 4]
};

// Top-down pyramid from C3..C5 (1x1 laterals + nearest upsampling), P6/P7 by
// stride-2 convs, then the shared head on every level.
template <typename T>
RpnOutputs<T> rpn_forward(const Binding<T>& p, const std::vector<Var<T>>& stages, const DetectorConfig& cfg) {
  if (stages.size() != 5) throw ConfigError("RPN expects the five backbone stages C1..C5");
  auto lateral = [&](std::size_t s) {
    const std::string n = "fpn.lat" + std::to_string(s + 1);
    return ag::conv2d(stages[s], p(n + ".w"), p(n + ".b"), 1, 0);
  };
  RpnOutputs<T> out;
  const Var<T> p5 = lateral(4);
  const Var<T> l4 = lateral(3);
  const Var<T> p4 = ag::add(l4, ag::upsample_nearest(p5, l4.shape()[1], l4.shape()[2]));
  const Var<T> l3 = lateral(2);
  const Var<T> p3 = ag::add(l3, ag::upsample_nearest(p4, l3.shape()[1], l3.shape()[2]));
  const Var<T> p6 = ag::conv2d(stages[4], p("fpn.p6.w"), p("fpn.p6.b"), 2, 1);
  const Var<T> p7 = ag::conv2d(ag::relu(p6), p("fpn.p7.w"), p("fpn.p7.b"), 2, 1);
  out.pyramid = {p3, p4, p5, p6, p7};

  const std::size_t a = cfg.fpn.anchors_per_location();
  std::vector<Var<T>> objs, boxes;
  for (const auto& level : out.pyramid) {
    const Var<T> h = ag::relu(ag::conv2d(level, p("rpn.conv.w"), p("rpn.conv.b"), 1, 1));
    const std::size_t cells = level.shape()[1] * level.shape()[2];
    objs.push_back(ag::reshape(ag::chw_to_hwc(ag::conv2d(h, p("rpn.obj.w"), p("rpn.obj.b"), 1, 0)), {cells * a, 1}));
    boxes.push_back(ag::reshape(ag::chw_to_hwc(ag::conv2d(h, p("rpn.box.w"), p("rpn.box.b"), 1, 0)), {cells * a, 4}));
  }
  const Var<T> obj = ag::concat(objs, 0);
  out.objectness = ag::reshape(obj, {obj.shape()[0]});
  out.deltas = ag::concat(boxes, 0);
  return out;
}

// Checks that pyramid maps line up with the anchor grid of the config.
template <typename T>
void check_pyramid(const std::vector<Var<T>>& pyramid, std::size_t image_w, std::size_t image_h,
                   const FpnConfig& cfg) {
  if (pyramid.size() != cfg.levels.size()) throw ConfigError("pyramid level count does not match FPN config");
  for (std::size_t i = 0; i < pyramid.size(); ++i) {
    const auto& s = pyramid[i].shape();
    if (s[1] != grid_extent(image_h, cfg.levels[i].stride) || s[2] != grid_extent(image_w, cfg.levels[i].stride))
      throw ConfigError("pyramid level " + std::to_string(cfg.levels[i].level) + " has map " + shape_str(s) +
                        " inconsistent with its stride");
  }
}

// Scores every anchor, decodes its box, and keeps the top-K after NMS.
template <typename T>
std::vector<Proposal> propose(const RpnOutputs<T>& rpn, const std::vector<Anchor>& anchors, std::size_t image_w,
                              std::size_t image_h, const DetectorConfig& cfg) {
  const auto& obj = rpn.objectness.value();
  const auto& del = rpn.deltas.value();
  if (obj.numel() != anchors.size()) throw ConfigError("RPN output count does not match anchor count");
  const double max_log = std::log(1000.0 / 16.0);
  std::vector<Proposal> cands;
  cands.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const double z = static_cast<double>(obj[i]);
    BoxDelta d{static_cast<double>(del[i * 4]), static_cast<double>(del[i * 4 + 1]),
               std::clamp(static_cast<double>(del[i * 4 + 2]), -max_log, max_log),
               std::clamp(static_cast<double>(del[i * 4 + 3]), -max_log, max_log)};
    Box b = clip_box(decode_box(d, anchors[i].box), static_cast<double>(image_w), static_cast<double>(image_h));
    if (b.width() < 1.0 || b.height() < 1.0) continue;
    cands.push_back({b, anchors[i].level, 1.0 / (1.0 + std::exp(-z)), i});
  }
  std::stable_sort(cands.begin(), cands.end(), [](const Proposal& a, const Proposal& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor < b.anchor;
  });
  if (cands.size() > cfg.pre_nms_top) cands.resize(cfg.pre_nms_top);
  return nms(std::move(cands), cfg.nms_iou, cfg.top_k);
}

}  // namespace sonoqa
