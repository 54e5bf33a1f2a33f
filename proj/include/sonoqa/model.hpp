#pragma once

// The full per-section network: backbone, pyramid + RPN, ROI features,
// relation fusion and the class / quality / box heads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sonoqa/backbone.hpp"
#include "sonoqa/classifier.hpp"
#include "sonoqa/detector.hpp"
#include "sonoqa/pooling.hpp"
#include "sonoqa/preprocess.hpp"
#include "sonoqa/relation.hpp"

namespace sonoqa {

struct ModelConfig {
  Section section = Section::kHead;
  std::size_t image_size = 128;
  FenConfig fen;
  DetectorConfig det;
  RelationConfig rel;
  PreprocessConfig pre;
  std::vector<std::size_t> spp_levels{1, 2, 4, 16};
  std::size_t roi_channels = 8;   // channels of the reduced P3 map pooled per ROI
  std::size_t roi_count = 24;     // proposals handed to the class head at inference
  bool refine_boxes = true;       // class-agnostic box refinement on each ROI
  double min_score = 0.01;        // per-class detections below this are dropped

  std::size_t classes() const { return structure_count(section); }
  std::size_t roi_feature_width() const {
    return roi_channels * spp_bins(spp_levels) + fen.channels()[4] + 4;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"section", to_string(c.section)},
       {"image_size", c.image_size},
       {"channel_scale", c.fen.channel_scale},
       {"pyramid_width", c.det.pyramid_width},
       {"head_width", c.det.head_width},
       {"positive_iou", c.det.positive_iou},
       {"nms_iou", c.det.nms_iou},
       {"top_k", c.det.top_k},
       {"pre_nms_top", c.det.pre_nms_top},
       {"d_k", c.rel.d_k},
       {"d_g", c.rel.d_g},
       {"d_f", c.rel.d_f},
       {"smooth_sigma", c.pre.sigma},
       {"text_threshold", c.pre.text_threshold},
       {"spp_levels", c.spp_levels},
       {"roi_channels", c.roi_channels},
       {"roi_count", c.roi_count},
       {"refine_boxes", c.refine_boxes},
       {"min_score", c.min_score}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "section") c.section = parse_section(v.get<std::string>());
      else if (key == "image_size") c.image_size = v.get<std::size_t>();
      else if (key == "channel_scale") c.fen.channel_scale = v.get<double>();
      else if (key == "pyramid_width") c.det.pyramid_width = v.get<std::size_t>();
      else if (key == "head_width") c.det.head_width = v.get<std::size_t>();
      else if (key == "positive_iou") c.det.positive_iou = v.get<double>();
      else if (key == "nms_iou") c.det.nms_iou = v.get<double>();
      else if (key == "top_k") c.det.top_k = v.get<std::size_t>();
      else if (key == "pre_nms_top") c.det.pre_nms_top = v.get<std::size_t>();
      else if (key == "d_k") c.rel.d_k = v.get<std::size_t>();
      else if (key == "d_g") c.rel.d_g = v.get<std::size_t>();
      else if (key == "d_f") c.rel.d_f = v.get<std::size_t>();
      else if (key == "smooth_sigma") c.pre.sigma = v.get<double>();
      else if (key == "text_threshold") c.pre.text_threshold = v.get<double>();
      else if (key == "spp_levels") c.spp_levels = v.get<std::vector<std::size_t>>();
      else if (key == "roi_channels") c.roi_channels = v.get<std::size_t>();
      else if (key == "roi_count") c.roi_count = v.get<std::size_t>();
      else if (key == "refine_boxes") c.refine_boxes = v.get<bool>();
      else if (key == "min_score") c.min_score = v.get<double>();
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for model config key '" + key + "': " + e.what());
    }
  }
}

inline void validate(const ModelConfig& c) {
  check_fen_input(c.image_size, c.image_size);
  c.fen.channels();
  c.det.fpn.validate();
  c.rel.validate();
  if (c.spp_levels.empty()) throw ConfigError("spp_levels must not be empty");
  if (c.roi_channels == 0 || c.roi_count == 0) throw ConfigError("roi_channels and roi_count must be positive");
  if (!(c.det.nms_iou > 0.0 && c.det.nms_iou < 1.0)) throw ConfigError("nms_iou must lie in (0,1)");
}

template <typename T>
ParameterSet<T> init_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  ParameterSet<T> p;
  add_fen_params(p, cfg.fen, seed);
  add_detector_params(p, cfg.fen, cfg.det, seed);
  p.add_glorot("cpn.reduce.w", {cfg.roi_channels, cfg.det.pyramid_width, 1, 1}, cfg.det.pyramid_width,
               cfg.roi_channels, seed);
  p.add_zeros("cpn.reduce.b", {cfg.roi_channels});
  const std::size_t in = cfg.roi_feature_width();
  p.add_glorot("cpn.fc.w", {in, cfg.rel.d_f}, in, cfg.rel.d_f, seed);
  p.add_zeros("cpn.fc.b", {cfg.rel.d_f});
  add_relation_params(p, cfg.rel, seed);
  add_cpn_head_params(p, cfg.rel.d_f, cfg.classes(), seed);
  p.add_zeros("cpn.box.w", {cfg.rel.d_f, 4});
  p.add_zeros("cpn.box.b", {4});
  return p;
}

// Feature-map cells covered by a box on a map with the given stride.
inline CellWindow roi_window(const Box& b, std::size_t stride, std::size_t map_h, std::size_t map_w) {
  const double s = static_cast<double>(stride);
  auto lo = [&](double v, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(std::max(0.0, std::floor(v / s))));
  };
  auto hi = [&](double v, std::size_t n) {
    return std::min(n, static_cast<std::size_t>(std::max(1.0, std::ceil(v / s))));
  };
  CellWindow w{lo(b.y_min, map_h), hi(b.y_max, map_h), lo(b.x_min, map_w), hi(b.x_max, map_w)};
  if (w.y1 <= w.y0) w.y1 = w.y0 + 1;
  if (w.x1 <= w.x0) w.x1 = w.x0 + 1;
  return w;
}

template <typename T>
struct DenseOutputs {
  std::vector<Var<T>> stages;  // C1..C5
  RpnOutputs<T> rpn;
};

template <typename T>
struct RoiOutputs {
  Var<T> class_logits;    // [N, K+1], background last
  Var<T> quality_logits;  // [N, 1]
  Var<T> box_deltas;      // [N, 4], refinement relative to each ROI
  Var<T> relation_weights;
};

template <typename T>
DenseOutputs<T> dense_forward(const Binding<T>& p, const ModelConfig& cfg, const GrayImage& image) {
  DenseOutputs<T> out;
  out.stages = fen_forward(p, p.tape().constant(image_tensor<T>(image)));
  out.rpn = rpn_forward(p, out.stages, cfg.det);
  return out;
}

template <typename T>
RoiOutputs<T> roi_forward(const Binding<T>& p, const ModelConfig& cfg, const DenseOutputs<T>& dense,
                          const std::vector<Box>& rois) {
  if (rois.empty()) throw ContractError("roi_forward needs at least one ROI");
  const Var<T>& p3 = dense.rpn.pyramid[0];
  const std::size_t stride = cfg.det.fpn.levels[0].stride;
  const std::size_t mh = p3.shape()[1], mw = p3.shape()[2];
  const double w = static_cast<double>(cfg.image_size), h = static_cast<double>(cfg.image_size);

  const Var<T> reduced = ag::relu(ag::conv2d(p3, p("cpn.reduce.w"), p("cpn.reduce.b"), 1, 0));
  std::vector<CellWindow> windows;
  Tensor<T> geom({rois.size(), 4});
  std::vector<BoxGeometry> boxes;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const Box& b = rois[i];
    windows.push_back(roi_window(b, stride, mh, mw));
    geom.at(i, 0) = static_cast<T>(b.cx() / w - 0.5);
    geom.at(i, 1) = static_cast<T>(b.cy() / h - 0.5);
    geom.at(i, 2) = static_cast<T>(b.width() / w);
    geom.at(i, 3) = static_cast<T>(b.height() / h);
    boxes.push_back({b.cx(), b.cy(), b.width(), b.height()});
  }
  const Var<T> pooled = ag::roi_spp(reduced, windows, cfg.spp_levels);
  const std::size_t c5 = dense.stages[4].shape()[0];
  const Var<T> context = ag::repeat_rows(ag::reshape(ag::global_avg_pool(dense.stages[4]), {1, c5}), rois.size());
  const Var<T> feats = ag::concat(std::vector<Var<T>>{pooled, context, p.tape().constant(std::move(geom))}, 1);
  const Var<T> appearance = ag::relu(ag::add_row_bias(ag::matmul(feats, p("cpn.fc.w")), p("cpn.fc.b")));
  const RelationOutputs<T> rel = relation_forward(p, appearance, boxes, cfg.rel);
  const CpnOutputs<T> heads = cpn_heads(p, rel.fused);
  RoiOutputs<T> out;
  out.class_logits = heads.class_logits;
  out.quality_logits = heads.quality_logits;
  out.box_deltas = ag::add_row_bias(ag::matmul(rel.fused, p("cpn.box.w")), p("cpn.box.b"));
  out.relation_weights = rel.weights;
  return out;
}

inline Box refine_box(const Box& roi, const BoxDelta& d, double image_w, double image_h) {
  const double lim = std::log(1000.0 / 16.0);
  const BoxDelta c{d.dx, d.dy, std::clamp(d.dw, -lim, lim), std::clamp(d.dh, -lim, lim)};
  return clip_box(decode_box(c, roi), image_w, image_h);
}

struct Detection {
  Box box;
  std::size_t structure = 0;
  double score = 0.0;    // class probability
  double quality = 0.0;  // probability the structure meets the standard
  std::size_t roi = 0;
};

struct Inference {
  std::vector<Proposal> proposals;
  std::vector<Box> rois;
  std::vector<Detection> detections;  // per-class NMS applied, sorted by score
};

// Read-only trained network for one section.
class Model {
 public:
  using Real = float;

  Model(ModelConfig cfg, ParameterSet<Real> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    validate(cfg_);
    anchors_ = generate_anchors(cfg_.image_size, cfg_.image_size, cfg_.det.fpn);
  }

  const ModelConfig& config() const { return cfg_; }
  const ParameterSet<Real>& params() const { return params_; }
  const std::vector<Anchor>& anchors() const { return anchors_; }

  // `image` must already be preprocessed.
  Inference infer(const GrayImage& image) const {
    if (image.width() != cfg_.image_size || image.height() != cfg_.image_size)
      throw InputError("model expects " + std::to_string(cfg_.image_size) + "x" + std::to_string(cfg_.image_size) +
                       " images, got " + std::to_string(image.width()) + "x" + std::to_string(image.height()));
    Tape<Real> tape;
    Binding<Real> p(tape, params_, false);
    const auto dense = dense_forward(p, cfg_, image);
    Inference out;
    DetectorConfig dc = cfg_.det;
    dc.top_k = std::min(dc.top_k, cfg_.roi_count);
    out.proposals = propose(dense.rpn, anchors_, cfg_.image_size, cfg_.image_size, dc);
    if (out.proposals.empty()) return out;
    for (const auto& pr : out.proposals) out.rois.push_back(pr.box);
    const auto roi = roi_forward(p, cfg_, dense, out.rois);
    const auto probs = ag::softmax(roi.class_logits, 1).value();
    const auto quality = ag::sigmoid(roi.quality_logits).value();
    const auto& deltas = roi.box_deltas.value();
    const std::size_t k = cfg_.classes();
    const double side = static_cast<double>(cfg_.image_size);
    for (std::size_t c = 0; c < k; ++c) {
      std::vector<Proposal> cands;
      std::vector<double> qual;
      for (std::size_t i = 0; i < out.rois.size(); ++i) {
        const double s = probs.at(i, c);
        if (s < cfg_.min_score) continue;
        Box b = out.rois[i];
        if (cfg_.refine_boxes)
          b = refine_box(b, {deltas.at(i, 0), deltas.at(i, 1), deltas.at(i, 2), deltas.at(i, 3)}, side, side);
        if (!b.valid()) continue;
        cands.push_back({b, 0, s, i});
      }
      std::stable_sort(cands.begin(), cands.end(), [](const Proposal& a, const Proposal& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.anchor < b.anchor;
      });
      for (const auto& kept : nms(cands, cfg_.det.nms_iou))
        out.detections.push_back({kept.box, c, kept.score, static_cast<double>(quality[kept.anchor]), kept.anchor});
    }
    std::stable_sort(out.detections.begin(), out.detections.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    return out;
  }

 private:
  ModelConfig cfg_;
  ParameterSet<Real> params_;
  std::vector<Anchor> anchors_;
};

}  // namespace sonoqa
