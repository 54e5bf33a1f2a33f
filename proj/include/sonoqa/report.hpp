#pragma once

// Per-structure quality assessment, plane verdict, annotated output and
// split-level evaluation.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sonoqa/dataset.hpp"
#include "sonoqa/metrics.hpp"
#include "sonoqa/model.hpp"
#include "sonoqa/preprocess.hpp"

namespace sonoqa {

inline constexpr int kReportVersion = 1;

struct AssessOptions {
  double detect_threshold = 0.5;  // class probability needed to call a structure detected
  double quality_cutoff = 0.5;    // quality probability needed for flag 1
};

struct StructureAssessment {
  std::size_t id = 0;
  bool detected = false;
  std::optional<Box> box;
  int flag = 0;
  double confidence = 0.0;  // class probability of the best detection
  double quality = 0.0;     // quality probability of the best detection

  friend bool operator==(const StructureAssessment&, const StructureAssessment&) = default;
};

struct QualityReport {
  Section section = Section::kHead;
  std::vector<StructureAssessment> structures;  // one per registry entry, in id order
  PlaneLabel verdict = PlaneLabel::kNonStandard;
  double timing_s = 0.0;

  friend bool operator==(const QualityReport&, const QualityReport&) = default;
};

// Conjunction over the section registry. `flags[id]` must cover every structure.
inline PlaneLabel verdict(const std::vector<int>& flags, Section section) {
  if (flags.size() != structure_count(section))
    throw InputError("verdict needs one flag per " + to_string(section) + " structure (" +
                     std::to_string(structure_count(section)) + "), got " + std::to_string(flags.size()));
  for (int f : flags)
    if (f != 0 && f != 1) throw InputError("structure flags must be 0 or 1");
  return std::all_of(flags.begin(), flags.end(), [](int f) { return f == 1; }) ? PlaneLabel::kStandard
                                                                               : PlaneLabel::kNonStandard;
}

// Flags keyed by structure code; an unknown code is an error.
inline PlaneLabel verdict(const std::vector<std::pair<std::string, int>>& coded, Section section) {
  std::vector<int> flags(structure_count(section), 0);
  std::vector<int> seen(flags.size(), 0);
  for (const auto& [code, f] : coded) {
    const std::size_t id = structure_id(section, code);
    flags[id] = f;
    seen[id] = 1;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end())
    throw InputError("verdict: flags do not cover every " + to_string(section) + " structure");
  return verdict(flags, section);
}

// Builds the report from per-class detections (best detection per class).
inline QualityReport build_report(Section section, const std::vector<Detection>& detections,
                                  const AssessOptions& opt = {}) {
  QualityReport r;
  r.section = section;
  const std::size_t k = structure_count(section);
  for (std::size_t id = 0; id < k; ++id) {
    StructureAssessment a;
    a.id = id;
    const Detection* best = nullptr;
    for (const auto& d : detections)
      if (d.structure == id && (!best || d.score > best->score)) best = &d;
    if (best) {
      a.confidence = best->score;
      a.quality = best->quality;
      a.detected = best->score >= opt.detect_threshold;
      if (a.detected) a.box = best->box;
    }
    a.flag = a.detected && a.quality >= opt.quality_cutoff ? 1 : 0;
    r.structures.push_back(a);
  }
  std::vector<int> flags;
  for (const auto& a : r.structures) flags.push_back(a.flag);
  r.verdict = verdict(flags, section);
  return r;
}

// Score for ranking planes as standard: the weakest structure's
// confidence × quality.
inline double plane_score(const QualityReport& r) {
  double s = 1.0;
  for (const auto& a : r.structures) s = std::min(s, a.confidence * a.quality);
  return r.structures.empty() ? 0.0 : s;
}

struct Assessment {
  QualityReport report;
  Inference inference;
};

// preprocess -> extract -> propose -> relation fuse -> classify -> verdict.
inline Assessment assess_detailed(const Model& model, const GrayImage& image, Section section,
                                  const AssessOptions& opt = {}) {
  if (section != model.config().section)
    throw ConfigError("checkpoint was trained for section " + to_string(model.config().section) +
                      ", not " + to_string(section));
  const auto t0 = std::chrono::steady_clock::now();
  Assessment out;
  out.inference = model.infer(preprocess(image, model.config().pre));
  out.report = build_report(section, out.inference.detections, opt);
  out.report.timing_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline QualityReport assess(const Model& model, const GrayImage& image, Section section,
                            const AssessOptions& opt = {}) {
  return assess_detailed(model, image, section, opt).report;
}

// ------------------------------------------------------------------ JSON

inline nlohmann::json report_to_json(const QualityReport& r) {
  nlohmann::json structs = nlohmann::json::array();
  for (const auto& a : r.structures)
    structs.push_back({{"id", structures(r.section).at(a.id).code},
                       {"detected", a.detected},
                       {"box", a.box ? nlohmann::json(*a.box) : nlohmann::json(nullptr)},
                       {"flag", a.flag},
                       {"confidence", a.confidence},
                       {"quality", a.quality}});
  return {{"version", kReportVersion},
          {"section", to_string(r.section)},
          {"structures", structs},
          {"verdict", to_string(r.verdict)},
          {"timing_s", r.timing_s}};
}

inline QualityReport report_from_json(const nlohmann::json& j) {
  QualityReport r;
  try {
    if (j.at("version").get<int>() != kReportVersion) throw InputError("unsupported report version");
    r.section = parse_section(j.at("section").get<std::string>());
    for (const auto& e : j.at("structures")) {
      StructureAssessment a;
      a.id = structure_id(r.section, e.at("id").get<std::string>());
      a.detected = e.at("detected").get<bool>();
      if (!e.at("box").is_null()) a.box = e.at("box").get<Box>();
      a.flag = e.at("flag").get<int>();
      a.confidence = e.at("confidence").get<double>();
      a.quality = e.at("quality").get<double>();
      r.structures.push_back(a);
    }
    r.verdict = parse_plane_label(j.at("verdict").get<std::string>());
    r.timing_s = j.at("timing_s").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed report: ") + e.what());
  }
  return r;
}

// ------------------------------------------------------------------ annotate

namespace annotate_detail {

// 3x5 glyphs, rows top to bottom, bit 2 = left column.
inline std::array<std::uint8_t, 5> glyph(char c) {
  switch (c) {
    case 'A': return {2, 5, 7, 5, 5};
    case 'B': return {6, 5, 6, 5, 6};
    case 'C': return {3, 4, 4, 4, 3};
    case 'D': return {6, 5, 5, 5, 6};
    case 'L': return {4, 4, 4, 4, 7};
    case 'M': return {5, 7, 7, 5, 5};
    case 'O': return {2, 5, 5, 5, 2};
    case 'P': return {6, 5, 6, 4, 4};
    case 'R': return {6, 5, 6, 5, 5};
    case 'S': return {3, 4, 2, 1, 6};
    case 'T': return {7, 2, 2, 2, 2};
    case 'U': return {5, 5, 5, 5, 7};
    case 'V': return {5, 5, 5, 5, 2};
    case '0': return {2, 5, 5, 5, 2};
    case '1': return {2, 6, 2, 2, 7};
    case ':': return {0, 2, 0, 2, 0};
    default: return {7, 1, 2, 0, 2};  // '?'
  }
}

inline void put(GrayImage& img, long x, long y, double v) {
  if (x >= 0 && y >= 0 && x < static_cast<long>(img.width()) && y < static_cast<long>(img.height()))
    img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y)) = v;
}

inline void text(GrayImage& img, long x, long y, const std::string& s, double v) {
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto g = glyph(s[i]);
    for (long r = 0; r < 5; ++r)
      for (long c = 0; c < 3; ++c)
        if ((g[static_cast<std::size_t>(r)] >> (2 - c)) & 1U) put(img, x + static_cast<long>(i) * 4 + c, y + r, v);
  }
}

}  // namespace annotate_detail

inline constexpr double kAnnotateMarker = 1.0;
inline constexpr std::size_t kBannerRows = 3;

// Outline of [x_min, x_max) x [y_min, y_max) in pixel cells.
inline void draw_rectangle(GrayImage& img, const Box& b, double value) {
  const long x0 = std::lround(b.x_min), y0 = std::lround(b.y_min);
  const long x1 = std::lround(b.x_max) - 1, y1 = std::lround(b.y_max) - 1;
  for (long x = x0; x <= x1; ++x) {
    annotate_detail::put(img, x, y0, value);
    annotate_detail::put(img, x, y1, value);
  }
  for (long y = y0; y <= y1; ++y) {
    annotate_detail::put(img, x0, y, value);
    annotate_detail::put(img, x1, y, value);
  }
}

// Boxes with "CODE:flag" labels above them, and a banner along the bottom
// edge: solid for standard, dashed for non-standard.
inline GrayImage annotate(const GrayImage& image, const QualityReport& r) {
  GrayImage out = image;
  for (const auto& a : r.structures) {
    if (!a.box) continue;
    const double v = a.flag == 1 ? kAnnotateMarker : 0.5 * kAnnotateMarker;
    draw_rectangle(out, *a.box, v);
    const std::string label = structures(r.section).at(a.id).code + ":" + std::to_string(a.flag);
    const long ty = std::lround(a.box->y_min) - 6;
    annotate_detail::text(out, std::lround(a.box->x_min), ty < 0 ? std::lround(a.box->y_max) + 1 : ty, label, v);
  }
  const std::size_t h = out.height();
  for (std::size_t y = h - std::min(h, kBannerRows); y < h; ++y)
    for (std::size_t x = 0; x < out.width(); ++x)
      out.at(x, y) = r.verdict == PlaneLabel::kStandard || (x / 4) % 2 == 0 ? kAnnotateMarker : 0.0;
  return out;
}

// ------------------------------------------------------------------ evaluation

struct EvalSummary {
  Section section = Section::kHead;
  std::size_t images = 0;
  MeanApResult ap;
  std::optional<BoxplotStats> iou;
  ConfusionCounts plane;  // positive class: standard
  std::optional<double> auc;
  std::vector<std::string> warnings;

  std::optional<double> verdict_accuracy() const { return accuracy(plane); }
};

// Runs the full assessment on every sample (raw images) and scores detections
// against the annotations: mAP@iou_threshold, IoU quartiles of each ground
// truth's best same-class detection, and the plane verdict confusion/AUC.
inline EvalSummary evaluate(const Model& model, const std::vector<PhantomSample>& samples,
                            const AssessOptions& opt = {}, double iou_threshold = 0.5,
                            ApInterpolation interp = ApInterpolation::kAllPoint) {
  if (samples.empty()) throw InputError("evaluation split has no samples");
  const Section section = model.config().section;
  EvalSummary s;
  s.section = section;
  s.images = samples.size();
  std::vector<ScoredBox> dets;
  std::vector<TruthBox> gts;
  std::vector<double> ious, scores;
  std::vector<int> predicted, truth;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const PhantomSample& smp = samples[i];
    if (smp.section != section) throw InputError("sample section does not match the checkpoint");
    const Assessment a = assess_detailed(model, smp.image, section, opt);
    for (const auto& d : a.inference.detections) dets.push_back({i, d.structure, d.box, d.score});
    for (const auto& g : smp.annotations) {
      gts.push_back({i, g.structure, g.box});
      double best = 0.0;
      for (const auto& d : a.inference.detections)
        if (d.structure == g.structure) best = std::max(best, iou(d.box, g.box));
      ious.push_back(best);
    }
    predicted.push_back(a.report.verdict == PlaneLabel::kStandard ? 1 : 0);
    truth.push_back(smp.plane_label == PlaneLabel::kStandard ? 1 : 0);
    scores.push_back(plane_score(a.report));
  }
  std::vector<std::string> names;
  for (const auto& c : structures(section)) names.push_back(c.code);
  s.ap = mean_ap(dets, gts, structure_count(section), iou_threshold, interp, names);
  s.warnings = s.ap.warnings;
  if (!ious.empty()) s.iou = iou_quartiles(ious);
  s.plane = confusion(predicted, truth);
  const bool both = std::find(truth.begin(), truth.end(), 0) != truth.end() &&
                    std::find(truth.begin(), truth.end(), 1) != truth.end();
  if (both) s.auc = roc_auc(scores, truth).auc;
  else s.warnings.push_back("plane AUC undefined: split has a single plane label");
  return s;
}

inline nlohmann::json eval_to_json(const EvalSummary& s) {
  nlohmann::json ap = nlohmann::json::object();
  for (std::size_t c = 0; c < s.ap.per_class.size(); ++c)
    ap[structures(s.section).at(c).code] = s.ap.per_class[c] ? nlohmann::json(*s.ap.per_class[c]) : nlohmann::json(nullptr);
  return {{"section", to_string(s.section)},
          {"images", s.images},
          {"map", rate_json(s.ap.map)},
          {"ap", ap},
          {"iou_quartiles", s.iou ? boxplot_json(*s.iou) : nlohmann::json(nullptr)},
          {"plane", confusion_json(s.plane)},
          {"auc", rate_json(s.auc)},
          {"warnings", s.warnings}};
}

}  // namespace sonoqa
