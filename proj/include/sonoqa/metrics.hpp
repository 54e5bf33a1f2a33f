#pragma once

// Detection and classification metrics: confusion-derived rates, ROC/AUC,
// per-class AP with greedy matching, mAP and IoU box-plot statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sonoqa/detector.hpp"
#include "sonoqa/error.hpp"

namespace sonoqa {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// Flags are 1 for the positive class, 0 otherwise.
inline ConfusionCounts confusion(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size())
    throw InputError("confusion: " + std::to_string(predicted.size()) + " predictions for " +
                     std::to_string(truth.size()) + " labels");
  ConfusionCounts c;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const bool p = predicted[i] != 0, t = truth[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// nullopt marks a metric whose denominator is zero.
using Rate = std::optional<double>;

namespace detail {
inline Rate ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline Rate accuracy(const ConfusionCounts& c) { return detail::ratio(c.tp + c.tn, c.total()); }
inline Rate specificity(const ConfusionCounts& c) { return detail::ratio(c.tn, c.tn + c.fp); }
inline Rate sensitivity(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fn); }
inline Rate precision(const ConfusionCounts& c) { return detail::ratio(c.tp, c.tp + c.fp); }

// 2·Prec·Sen / (Prec + Sen).
inline Rate f1(const ConfusionCounts& c) {
  const Rate p = precision(c), s = sensitivity(c);
  if (!p || !s || *p + *s == 0.0) return std::nullopt;
  return 2.0 * *p * *s / (*p + *s);
}

inline nlohmann::json rate_json(const Rate& r) { return r ? nlohmann::json(*r) : nlohmann::json(nullptr); }

// ------------------------------------------------------------------ ROC / AUC

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
  double threshold = 0.0;  // scores >= threshold are called positive
};

struct RocResult {
  double auc = 0.0;
  std::vector<RocPoint> curve;  // starts at (0,0), ends at (1,1)
};

// Trapezoidal area over tie-grouped thresholds. The area is accumulated in
// integers (twice the pair count), so it equals the Mann-Whitney statistic
// with ties counted 1/2 exactly.
inline RocResult roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw InputError("roc_auc: score/label length mismatch");
  std::uint64_t pos = 0, neg = 0;
  for (int l : labels) (l != 0 ? pos : neg) += 1;
  if (pos == 0 || neg == 0) throw InputError("roc_auc needs at least one positive and one negative label");
  for (double s : scores)
    if (!std::isfinite(s)) throw InputError("roc_auc: non-finite score");

  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  std::uint64_t tp = 0, fp = 0, twice_area = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    const std::uint64_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] != 0 ? tp : fp) += 1;
    twice_area += (fp - fp0) * (tp + tp0);
    r.curve.push_back({static_cast<double>(fp) / static_cast<double>(neg), static_cast<double>(tp) / static_cast<double>(pos), s});
  }
  r.auc = static_cast<double>(twice_area) / static_cast<double>(2 * pos * neg);
  return r;
}

// ------------------------------------------------------------------ AP / mAP

struct ScoredBox {
  std::size_t image = 0;
  std::size_t cls = 0;
  Box box;
  double score = 0.0;
};

struct TruthBox {
  std::size_t image = 0;
  std::size_t cls = 0;
  Box box;
};

enum class ApInterpolation {
  kAllPoint,     // area under the monotone precision envelope
  kElevenPoint,  // mean envelope precision at recall 0, 0.1, ..., 1
};

// Greedy matching in descending score order (ties keep input order): each
// detection takes the unmatched ground truth of its image with the highest
// IoU, provided that IoU exceeds the threshold. Returns a hit flag per
// detection in the sorted order, and that order.
inline std::pair<std::vector<int>, std::vector<std::size_t>> greedy_match(const std::vector<ScoredBox>& dets,
                                                                          const std::vector<TruthBox>& gts,
                                                                          double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<int> used(gts.size(), 0), hit(dets.size(), 0);
  for (std::size_t r = 0; r < order.size(); ++r) {
    const ScoredBox& d = dets[order[r]];
    double best = iou_threshold;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != d.image) continue;
      const double v = iou(d.box, gts[g].box);
      if (v > best) best = v, best_g = g;
    }
    if (best_g < gts.size()) {
      used[best_g] = 1;
      hit[r] = 1;
    }
  }
  return {hit, order};
}

// AP of one class. Precision/recall points are taken only at the end of each
// group of equal scores, i.e. at every distinct score threshold.
inline double average_precision(const std::vector<ScoredBox>& dets, const std::vector<TruthBox>& gts,
                                double iou_threshold = 0.5, ApInterpolation interp = ApInterpolation::kAllPoint) {
  if (gts.empty()) throw InputError("average_precision: class has no ground truths");
  for (const auto& d : dets)
    if (!std::isfinite(d.score)) throw InputError("average_precision: non-finite score");
  const auto [hit, order] = greedy_match(dets, gts, iou_threshold);
  const double npos = static_cast<double>(gts.size());

  std::vector<double> prec, rec;
  std::size_t tp = 0, n = 0;
  for (std::size_t r = 0; r < order.size();) {
    const double s = dets[order[r]].score;
    for (; r < order.size() && dets[order[r]].score == s; ++r) {
      tp += static_cast<std::size_t>(hit[r]);
      ++n;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(n));
    rec.push_back(static_cast<double>(tp) / npos);
  }
  // envelope: max precision at any point of equal or higher recall
  std::vector<double> env = prec;
  for (std::size_t i = env.size(); i-- > 1;) env[i - 1] = std::max(env[i - 1], env[i]);

  if (interp == ApInterpolation::kElevenPoint) {
    double sum = 0.0;
    for (int k = 0; k <= 10; ++k) {
      const double r0 = k / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < rec.size(); ++i)
        if (rec[i] >= r0) p = std::max(p, prec[i]);
      sum += p;
    }
    return sum / 11.0;
  }
  double ap = 0.0, prev_r = 0.0;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    ap += (rec[i] - prev_r) * env[i];
    prev_r = rec[i];
  }
  return ap;
}

struct MeanApResult {
  std::vector<std::optional<double>> per_class;  // nullopt: no ground truths
  std::optional<double> map;                     // mean over defined classes
  std::vector<std::string> warnings;
};

inline MeanApResult mean_ap(const std::vector<ScoredBox>& dets, const std::vector<TruthBox>& gts,
                            std::size_t num_classes, double iou_threshold = 0.5,
                            ApInterpolation interp = ApInterpolation::kAllPoint,
                            const std::vector<std::string>& class_names = {}) {
  MeanApResult r;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<ScoredBox> d;
    std::vector<TruthBox> g;
    for (const auto& x : dets)
      if (x.cls == c) d.push_back(x);
    for (const auto& x : gts)
      if (x.cls == c) g.push_back(x);
    if (g.empty()) {
      const std::string name = c < class_names.size() ? class_names[c] : std::to_string(c);
      r.warnings.push_back("class " + name + " has no ground truths; excluded from mAP");
      r.per_class.push_back(std::nullopt);
      continue;
    }
    const double ap = average_precision(d, g, iou_threshold, interp);
    r.per_class.push_back(ap);
    sum += ap;
    ++defined;
  }
  if (defined > 0) r.map = sum / static_cast<double>(defined);
  return r;
}

// ------------------------------------------------------------------ box plots

struct BoxplotStats {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

// Quantile by linear interpolation between closest ranks: h = (n-1)p.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

inline BoxplotStats iou_quartiles(std::vector<double> values) {
  if (values.empty()) throw InputError("iou_quartiles needs a non-empty sample");
  std::sort(values.begin(), values.end());
  return {values.front(), quantile_sorted(values, 0.25), quantile_sorted(values, 0.5), quantile_sorted(values, 0.75),
          values.back()};
}

inline nlohmann::json boxplot_json(const BoxplotStats& b) {
  return {{"min", b.min}, {"q1", b.q1}, {"median", b.median}, {"q3", b.q3}, {"max", b.max}};
}

inline nlohmann::json confusion_json(const ConfusionCounts& c) {
  return {{"tp", c.tp},
          {"fp", c.fp},
          {"fn", c.fn},
          {"tn", c.tn},
          {"acc", rate_json(accuracy(c))},
          {"spec", rate_json(specificity(c))},
          {"sen", rate_json(sensitivity(c))},
          {"prec", rate_json(precision(c))},
          {"f1", rate_json(f1(c))}};
}

}  // namespace sonoqa
