#pragma once

// Deliberately naive reference implementations used to cross-check the
// metrics and geometry code.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "sonoqa/metrics.hpp"

namespace sonoqa::oracle {

// AP by enumerating every distinct score threshold: the detections kept at a
// threshold are matched from scratch, then precision/recall are counted
// directly. Area uses the max precision over all points of higher or equal
// recall.
inline double average_precision(const std::vector<ScoredBox>& dets, const std::vector<TruthBox>& gts,
                                double iou_threshold) {
  std::vector<double> thresholds;
  for (const auto& d : dets) thresholds.push_back(d.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  std::vector<double> prec, rec;
  for (double t : thresholds) {
    std::vector<ScoredBox> kept;
    for (const auto& d : dets)
      if (d.score >= t) kept.push_back(d);
    // matching: repeatedly take the highest-scoring unprocessed detection
    // (earliest on ties)
    std::vector<int> done(kept.size(), 0), used(gts.size(), 0);
    std::size_t tp = 0;
    for (std::size_t step = 0; step < kept.size(); ++step) {
      std::size_t pick = kept.size();
      for (std::size_t i = 0; i < kept.size(); ++i)
        if (!done[i] && (pick == kept.size() || kept[i].score > kept[pick].score)) pick = i;
      done[pick] = 1;
      std::size_t best_g = gts.size();
      double best = iou_threshold;
      for (std::size_t g = 0; g < gts.size(); ++g)
        if (!used[g] && gts[g].image == kept[pick].image && iou(kept[pick].box, gts[g].box) > best)
          best = iou(kept[pick].box, gts[g].box), best_g = g;
      if (best_g < gts.size()) used[best_g] = 1, ++tp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(kept.size()));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  double ap = 0.0;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    double p = 0.0;
    for (std::size_t j = 0; j < rec.size(); ++j)
      if (rec[j] >= rec[k]) p = std::max(p, prec[j]);
    ap += (rec[k] - (k == 0 ? 0.0 : rec[k - 1])) * p;
  }
  return ap;
}

// Probability a random positive outranks a random negative, ties 1/2,
// by explicit pair counting.
inline double auc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::uint64_t twice = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 0) {
      ++neg;
      continue;
    }
    ++pos;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      if (scores[i] > scores[j]) twice += 2;
      else if (scores[i] == scores[j]) twice += 1;
    }
  }
  return static_cast<double>(twice) / static_cast<double>(2 * pos * neg);
}

// IoU of integer boxes as a reduced fraction.
struct Fraction {
  std::int64_t num = 0, den = 1;
};

inline Fraction iou_rational(std::int64_t ax0, std::int64_t ay0, std::int64_t ax1, std::int64_t ay1, std::int64_t bx0,
                             std::int64_t by0, std::int64_t bx1, std::int64_t by1) {
  const std::int64_t iw = std::max<std::int64_t>(0, std::min(ax1, bx1) - std::max(ax0, bx0));
  const std::int64_t ih = std::max<std::int64_t>(0, std::min(ay1, by1) - std::max(ay0, by0));
  const std::int64_t inter = iw * ih;
  const std::int64_t uni = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
  const std::int64_t g = std::gcd(inter, uni);
  return {inter / g, uni / g};
}

}  // namespace sonoqa::oracle
