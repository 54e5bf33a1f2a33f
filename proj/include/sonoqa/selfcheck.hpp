#pragma once

// Numerical self-checks shipped with the tool: gradients against central
// differences, relation-weight normalization, focal-loss reduction, IoU and
// anchor arithmetic, metric oracles and SPP length invariance.

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "sonoqa/backbone.hpp"
#include "sonoqa/classifier.hpp"
#include "sonoqa/detector.hpp"
#include "sonoqa/gradcheck.hpp"
#include "sonoqa/metrics.hpp"
#include "sonoqa/model.hpp"
#include "sonoqa/oracles.hpp"
#include "sonoqa/pooling.hpp"
#include "sonoqa/random.hpp"
#include "sonoqa/relation.hpp"
#include "sonoqa/trainer.hpp"

namespace sonoqa {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

struct SelfcheckOptions {
  std::uint64_t seed = 2024;
  // Evaluates AP with the wrong interpolation; the oracle check must then fail.
  ApInterpolation ap_interpolation = ApInterpolation::kAllPoint;
};

namespace check_detail {

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = scale * rng.normal();
  return t;
}

// Uniform values kept at least `gap` away from the given kinks.
inline Tensor<double> away_from(Shape s, Rng& rng, double lo, double hi, const std::vector<double>& kinks, double gap) {
  Tensor<double> t(std::move(s));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    for (;;) {
      const double v = rng.uniform(lo, hi);
      bool ok = true;
      for (double k : kinks) ok = ok && std::abs(v - k) >= gap;
      if (ok) {
        t[i] = v;
        break;
      }
    }
  }
  return t;
}

// Contracts a tensor-valued op to a scalar with fixed random weights, so every
// output coordinate contributes a distinct gradient.
inline Var<double> contract(const Var<double>& y, const Tensor<double>& w) {
  return ag::sum(ag::mul(y, y.tape().constant(w)));
}

template <typename F>
CheckResult timed(std::string name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  CheckResult r = body();
  r.name = std::move(name);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

}  // namespace check_detail

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradStep = 1e-6;

// One differentiable op under test: builds inputs for point `k` and the
// scalar function of them.
struct GradCase {
  std::string op;
  std::function<std::pair<std::vector<Tensor<double>>, MultiFn>(Rng&)> make;
};

inline std::vector<GradCase> gradient_cases() {
  using check_detail::contract;
  using check_detail::random_tensor;
  std::vector<GradCase> cases;

  cases.push_back({"conv2d", [](Rng& rng) {
                     const std::size_t stride = 1 + rng.below(2);
                     auto x = random_tensor({2, 7, 6}, rng);
                     auto k = random_tensor({3, 2, 3, 3}, rng, 0.5);
                     auto b = random_tensor({3}, rng);
                     const std::size_t oh = (7 + 2 - 3) / stride + 1, ow = (6 + 2 - 3) / stride + 1;
                     auto w = random_tensor({3, oh, ow}, rng);
                     MultiFn f = [stride, w](Tape<double>&, const std::vector<Var<double>>& v) {
                       return contract(ag::conv2d(v[0], v[1], v[2], stride, 1), w);
                     };
                     return std::pair{std::vector<Tensor<double>>{x, k, b}, f};
                   }});

  cases.push_back({"relu", [](Rng& rng) {
                     auto x = check_detail::away_from({24}, rng, -2.0, 2.0, {0.0}, 1e-3);
                     auto w = random_tensor({24}, rng);
                     MultiFn f = [w](Tape<double>&, const std::vector<Var<double>>& v) {
                       return contract(ag::relu(v[0]), w);
                     };
                     return std::pair{std::vector<Tensor<double>>{x}, f};
                   }});

  cases.push_back({"global_avg_pool", [](Rng& rng) {
                     auto x = random_tensor({3, 5, 6}, rng);
                     auto w = random_tensor({3}, rng);
                     MultiFn f = [w](Tape<double>&, const std::vector<Var<double>>& v) {
                       return contract(ag::global_avg_pool(v[0]), w);
                     };
                     return std::pair{std::vector<Tensor<double>>{x}, f};
                   }});

  cases.push_back({"spp", [](Rng& rng) {
                     auto x = random_tensor({2, 9, 11}, rng);
                     const std::vector<std::size_t> levels{1, 2, 4, 16};
                     auto w = random_tensor({2 * spp_bins(levels)}, rng);
                     MultiFn f = [w, levels](Tape<double>&, const std::vector<Var<double>>& v) {
                       return contract(ag::spp(v[0], levels), w);
                     };
                     return std::pair{std::vector<Tensor<double>>{x}, f};
                   }});

  cases.push_back({"relation_module", [](Rng& rng) {
                     RelationConfig cfg;
                     cfg.d_f = 6, cfg.d_k = 4, cfg.d_g = 8;
                     const std::size_t n = 2 + rng.below(4);
                     std::vector<BoxGeometry> boxes;
                     for (std::size_t i = 0; i < n; ++i)
                       boxes.push_back({rng.uniform(0, 100), rng.uniform(0, 100), rng.uniform(5, 40), rng.uniform(5, 40)});
                     const Tensor<double> emb = pairwise_embedding<double>(boxes, cfg);
                     auto feats = random_tensor({n, cfg.d_f}, rng);
                     auto wg = random_tensor({cfg.d_g, 1}, rng, 0.5);
                     auto wk = random_tensor({cfg.d_f, cfg.d_k}, rng, 0.5);
                     auto wq = random_tensor({cfg.d_f, cfg.d_k}, rng, 0.5);
                     auto wv = random_tensor({cfg.d_f, cfg.d_f}, rng, 0.5);
                     auto w = random_tensor({n, cfg.d_f}, rng);
                     MultiFn f = [cfg, emb, w](Tape<double>& t, const std::vector<Var<double>>& v) {
                       const auto o = relation_forward(v[0], t.constant(emb), v[1], v[2], v[3], v[4], cfg);
                       return contract(o.fused, w);
                     };
                     return std::pair{std::vector<Tensor<double>>{feats, wg, wk, wq, wv}, f};
                   }});

  cases.push_back({"focal_loss", [](Rng& rng) {
                     const double gamma = static_cast<double>(rng.below(4));
                     auto logits = random_tensor({5, 4}, rng, 1.5);
                     std::vector<std::size_t> labels(5);
                     for (auto& l : labels) l = rng.below(4);
                     auto z = random_tensor({6}, rng, 1.5);
                     std::vector<int> targets(6);
                     for (auto& y : targets) y = static_cast<int>(rng.below(2));
                     MultiFn f = [gamma, labels, targets](Tape<double>&, const std::vector<Var<double>>& v) {
                       return ag::add(ag::sum(ag::focal_multiclass(v[0], labels, gamma)),
                                      ag::sum(ag::focal_binary(v[1], targets, gamma)));
                     };
                     return std::pair{std::vector<Tensor<double>>{logits, z}, f};
                   }});

  cases.push_back({"total_loss", [](Rng& rng) {
                     const std::size_t anchors = 12, rois = 5, k = 3;
                     const double beta = 1.0 / 9.0;
                     RpnTargets rt;
                     for (std::size_t i = 0; i < anchors; ++i)
                       if (rng.bernoulli(0.6)) rt.sampled.push_back(i), rt.labels.push_back(rng.below(2) ? 1.0 : 0.0);
                     if (rt.sampled.empty()) rt.sampled.push_back(0), rt.labels.push_back(1.0);
                     for (std::size_t i = 0; i < rt.sampled.size(); ++i)
                       if (rt.labels[i] == 1.0) rt.positives.push_back(rt.sampled[i]);
                     RoiTargets ot;
                     for (std::size_t i = 0; i < rois; ++i) {
                       ot.labels.push_back(rng.below(k + 1));
                       if (ot.labels.back() < k) ot.foreground.push_back(i), ot.quality.push_back(static_cast<int>(rng.below(2)));
                     }
                     // regression targets sit at least 1e-3 away from the smooth-L1 knee
                     auto obj = random_tensor({anchors}, rng, 1.5);
                     auto dl = random_tensor({anchors, 4}, rng, 0.3);
                     auto cls = random_tensor({rois, k + 1}, rng, 1.5);
                     auto qual = random_tensor({rois, 1}, rng, 1.5);
                     auto bd = random_tensor({rois, 4}, rng, 0.3);
                     auto pick_target = [&](double pred) {
                       for (;;) {
                         const double t = pred + rng.uniform(-0.5, 0.5);
                         if (std::abs(std::abs(pred - t) - beta) > 1e-3 && std::abs(pred - t) > 1e-3) return t;
                       }
                     };
                     for (auto a : rt.positives)
                       for (std::size_t j = 0; j < 4; ++j) rt.deltas.push_back(pick_target(dl[a * 4 + j]));
                     for (auto r : ot.foreground)
                       for (std::size_t j = 0; j < 4; ++j) ot.deltas.push_back(pick_target(bd[r * 4 + j]));
                     MultiFn f = [rt, ot, beta](Tape<double>&, const std::vector<Var<double>>& v) {
                       const RpnOutputs<double> rpn{{}, v[0], v[1]};
                       const RoiOutputs<double> roi{v[2], v[3], v[4], Var<double>{}};
                       return total_loss(rpn, roi, rt, ot, LossWeights{}, 2.0, beta).total;
                     };
                     return std::pair{std::vector<Tensor<double>>{obj, dl, cls, qual, bd}, f};
                   }});
  return cases;
}

// Criterion: every op within kGradTolerance at 10 random points.
inline CheckResult check_gradients(std::uint64_t seed, std::size_t points = 10) {
  return check_detail::timed("gradients", [&] {
    CheckResult r{"", true, "", 0.0};
    std::ostringstream detail;
    std::uint64_t op_index = 0;
    for (const auto& c : gradient_cases()) {
      double worst = 0.0;
      for (std::size_t k = 0; k < points; ++k) {
        Rng rng = Rng::derive(seed, 0x6AD + op_index, k);
        auto [inputs, f] = c.make(rng);
        worst = std::max(worst, grad_check(f, inputs, kGradStep).max_rel_error);
      }
      if (!(worst <= kGradTolerance)) r.passed = false;
      detail << c.op << "=" << check_detail::fmt(worst) << " ";
      ++op_index;
    }
    r.detail = "max rel err " + detail.str();
    return r;
  });
}

// Criterion: relation weight columns are distributions, degenerate sets included.
inline CheckResult check_relation_normalization(std::uint64_t seed, std::size_t sets = 1000) {
  return check_detail::timed("relation-normalization", [&] {
    RelationConfig cfg;
    cfg.d_f = 8, cfg.d_k = 4, cfg.d_g = 16;
    double worst = 0.0, most_negative = 0.0;
    std::size_t degenerate_sets = 0;
    for (std::size_t s = 0; s < sets; ++s) {
      Rng rng = Rng::derive(seed, 0x2E1, s);
      const std::size_t n = 1 + rng.below(8);
      RoiFeatureSet set;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> f(cfg.d_f);
        for (auto& v : f) v = rng.normal() * 3.0;
        set.appearance.push_back(std::move(f));
        set.geometry.push_back({rng.uniform(0, 128), rng.uniform(0, 128), rng.uniform(2, 60), rng.uniform(2, 60)});
      }
      RelationParams p{check_detail::random_tensor({cfg.d_g, 1}, rng), check_detail::random_tensor({cfg.d_f, cfg.d_k}, rng),
                       check_detail::random_tensor({cfg.d_f, cfg.d_k}, rng), check_detail::random_tensor({cfg.d_f, cfg.d_f}, rng)};
      // every tenth set has an all-zero geometry term
      if (s % 10 == 0) {
        p.wg = Tensor<double>({cfg.d_g, 1});
        ++degenerate_sets;
      }
      const Tensor<double> w = relation_weights(set, p, cfg);
      for (std::size_t col = 0; col < n; ++col) {
        double sum = 0.0;
        for (std::size_t m = 0; m < n; ++m) {
          sum += w.at(m, col);
          most_negative = std::min(most_negative, w.at(m, col));
        }
        worst = std::max(worst, std::abs(sum - 1.0));
      }
    }
    return CheckResult{"", worst <= 1e-9 && most_negative >= 0.0,
                       std::to_string(sets) + " sets (" + std::to_string(degenerate_sets) +
                           " degenerate), max |colsum-1| " + check_detail::fmt(worst) + ", min weight " +
                           check_detail::fmt(most_negative),
                       0.0};
  });
}

// Criterion: gamma 0 is cross-entropy; loss falls as p_t rises.
inline CheckResult check_focal_reduction() {
  return check_detail::timed("focal-reduction", [&] {
    double worst = 0.0;
    bool monotone = true;
    for (int i = 1; i <= 99; ++i) {
      const double pt = i / 100.0;
      worst = std::max(worst, std::abs(focal_loss(pt, 0.0) + std::log(pt)));
    }
    for (double gamma : {0.0, 1.0, 2.0, 5.0})
      for (int i = 1; i < 99; ++i)
        monotone = monotone && focal_loss((i + 1) / 100.0, gamma) < focal_loss(i / 100.0, gamma);
    // the differentiable path agrees with the scalar form
    Tape<double> t;
    Tensor<double> z({99});
    for (int i = 1; i <= 99; ++i) z[i - 1] = std::log(i / 100.0) - std::log1p(-i / 100.0);
    const auto fl = ag::focal_binary(t.constant(z), std::vector<int>(99, 1), 0.0).value();
    for (int i = 1; i <= 99; ++i) worst = std::max(worst, std::abs(fl[i - 1] + std::log(i / 100.0)));
    return CheckResult{"", worst <= 1e-12 && monotone,
                       "max |FL_0 + ln p_t| " + check_detail::fmt(worst) + (monotone ? ", monotone" : ", NOT monotone"),
                       0.0};
  });
}

// Criterion: the IoU example and the anchor count on 256x256, the latter
// against the geometric sum 3 * sum over levels of (256 / stride)^2.
inline CheckResult check_iou_anchors() {
  return check_detail::timed("iou-anchors", [&] {
    const oracle::Fraction q = oracle::iou_rational(0, 0, 2, 2, 1, 1, 3, 3);
    const double v = iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3});
    const bool iou_ok = q.num == 1 && q.den == 7 && v == 1.0 / 7.0;
    std::size_t expected = 0;
    for (std::size_t stride = 8; stride <= 128; stride *= 2) expected += 3 * (256 / stride) * (256 / stride);
    const std::size_t total = generate_anchors(256, 256, FpnConfig{}).size();
    return CheckResult{"", iou_ok && total == expected,
                       "iou " + std::to_string(q.num) + "/" + std::to_string(q.den) + ", anchors " +
                           std::to_string(total) + " (3*(32^2+16^2+8^2+4^2+2^2) = " + std::to_string(expected) + ")",
                       0.0};
  });
}

// Random AP instance: few boxes on a coarse lattice so IoUs straddle the
// threshold and scores collide.
inline std::pair<std::vector<ScoredBox>, std::vector<TruthBox>> random_ap_instance(Rng& rng) {
  auto box = [&] {
    const double x = static_cast<double>(rng.below(4)), y = static_cast<double>(rng.below(4));
    return Box{x, y, x + 2.0 + static_cast<double>(rng.below(2)), y + 2.0 + static_cast<double>(rng.below(2))};
  };
  std::vector<TruthBox> gts(1 + rng.below(3));
  for (auto& g : gts) g = {rng.below(2), 0, box()};
  std::vector<ScoredBox> dets(rng.below(7));
  for (auto& d : dets) d = {rng.below(2), 0, box(), static_cast<double>(rng.below(5)) / 4.0};
  return {dets, gts};
}

// Criterion: AP and AUC against brute-force oracles, plus confusion fixtures.
inline CheckResult check_metric_oracles(std::uint64_t seed, ApInterpolation interp = ApInterpolation::kAllPoint,
                                        std::size_t instances = 500) {
  return check_detail::timed("metric-oracles", [&] {
    std::size_t ap_bad = 0, auc_bad = 0;
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng = Rng::derive(seed, 0xA9, i);
      const auto [dets, gts] = random_ap_instance(rng);
      if (average_precision(dets, gts, 0.5, interp) != oracle::average_precision(dets, gts, 0.5)) ++ap_bad;
    }
    // the documented two-GT example
    {
      const std::vector<TruthBox> gts{{0, 0, {0, 0, 10, 10}}, {0, 0, {20, 20, 30, 30}}};
      const std::vector<ScoredBox> dets{{0, 0, {0, 0, 10, 10}, 0.9}, {0, 0, {50, 50, 60, 60}, 0.8},
                                        {0, 0, {20, 20, 30, 30}, 0.7}};
      if (std::abs(average_precision(dets, gts, 0.5, interp) - (0.5 + 0.5 * 2.0 / 3.0)) > 1e-12) ++ap_bad;
    }
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng = Rng::derive(seed, 0xAC, i);
      const std::size_t n = 2 + rng.below(49);
      std::vector<double> s(n);
      std::vector<int> y(n);
      for (std::size_t j = 0; j < n; ++j) {
        s[j] = static_cast<double>(rng.below(8)) / 8.0;
        y[j] = static_cast<int>(rng.below(2));
      }
      y[0] = 1, y[1] = 0;
      if (roc_auc(s, y).auc != oracle::auc_pairs(s, y)) ++auc_bad;
    }
    // 9/1/1/9 -> every rate 0.9
    std::vector<int> pred, truth;
    for (int i = 0; i < 20; ++i) {
      truth.push_back(i < 10 ? 1 : 0);
      pred.push_back(i < 9 || i == 19 ? 1 : 0);
    }
    const ConfusionCounts c = confusion(pred, truth);
    bool fixtures = c == ConfusionCounts{9, 1, 1, 9};
    for (const Rate& r : {accuracy(c), specificity(c), sensitivity(c), precision(c), f1(c)})
      fixtures = fixtures && r && std::abs(*r - 0.9) <= 1e-12;
    return CheckResult{"", ap_bad == 0 && auc_bad == 0 && fixtures,
                       "AP mismatches " + std::to_string(ap_bad) + "/" + std::to_string(instances + 1) +
                           ", AUC mismatches " + std::to_string(auc_bad) + "/" + std::to_string(instances) +
                           ", 9/1/1/9 fixture " + (fixtures ? "ok" : "FAILED"),
                       0.0};
  });
}

// Criterion: SPP length is 277*C for every input size, both on raw maps and on
// the last backbone stage.
inline CheckResult check_spp_invariance(std::uint64_t seed) {
  return check_detail::timed("spp-invariance", [&] {
    const std::vector<std::size_t> levels = default_spp_levels();
    const FenConfig fen{16.0};
    const FeatureExtractor<float> net(fen, seed);
    const std::size_t c5 = fen.channels()[4];
    bool ok = spp_bins(levels) == 277;
    std::ostringstream lens;
    Rng rng = Rng::derive(seed, 0x5BB);
    for (std::size_t side : {32, 64, 128, 256}) {
      const std::size_t raw = spp(check_detail::random_tensor({3, side, side}, rng), levels).numel();
      GrayImage img(side, side);
      for (auto& px : img.pixels()) px = rng.uniform();
      const std::size_t deep = spp(net.extract(img).stages[4], levels).numel();
      ok = ok && raw == 277 * 3 && deep == 277 * c5;
      lens << side << ":" << deep << " ";
    }
    return CheckResult{"", ok, "C5 SPP lengths " + lens.str() + "(277*" + std::to_string(c5) + ")", 0.0};
  });
}

inline std::vector<CheckResult> run_selfcheck(const SelfcheckOptions& opt) {
  return {check_gradients(opt.seed), check_relation_normalization(opt.seed), check_focal_reduction(),
          check_iou_anchors(), check_metric_oracles(opt.seed, opt.ap_interpolation), check_spp_invariance(opt.seed)};
}

}  // namespace sonoqa
