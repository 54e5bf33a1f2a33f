#pragma once

// End-to-end multi-task training: anchor and ROI targets, the combined loss,
// SGD with momentum, per-epoch validation, checkpoints and resume.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sonoqa/dataset.hpp"
#include "sonoqa/model.hpp"
#include "sonoqa/report.hpp"

namespace sonoqa {

struct LossWeights {
  double objectness = 1.0;
  double box = 1.0;
  double cls = 1.0;
  double quality = 1.0;

  void validate() const {
    for (double w : {objectness, box, cls, quality})
      if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
    if (objectness + box + cls + quality == 0.0) throw ConfigError("loss weights must not all be zero");
  }
};

struct TrainConfig {
  ModelConfig model;
  LossWeights weights;
  std::uint64_t seed = 7;
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<std::size_t> lr_decay_epochs{28, 36};  // multiply by lr_decay_factor at these epochs
  double lr_decay_factor = 0.1;
  double grad_clip = 10.0;  // global L2 norm; 0 disables
  double focal_gamma = 2.0;
  double smooth_l1_beta = 1.0 / 9.0;
  std::size_t negatives_per_positive = 3;
  std::size_t jittered_rois = 2;   // perturbed copies of each ground truth per image
  std::size_t proposal_rois = 16;  // current RPN proposals added per image
  bool validate_each_epoch = true;

  void validate() const {
    sonoqa::validate(model);
    weights.validate();
    if (epochs == 0 || batch_size == 0) throw ConfigError("epochs and batch_size must be positive");
    if (!(learning_rate > 0.0) || !(momentum >= 0.0 && momentum < 1.0))
      throw ConfigError("learning_rate must be positive and momentum in [0,1)");
    if (!(weight_decay >= 0.0) || !(lr_decay_factor > 0.0) || !(grad_clip >= 0.0))
      throw ConfigError("weight_decay, lr_decay_factor and grad_clip must be non-negative (decay factor positive)");
    if (!(focal_gamma >= 0.0)) throw ConfigError("focal_gamma must be non-negative");
    if (!(smooth_l1_beta > 0.0)) throw ConfigError("smooth_l1_beta must be positive");
  }

  double lr_at(std::size_t epoch) const {
    double lr = learning_rate;
    for (auto e : lr_decay_epochs)
      if (epoch >= e) lr *= lr_decay_factor;
    return lr;
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"model", c.model},
       {"loss_weights",
        {{"objectness", c.weights.objectness}, {"box", c.weights.box}, {"cls", c.weights.cls}, {"quality", c.weights.quality}}},
       {"seed", c.seed},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"learning_rate", c.learning_rate},
       {"momentum", c.momentum},
       {"weight_decay", c.weight_decay},
       {"lr_decay_epochs", c.lr_decay_epochs},
       {"lr_decay_factor", c.lr_decay_factor},
       {"grad_clip", c.grad_clip},
       {"focal_gamma", c.focal_gamma},
       {"smooth_l1_beta", c.smooth_l1_beta},
       {"negatives_per_positive", c.negatives_per_positive},
       {"jittered_rois", c.jittered_rois},
       {"proposal_rois", c.proposal_rois},
       {"validate_each_epoch", c.validate_each_epoch}};
}

// Missing keys keep their defaults; unknown keys are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "model") from_json(v, c.model);
      else if (key == "loss_weights") {
        if (!v.is_object()) throw ConfigError("loss_weights must be an object");
        for (const auto& [k, w] : v.items()) {
          if (k == "objectness") c.weights.objectness = w.get<double>();
          else if (k == "box") c.weights.box = w.get<double>();
          else if (k == "cls") c.weights.cls = w.get<double>();
          else if (k == "quality") c.weights.quality = w.get<double>();
          else throw ConfigError("unknown loss weight '" + k + "'");
        }
      } else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "lr_decay_epochs") c.lr_decay_epochs = v.get<std::vector<std::size_t>>();
      else if (key == "lr_decay_factor") c.lr_decay_factor = v.get<double>();
      else if (key == "grad_clip") c.grad_clip = v.get<double>();
      else if (key == "focal_gamma") c.focal_gamma = v.get<double>();
      else if (key == "smooth_l1_beta") c.smooth_l1_beta = v.get<double>();
      else if (key == "negatives_per_positive") c.negatives_per_positive = v.get<std::size_t>();
      else if (key == "jittered_rois") c.jittered_rois = v.get<std::size_t>();
      else if (key == "proposal_rois") c.proposal_rois = v.get<std::size_t>();
      else if (key == "validate_each_epoch") c.validate_each_epoch = v.get<bool>();
      else throw ConfigError("unknown training config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for training config key '" + key + "': " + e.what());
    }
  }
}

// ------------------------------------------------------------------ targets

struct RpnTargets {
  std::vector<std::size_t> sampled;      // anchors entering the objectness term
  std::vector<double> labels;            // 1 / 0 per sampled anchor
  std::vector<std::size_t> positives;    // anchors entering the box term
  std::vector<double> deltas;            // 4 per positive
};

// Positive anchors per `assign`, plus up to `neg_per_pos` negatives per
// positive (at least that many when there are no positives).
inline RpnTargets make_rpn_targets(const std::vector<Anchor>& anchors, const std::vector<Box>& gts,
                                   double positive_iou, std::size_t neg_per_pos, Rng& rng) {
  if (anchors.empty()) throw ContractError("no anchors to train on");
  std::vector<Box> boxes;
  boxes.reserve(anchors.size());
  for (const auto& a : anchors) boxes.push_back(a.box);
  const auto asg = assign(boxes, gts, positive_iou);
  RpnTargets t;
  std::vector<std::size_t> negatives;
  for (const auto& a : asg) {
    if (a.positive) {
      t.positives.push_back(a.anchor);
      const BoxDelta d = encode_box(gts[a.matched], boxes[a.anchor]);
      t.deltas.insert(t.deltas.end(), {d.dx, d.dy, d.dw, d.dh});
    } else {
      negatives.push_back(a.anchor);
    }
  }
  const std::size_t want = std::min(negatives.size(), neg_per_pos * std::max<std::size_t>(1, t.positives.size()));
  for (std::size_t i = 0; i < want; ++i) {  // partial Fisher-Yates
    const std::size_t j = i + rng.below(negatives.size() - i);
    std::swap(negatives[i], negatives[j]);
  }
  negatives.resize(want);
  std::sort(negatives.begin(), negatives.end());
  for (auto p : t.positives) t.sampled.push_back(p), t.labels.push_back(1.0);
  for (auto n : negatives) t.sampled.push_back(n), t.labels.push_back(0.0);
  return t;
}

struct RoiTargets {
  std::vector<Box> rois;
  std::vector<std::size_t> labels;  // structure id, or K for background
  std::vector<std::size_t> foreground;
  std::vector<int> quality;         // flag per foreground ROI
  std::vector<double> deltas;       // 4 per foreground ROI
};

inline Box jitter_box(const Box& b, Rng& rng, double image_w, double image_h) {
  const double w = b.width() * std::exp(rng.uniform(-0.25, 0.25)), h = b.height() * std::exp(rng.uniform(-0.25, 0.25));
  const double cx = b.cx() + rng.uniform(-0.15, 0.15) * b.width(), cy = b.cy() + rng.uniform(-0.15, 0.15) * b.height();
  return clip_box({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}, image_w, image_h);
}

// ROIs: every ground truth, jittered copies, then the given proposals.
// A ROI is foreground for the ground truth of highest IoU when it exceeds
// `positive_iou`.
inline RoiTargets make_roi_targets(const std::vector<Annotation>& gts, const std::vector<Proposal>& proposals,
                                   std::size_t num_classes, std::size_t jittered, double positive_iou,
                                   double image_size, Rng& rng) {
  RoiTargets t;
  for (const auto& g : gts) t.rois.push_back(g.box);
  for (const auto& g : gts)
    for (std::size_t k = 0; k < jittered; ++k) {
      const Box b = jitter_box(g.box, rng, image_size, image_size);
      if (b.width() >= 1.0 && b.height() >= 1.0) t.rois.push_back(b);
    }
  for (const auto& p : proposals) t.rois.push_back(p.box);
  for (std::size_t i = 0; i < t.rois.size(); ++i) {
    double best = positive_iou;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(t.rois[i], gts[g].box);
      if (v > best) best = v, best_g = g;
    }
    if (best_g == gts.size()) {
      t.labels.push_back(num_classes);
      continue;
    }
    t.labels.push_back(gts[best_g].structure);
    t.foreground.push_back(i);
    t.quality.push_back(gts[best_g].flag);
    const BoxDelta d = encode_box(gts[best_g].box, t.rois[i]);
    t.deltas.insert(t.deltas.end(), {d.dx, d.dy, d.dw, d.dh});
  }
  return t;
}

// ------------------------------------------------------------------ loss

template <typename T>
struct LossTerms {
  Var<T> total, objectness, box, cls, quality;
};

namespace detail {

template <typename T>
std::vector<T> cast_vec(const std::vector<double>& v) {
  return std::vector<T>(v.begin(), v.end());
}

template <typename T>
Var<T> zero_scalar(Tape<T>& t) {
  return t.constant(Tensor<T>::scalar(T(0)));
}

}  // namespace detail

// λ_obj·mean BCE(objectness) + λ_box·(smoothL1 over positive anchors + ROI
// refinement over foreground ROIs, each summed over the 4 coordinates and
// averaged over boxes) + λ_cls·mean focal(class) + λ_q·mean focal(quality,
// foreground ROIs only).
template <typename T>
LossTerms<T> total_loss(const RpnOutputs<T>& rpn, const RoiOutputs<T>& roi, const RpnTargets& rt,
                        const RoiTargets& ot, const LossWeights& w, T gamma, T beta) {
  if (rt.sampled.empty()) throw ContractError("total_loss: batch has no sampled anchors");
  auto& tape = rpn.objectness.tape();
  const std::size_t n_anchor = rpn.objectness.numel();
  LossTerms<T> L;

  const Var<T> obj = ag::gather_rows(ag::reshape(rpn.objectness, {n_anchor, 1}), rt.sampled);
  L.objectness = ag::mean(ag::bce_with_logits(obj, detail::cast_vec<T>(rt.labels)));

  Var<T> box = detail::zero_scalar(tape);
  if (!rt.positives.empty()) {
    const Var<T> d = ag::gather_rows(rpn.deltas, rt.positives);
    box = ag::scale(ag::sum(ag::smooth_l1(d, detail::cast_vec<T>(rt.deltas), beta)),
                    T(1) / static_cast<T>(rt.positives.size()));
  }
  if (!ot.foreground.empty()) {
    const Var<T> d = ag::gather_rows(roi.box_deltas, ot.foreground);
    box = ag::add(box, ag::scale(ag::sum(ag::smooth_l1(d, detail::cast_vec<T>(ot.deltas), beta)),
                                 T(1) / static_cast<T>(ot.foreground.size())));
  }
  L.box = box;

  if (ot.labels.size() != roi.class_logits.shape()[0]) throw DimensionError("total_loss: ROI label count mismatch");
  L.cls = ag::mean(ag::focal_multiclass(roi.class_logits, ot.labels, gamma));

  L.quality = detail::zero_scalar(tape);
  if (!ot.foreground.empty())
    L.quality = ag::mean(ag::focal_binary(ag::gather_rows(roi.quality_logits, ot.foreground), ot.quality, gamma));

  L.total = ag::add(ag::add(ag::scale(L.objectness, static_cast<T>(w.objectness)), ag::scale(L.box, static_cast<T>(w.box))),
                    ag::add(ag::scale(L.cls, static_cast<T>(w.cls)), ag::scale(L.quality, static_cast<T>(w.quality))));
  return L;
}

// ------------------------------------------------------------------ optimizer

// v <- momentum·v + g + weight_decay·θ;  θ <- θ - lr·v
template <typename T>
void sgd_step(ParameterSet<T>& params, ParameterSet<T>& velocity, const ParameterSet<T>& grads, double lr,
              double momentum, double weight_decay) {
  for (auto& [name, p] : params.map()) {
    auto& v = velocity.at(name);
    const auto& g = grads.at(name);
    for (std::size_t i = 0; i < p.numel(); ++i) {
      v[i] = static_cast<T>(momentum * v[i] + g[i] + weight_decay * p[i]);
      p[i] = static_cast<T>(p[i] - lr * v[i]);
    }
  }
}

template <typename T>
double grad_norm(const ParameterSet<T>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads.map())
    for (std::size_t i = 0; i < g.numel(); ++i) s += static_cast<double>(g[i]) * g[i];
  return std::sqrt(s);
}

// ------------------------------------------------------------------ training

struct StepLosses {
  double total = 0, objectness = 0, box = 0, cls = 0, quality = 0;

  StepLosses& operator+=(const StepLosses& o) {
    total += o.total, objectness += o.objectness, box += o.box, cls += o.cls, quality += o.quality;
    return *this;
  }
  StepLosses scaled(double s) const { return {total * s, objectness * s, box * s, cls * s, quality * s}; }
};

struct TrainSample {
  GrayImage image;  // preprocessed
  std::vector<Annotation> annotations;
};

inline std::vector<TrainSample> prepare_training(const std::vector<PhantomSample>& samples, const ModelConfig& cfg) {
  std::vector<TrainSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.image.width() != cfg.image_size || s.image.height() != cfg.image_size)
      throw InputError("training image size does not match the model config");
    out.push_back({preprocess(s.image, cfg.pre), s.annotations});
  }
  return out;
}

// Forward + backward for one image; adds scale·gradient into `grads`.
template <typename T>
StepLosses accumulate_sample(const ParameterSet<T>& params, ParameterSet<T>& grads, const TrainConfig& cfg,
                             const std::vector<Anchor>& anchors, const TrainSample& sample, Rng& rng, T scale) {
  const ModelConfig& mc = cfg.model;
  Tape<T> tape;
  Binding<T> p(tape, params, true);
  const auto dense = dense_forward(p, mc, sample.image);
  std::vector<Box> gt_boxes;
  for (const auto& a : sample.annotations) gt_boxes.push_back(a.box);
  const RpnTargets rt = make_rpn_targets(anchors, gt_boxes, mc.det.positive_iou, cfg.negatives_per_positive, rng);

  DetectorConfig dc = mc.det;
  dc.top_k = cfg.proposal_rois;
  std::vector<Proposal> props;
  if (cfg.proposal_rois > 0) props = propose(dense.rpn, anchors, mc.image_size, mc.image_size, dc);
  RoiTargets ot = make_roi_targets(sample.annotations, props, mc.classes(), cfg.jittered_rois, mc.det.positive_iou,
                                   static_cast<double>(mc.image_size), rng);
  if (ot.rois.empty()) ot.rois.push_back(anchors[rng.below(anchors.size())].box), ot.labels.push_back(mc.classes());
  const auto roi = roi_forward(p, mc, dense, ot.rois);
  const auto L = total_loss(dense.rpn, roi, rt, ot, cfg.weights, static_cast<T>(cfg.focal_gamma),
                            static_cast<T>(cfg.smooth_l1_beta));
  tape.backward(L.total);
  p.accumulate_grads(grads, scale);
  return {static_cast<double>(L.total.value().item()), static_cast<double>(L.objectness.value().item()),
          static_cast<double>(L.box.value().item()), static_cast<double>(L.cls.value().item()),
          static_cast<double>(L.quality.value().item())};
}

struct TrainState {
  ParameterSet<float> params;
  ParameterSet<float> velocity;
  std::size_t epoch = 0;  // epochs completed
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  StepLosses loss;
  std::optional<double> val_map;
  std::optional<double> val_acc;
};

inline std::string epoch_csv_header() { return "epoch,lr,loss,loss_obj,loss_box,loss_cls,loss_quality,val_map,val_acc"; }

inline std::string epoch_csv_row(const EpochLog& e) {
  std::ostringstream os;
  os << std::setprecision(8) << e.epoch << ',' << e.lr << ',' << e.loss.total << ',' << e.loss.objectness << ','
     << e.loss.box << ',' << e.loss.cls << ',' << e.loss.quality << ',';
  if (e.val_map) os << *e.val_map;
  os << ',';
  if (e.val_acc) os << *e.val_acc;
  return os.str();
}

inline TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.params = init_model_params<float>(cfg.model, cfg.seed);
  s.velocity = zeros_like(s.params);
  return s;
}

inline nlohmann::json checkpoint_meta(const TrainConfig& cfg, const TrainState& s) {
  return {{"train_config", cfg}, {"epoch", s.epoch}, {"velocity", params_to_json(s.velocity)}};
}

inline void save_train_checkpoint(const std::filesystem::path& path, const TrainConfig& cfg, const TrainState& s) {
  save_checkpoint(path, s.params, checkpoint_meta(cfg, s));
}

struct LoadedCheckpoint {
  TrainConfig config;
  TrainState state;
};

inline LoadedCheckpoint load_train_checkpoint(const std::filesystem::path& path) {
  const CheckpointData d = read_checkpoint(path);
  LoadedCheckpoint out;
  try {
    from_json(d.meta.at("train_config"), out.config);
    out.state.epoch = d.meta.at("epoch").get<std::size_t>();
    out.state.params = params_from_json<float>(d.parameters);
    out.state.velocity = d.meta.contains("velocity") ? params_from_json<float>(d.meta.at("velocity"))
                                                     : zeros_like(out.state.params);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint " + path.string() + ": " + e.what());
  }
  const auto expected = init_model_params<float>(out.config.model, 0);
  for (const auto& [name, t] : expected.map())
    if (!out.state.params.contains(name) || out.state.params.at(name).shape() != t.shape())
      throw IoError("checkpoint " + path.string() + " does not match its model config at parameter " + name);
  return out;
}

inline Model load_model(const std::filesystem::path& checkpoint) {
  auto ck = load_train_checkpoint(checkpoint);
  return Model(ck.config.model, std::move(ck.state.params));
}

struct TrainHooks {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const TrainState&)> on_checkpoint;
};

// One epoch of mini-batch SGD. The sample order and all sampling draws are
// derived from (seed, epoch), so resuming at an epoch boundary reproduces an
// uninterrupted run.
inline StepLosses train_epoch(TrainState& state, const TrainConfig& cfg, const std::vector<TrainSample>& train,
                              const std::vector<Anchor>& anchors) {
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng order_rng = Rng::derive(cfg.seed, 0xE90C, state.epoch);
  order_rng.shuffle(order);
  const double lr = cfg.lr_at(state.epoch);
  ParameterSet<float> grads = zeros_like(state.params);
  StepLosses sum;
  std::size_t step = 0;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    grads.fill(0.0f);
    StepLosses batch;
    for (std::size_t b = start; b < end; ++b) {
      Rng rng = Rng::derive(cfg.seed, state.epoch + 1, order[b]);
      batch += accumulate_sample(state.params, grads, cfg, anchors, train[order[b]], rng,
                                 1.0f / static_cast<float>(end - start));
    }
    batch = batch.scaled(1.0 / static_cast<double>(end - start));
    if (!std::isfinite(batch.total))
      throw NumericalError("training diverged at epoch " + std::to_string(state.epoch + 1) + ", step " +
                           std::to_string(step + 1) + ": loss = " + std::to_string(batch.total) +
                           " (lower learning_rate or raise grad_clip)");
    const double norm = grad_norm(grads);
    if (!std::isfinite(norm))
      throw NumericalError("training diverged at epoch " + std::to_string(state.epoch + 1) + ", step " +
                           std::to_string(step + 1) + ": non-finite gradient");
    if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
      const float s = static_cast<float>(cfg.grad_clip / norm);
      for (auto& [name, g] : grads.map())
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] *= s;
    }
    sgd_step(state.params, state.velocity, grads, lr, cfg.momentum, cfg.weight_decay);
    sum += batch.scaled(static_cast<double>(end - start));
  }
  return sum.scaled(1.0 / static_cast<double>(order.size()));
}

// Trains from `state` until cfg.epochs, validating each epoch when `val` is
// non-empty. The per-epoch log goes to hooks.on_epoch.
inline TrainState train(const TrainConfig& cfg, const std::vector<PhantomSample>& train_set,
                        const std::vector<PhantomSample>& val_set, TrainState state, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw InputError("training split has no samples");
  for (const auto& s : train_set)
    if (s.section != cfg.model.section) throw InputError("training sample section does not match the model config");
  const auto prepared = prepare_training(train_set, cfg.model);
  const auto anchors = generate_anchors(cfg.model.image_size, cfg.model.image_size, cfg.model.det.fpn);
  while (state.epoch < cfg.epochs) {
    EpochLog log;
    log.epoch = state.epoch + 1;
    log.lr = cfg.lr_at(state.epoch);
    log.loss = train_epoch(state, cfg, prepared, anchors);
    ++state.epoch;
    if (cfg.validate_each_epoch && !val_set.empty()) {
      const EvalSummary ev = evaluate(Model(cfg.model, state.params), val_set);
      log.val_map = ev.ap.map;
      log.val_acc = ev.verdict_accuracy();
    }
    if (hooks.on_epoch) hooks.on_epoch(log);
    if (hooks.on_checkpoint) hooks.on_checkpoint(state);
  }
  return state;
}

}  // namespace sonoqa
