#include <gtest/gtest.h>

#include <filesystem>

#include "sonoqa/phantom.hpp"
#include "sonoqa/trainer.hpp"

using namespace sonoqa;

namespace {

DegradeParams clean() {
  DegradeParams p;
  p.text_rate = 0.0;
  p.distractor_rate = 0.0;
  return p;
}

TrainConfig tiny_config(std::size_t side) {
  TrainConfig c;
  c.model.image_size = side;
  c.model.fen.channel_scale = 16.0;
  c.epochs = 4;
  c.batch_size = 2;
  c.lr_decay_epochs = {};
  c.validate_each_epoch = false;
  return c;
}

std::vector<PhantomSample> samples(Section s, std::size_t n, std::size_t side, std::uint64_t seed) {
  std::vector<PhantomSample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(s, i % 2 == 0, clean(), seed + i, side));
  return out;
}

}  // namespace

TEST(Sgd, PlainAndMomentumSteps) {
  ParameterSet<double> p;
  p.add("x", Tensor<double>({3}, {1, 2, 3}));
  auto v = zeros_like(p);
  auto g = zeros_like(p);
  for (std::size_t i = 0; i < 3; ++i) g.at("x")[i] = 2.0 * p.at("x")[i];  // grad of |x|^2
  sgd_step(p, v, g, 0.1, 0.0, 0.0);
  EXPECT_NEAR(p.at("x")[0], 0.8, 1e-15);
  EXPECT_NEAR(p.at("x")[2], 2.4, 1e-15);

  ParameterSet<double> q;
  q.add("x", Tensor<double>({1}, {1.0}));
  auto vq = zeros_like(q), gq = zeros_like(q);
  gq.at("x")[0] = 1.0;
  sgd_step(q, vq, gq, 0.5, 0.9, 0.1);  // v = 1 + 0.1 = 1.1, x = 1 - 0.55
  EXPECT_NEAR(vq.at("x")[0], 1.1, 1e-15);
  EXPECT_NEAR(q.at("x")[0], 0.45, 1e-15);
  sgd_step(q, vq, gq, 0.5, 0.9, 0.1);  // v = 0.99 + 1 + 0.045
  EXPECT_NEAR(vq.at("x")[0], 2.035, 1e-14);
  EXPECT_NEAR(q.at("x")[0], 0.45 - 0.5 * 2.035, 1e-14);
}

TEST(LearningRate, StepDecay) {
  TrainConfig c;
  EXPECT_EQ(c.lr_at(0), 0.01);
  EXPECT_EQ(c.lr_at(27), 0.01);
  EXPECT_NEAR(c.lr_at(28), 1e-3, 1e-18);
  EXPECT_NEAR(c.lr_at(39), 1e-4, 1e-18);
}

TEST(TrainConfig, JsonAndValidation) {
  TrainConfig c;
  c.epochs = 3;
  c.weights.box = 2.5;
  EXPECT_EQ(nlohmann::json(nlohmann::json(c).get<TrainConfig>()), nlohmann::json(c));
  EXPECT_THROW(nlohmann::json({{"epoch", 3}}).get<TrainConfig>(), ConfigError);
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.weights = {0, 0, 0, 0};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Targets, RpnSamplingRatio) {
  const auto anchors = generate_anchors(128, 128, FpnConfig{});
  Rng rng(1);
  const auto t = make_rpn_targets(anchors, {Box{30, 30, 62, 62}}, 0.5, 3, rng);
  ASSERT_FALSE(t.positives.empty());
  EXPECT_EQ(t.sampled.size(), 4 * t.positives.size());
  EXPECT_EQ(t.deltas.size(), 4 * t.positives.size());
  std::size_t ones = 0;
  for (double l : t.labels) ones += l == 1.0 ? 1 : 0;
  EXPECT_EQ(ones, t.positives.size());
  const auto none = make_rpn_targets(anchors, {}, 0.5, 3, rng);
  EXPECT_TRUE(none.positives.empty());
  EXPECT_EQ(none.sampled.size(), 3u);
}

TEST(Targets, GroundTruthRoisAreExactForeground) {
  Rng rng(2);
  const std::vector<Annotation> gts{{Box{10, 10, 40, 40}, 1, 1}, {Box{60, 60, 90, 100}, 0, 0}};
  const auto t = make_roi_targets(gts, {}, 3, 2, 0.5, 128, rng);
  ASSERT_EQ(t.rois.size(), 6u);
  EXPECT_EQ(t.labels[0], 1u);
  EXPECT_EQ(t.labels[1], 0u);
  EXPECT_EQ(t.quality[0], 1);
  EXPECT_EQ(t.quality[1], 0);
  for (std::size_t j = 0; j < 8; ++j) EXPECT_EQ(t.deltas[j], 0.0);
  EXPECT_EQ(t.foreground.size(), t.quality.size());
  EXPECT_EQ(t.deltas.size(), 4 * t.foreground.size());
}

TEST(TotalLoss, PerfectPredictionsGiveZero) {
  Tape<double> tp;
  RpnTargets rt{{0, 1}, {1.0, 0.0}, {0}, {0.1, 0.2, 0.3, 0.4}};
  RoiTargets ot;
  ot.rois = {Box{0, 0, 1, 1}, Box{0, 0, 1, 1}};
  ot.labels = {0, 2};
  ot.foreground = {0};
  ot.quality = {1};
  ot.deltas = {-0.1, 0.0, 0.5, 0.2};
  const RpnOutputs<double> rpn{{}, tp.leaf(Tensor<double>({2}, {60, -60})),
                               tp.leaf(Tensor<double>({2, 4}, {0.1, 0.2, 0.3, 0.4, 9, 9, 9, 9}))};
  const RoiOutputs<double> roi{tp.leaf(Tensor<double>({2, 3}, {80, 0, 0, 0, 0, 80})), tp.leaf(Tensor<double>({2, 1}, {80, -5})),
                               tp.leaf(Tensor<double>({2, 4}, {-0.1, 0.0, 0.5, 0.2, 7, 7, 7, 7})), Var<double>{}};
  const auto L = total_loss(rpn, roi, rt, ot, LossWeights{}, 2.0, 1.0 / 9.0);
  EXPECT_NEAR(L.total.value().item(), 0.0, 1e-12);
  EXPECT_EQ(L.box.value().item(), 0.0);
}

TEST(TotalLoss, ZeroBoxWeightGivesZeroBoxGradients) {
  Rng rng(3);
  Tape<double> tp;
  RpnTargets rt{{0, 1, 2}, {1.0, 0.0, 1.0}, {0, 2}, {}};
  for (int i = 0; i < 8; ++i) rt.deltas.push_back(rng.normal());
  RoiTargets ot;
  ot.labels = {1, 0};
  ot.foreground = {0, 1};
  ot.quality = {1, 0};
  for (int i = 0; i < 8; ++i) ot.deltas.push_back(rng.normal());
  auto rnd = [&](Shape s) {
    Tensor<double> t(std::move(s));
    for (auto& v : t.values()) v = rng.normal();
    return t;
  };
  const RpnOutputs<double> rpn{{}, tp.leaf(rnd({3})), tp.leaf(rnd({3, 4}))};
  const RoiOutputs<double> roi{tp.leaf(rnd({2, 3})), tp.leaf(rnd({2, 1})), tp.leaf(rnd({2, 4})), Var<double>{}};
  LossWeights w;
  w.box = 0.0;
  const auto L = total_loss(rpn, roi, rt, ot, w, 2.0, 1.0 / 9.0);
  EXPECT_GT(L.box.value().item(), 0.0);
  tp.backward(L.total);
  const auto g_rpn = tp.grad(rpn.deltas), g_roi = tp.grad(roi.box_deltas), g_cls = tp.grad(roi.class_logits);
  for (double g : g_rpn.values()) EXPECT_EQ(g, 0.0);
  for (double g : g_roi.values()) EXPECT_EQ(g, 0.0);
  double cls = 0.0;
  for (double g : g_cls.values()) cls += std::abs(g);
  EXPECT_GT(cls, 0.0);
}

TEST(TotalLoss, FullModelGradientMatchesFiniteDifferences) {
  TrainConfig cfg = tiny_config(64);
  cfg.model.fen.channel_scale = 128.0;
  cfg.model.det.pyramid_width = 4;
  cfg.model.det.head_width = 4;
  cfg.model.roi_channels = 2;
  cfg.model.rel.d_f = 8, cfg.model.rel.d_k = 4, cfg.model.rel.d_g = 8;
  cfg.model.spp_levels = {1, 2};
  cfg.proposal_rois = 0;  // targets then do not depend on the parameters
  const auto sample = prepare_training({generate_sample(Section::kHead, true, clean(), 4, 64)}, cfg.model).front();
  const auto anchors = generate_anchors(64, 64, cfg.model.det.fpn);
  auto params = init_model_params<double>(cfg.model, 5);
  // non-zero heads so every path carries gradient
  Rng init(6);
  for (auto& [name, t] : params.map())
    for (auto& v : t.values()) v += 0.05 * init.normal();

  auto loss_and_grad = [&](const ParameterSet<double>& p, ParameterSet<double>* g) {
    ParameterSet<double> sink = zeros_like(p);
    Rng rng(11);
    return accumulate_sample(p, g ? *g : sink, cfg, anchors, sample, rng, 1.0).total;
  };
  ParameterSet<double> grads = zeros_like(params);
  loss_and_grad(params, &grads);

  Rng pick(12);
  const double h = 1e-6;
  double worst = 0.0;
  for (auto& [name, t] : params.map()) {
    for (int k = 0; k < 3; ++k) {
      const std::size_t i = pick.below(t.numel());
      const double x = t[i];
      t[i] = x + h;
      const double up = loss_and_grad(params, nullptr);
      t[i] = x - h;
      const double down = loss_and_grad(params, nullptr);
      t[i] = x;
      const double numeric = (up - down) / (2 * h);
      const double err = std::abs(grads.at(name)[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
      EXPECT_LE(err, 1e-4) << name << "[" << i << "]";
    }
  }
  EXPECT_LE(worst, 1e-4);
}

TEST(Train, LossDecreasesOnASmallSet) {
  TrainConfig cfg = tiny_config(64);
  cfg.epochs = 15;
  const auto data = samples(Section::kHead, 4, 64, 100);
  std::vector<double> losses;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) { losses.push_back(e.loss.total); };
  const auto out = train(cfg, data, {}, initial_state(cfg), hooks);
  ASSERT_EQ(losses.size(), 15u);
  EXPECT_EQ(out.epoch, 15u);
  EXPECT_LT(losses.back(), 0.7 * losses.front());
}

TEST(Train, ResumeReproducesAnUninterruptedRun) {
  TrainConfig cfg = tiny_config(64);
  cfg.model.section = Section::kAbdominal;
  const auto data = samples(Section::kAbdominal, 5, 64, 200);
  const auto straight = train(cfg, data, {}, initial_state(cfg));

  TrainConfig half = cfg;
  half.epochs = 2;
  const auto first = train(half, data, {}, initial_state(cfg));
  const auto path = std::filesystem::temp_directory_path() / "sonoqa_test_resume.json";
  save_train_checkpoint(path, half, first);
  auto loaded = load_train_checkpoint(path);
  EXPECT_EQ(loaded.state.epoch, 2u);
  EXPECT_EQ(params_to_json(loaded.state.params), params_to_json(first.params));
  EXPECT_EQ(params_to_json(loaded.state.velocity), params_to_json(first.velocity));
  const auto resumed = train(cfg, data, {}, std::move(loaded.state));
  EXPECT_EQ(params_to_json(resumed.params), params_to_json(straight.params));
  std::filesystem::remove(path);
}

TEST(Train, ValidationLogMatchesStandaloneEvaluation) {
  TrainConfig cfg = tiny_config(64);
  cfg.epochs = 2;
  cfg.validate_each_epoch = true;
  cfg.model.section = Section::kHeart;
  const auto data = samples(Section::kHeart, 4, 64, 300), val = samples(Section::kHeart, 3, 64, 400);
  std::optional<EpochLog> last;
  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochLog& e) { last = e; };
  const auto state = train(cfg, data, val, initial_state(cfg), hooks);
  ASSERT_TRUE(last);
  const auto ev = evaluate(Model(cfg.model, state.params), val);
  EXPECT_EQ(last->val_map, ev.ap.map);
  EXPECT_EQ(last->val_acc, ev.verdict_accuracy());
}

TEST(Train, RejectsMismatchedInput) {
  TrainConfig cfg = tiny_config(64);
  EXPECT_THROW(train(cfg, {}, {}, initial_state(cfg)), InputError);
  EXPECT_THROW(train(cfg, samples(Section::kHeart, 1, 64, 1), {}, initial_state(cfg)), InputError);
}

TEST(Checkpoint, CorruptFileIsAnIoError) {
  const auto path = std::filesystem::temp_directory_path() / "sonoqa_test_corrupt_ck.json";
  write_text(path, "{\"format\": \"sonoqa-checkpoint\"");
  EXPECT_THROW(load_train_checkpoint(path), IoError);
  EXPECT_THROW(load_train_checkpoint(path.string() + ".missing"), IoError);
  std::filesystem::remove(path);
}
