#include <gtest/gtest.h>

#include "sonoqa/classifier.hpp"
#include "sonoqa/gradcheck.hpp"
#include "sonoqa/random.hpp"

using namespace sonoqa;

TEST(Backward, SquareHasGradientTwoX) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>::scalar(3.0));
  const auto loss = ag::mul(x, x);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x).item(), 6.0);
}

TEST(Backward, DeadReluPassesNothing) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>::scalar(1.0));
  tape.backward(ag::relu(ag::scale(x, -1.0)));
  EXPECT_EQ(tape.grad(x).item(), 0.0);
}

TEST(Backward, RepeatedCallsGiveSameGradient) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>::vector({1.0, -2.0, 0.5}));
  const auto loss = ag::sum(ag::mul(ag::exp(x), x));
  tape.backward(loss);
  const auto g1 = tape.grad(x);
  tape.backward(loss);
  EXPECT_EQ(tape.grad(x), g1);
}

TEST(Backward, NonScalarLossIsAContractError) {
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>::vector({1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), ContractError);
}

TEST(Backward, FanOutAccumulates) {
  // y = x*x + 3x -> dy/dx = 2x + 3
  Tape<double> tape;
  const auto x = tape.leaf(Tensor<double>::scalar(-1.25));
  tape.backward(ag::add(ag::mul(x, x), ag::scale(x, 3.0)));
  EXPECT_DOUBLE_EQ(tape.grad(x).item(), 0.5);
}

TEST(GradCheck, SumOfSquares) {
  Rng rng(5);
  Tensor<double> x({7});
  for (auto& v : x.values()) v = rng.normal();
  const double err =
      grad_check([](Tape<double>&, const Var<double>& v) { return ag::sum(ag::mul(v, v)); }, x, 1e-5);
  EXPECT_LE(err, 1e-7);
}

TEST(GradCheck, ConstantFunction) {
  const double err = grad_check(
      [](Tape<double>& t, const Var<double>& v) {
        return ag::add(ag::scale(ag::sum(v), 0.0), t.constant(Tensor<double>::scalar(4.0)));
      },
      Tensor<double>::vector({1, 2, 3}), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, ConvCompositeOnRandomInput) {
  Rng rng(6);
  std::vector<Tensor<double>> pts{Tensor<double>({1, 4, 4}), Tensor<double>({2, 1, 3, 3}), Tensor<double>({2})};
  for (auto& p : pts)
    for (auto& v : p.values()) v = rng.normal();
  const auto r = grad_check(
      [](Tape<double>&, const std::vector<Var<double>>& v) {
        const auto y = ag::conv2d(v[0], v[1], v[2], 1, 1);
        return ag::sum(ag::mul(y, y));
      },
      pts, 1e-6);
  EXPECT_LE(r.max_rel_error, 1e-6);
}

TEST(GradCheck, FocalLossWrapper) {
  Rng rng(7);
  Tensor<double> logits({4, 3});
  for (auto& v : logits.values()) v = rng.normal();
  const double err = grad_check(
      [](Tape<double>&, const Var<double>& v) { return ag::sum(ag::focal_multiclass(v, {0, 2, 1, 2}, 2.0)); }, logits,
      1e-6);
  EXPECT_LE(err, 1e-4);
}

TEST(GradCheck, DetectsAWrongBackward) {
  // an op whose recorded derivative is off by a factor of two
  const auto bad = [](Tape<double>& t, const Var<double>& v) {
    Tensor<double> out = v.value();
    for (auto& x : out.values()) x = x * x;
    const auto y = t.record("bad_square", out, {v}, [v](Tape<double>& tp, const std::vector<double>& g) {
      if (double* gx = tp.accum(v))
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * 4.0 * tp.value(v.id())[i];
    });
    return ag::sum(y);
  };
  EXPECT_GT(grad_check(bad, Tensor<double>::vector({0.5, 1.5}), 1e-6), 0.1);
}

TEST(GradCheck, RejectsBadStep) {
  EXPECT_THROW(grad_check([](Tape<double>&, const Var<double>& v) { return ag::sum(v); }, Tensor<double>::scalar(1.0),
                          0.0),
               ConfigError);
}
