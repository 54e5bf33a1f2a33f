#include <gtest/gtest.h>

#include <cmath>

#include "sonoqa/autograd.hpp"
#include "sonoqa/random.hpp"

using namespace sonoqa;

namespace {

// Direct nested-loop convolution with zero padding.
Tensor<double> conv_direct(const Tensor<double>& x, const Tensor<double>& k, const Tensor<double>& b, std::size_t stride,
                           std::size_t pad) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = k.dim(0), ks = k.dim(2);
  const std::size_t oh = (h + 2 * pad - ks) / stride + 1, ow = (w + 2 * pad - ks) / stride + 1;
  Tensor<double> y({co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = b[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < ks; ++ky)
            for (std::size_t kx = 0; kx < ks; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += k[((o * ci + c) * ks + ky) * ks + kx] * x.at(c, iy, ix);
            }
        y.at(o, oy, ox) = acc;
      }
  return y;
}

Tensor<double> randn(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  for (auto& v : t.values()) v = rng.normal();
  return t;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor<double> t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  t.at(1, 2, 3) = 5.0;
  EXPECT_EQ(t[23], 5.0);
  EXPECT_THROW(Tensor<double>({2, 2}, std::vector<double>(3)), DimensionError);
  EXPECT_THROW(t.reshaped({5, 5}), DimensionError);
}

TEST(Conv2d, OneByOneIdentityKernel) {
  Tape<double> tape;
  Rng rng(1);
  const auto x = randn({1, 5, 6}, rng);
  const auto y = ag::conv2d(tape.constant(x), tape.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                            tape.constant(Tensor<double>({1})), 1, 0);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, HandComputedDiagonalKernel) {
  Tape<double> tape;
  const auto x = tape.constant(Tensor<double>({1, 2, 2}, {1, 2, 3, 4}));
  const auto k = tape.constant(Tensor<double>({1, 1, 2, 2}, {1, 0, 0, 1}));
  const auto y = ag::conv2d(x, k, tape.constant(Tensor<double>({1})), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 1}));
  EXPECT_EQ(y.value()[0], 5.0);
}

TEST(Conv2d, ZeroKernelGivesBias) {
  Tape<double> tape;
  Rng rng(2);
  const auto y = ag::conv2d(tape.constant(randn({3, 8, 8}, rng)), tape.constant(Tensor<double>({2, 3, 3, 3})),
                            tape.constant(Tensor<double>::vector({0.25, -1.5})), 2, 1);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(y.value()[i], 0.25);
  for (std::size_t i = 16; i < 32; ++i) EXPECT_EQ(y.value()[i], -1.5);
}

TEST(Conv2d, MatchesDirectLoopsOnRandomShapes) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t ci = 1 + rng.below(3), co = 1 + rng.below(4), ks = 1 + 2 * rng.below(2);
    const std::size_t h = ks + rng.below(6), w = ks + rng.below(6), stride = 1 + rng.below(2), pad = rng.below(2);
    const auto x = randn({ci, h, w}, rng), k = randn({co, ci, ks, ks}, rng), b = randn({co}, rng);
    Tape<double> tape;
    const auto y = ag::conv2d(tape.constant(x), tape.constant(k), tape.constant(b), stride, pad).value();
    const auto ref = conv_direct(x, k, b, stride, pad);
    ASSERT_EQ(y.shape(), ref.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-12);
  }
}

TEST(Conv2d, RejectsMismatchedChannels) {
  Tape<double> tape;
  EXPECT_THROW(ag::conv2d(tape.constant(Tensor<double>({2, 4, 4})), tape.constant(Tensor<double>({1, 3, 3, 3})),
                          tape.constant(Tensor<double>({1})), 1, 1),
               DimensionError);
}

TEST(Elementwise, Relu) {
  Tape<double> tape;
  const auto y = ag::relu(tape.constant(Tensor<double>::vector({-1.0, 0.0, 2.5}))).value();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 0.0);
  EXPECT_EQ(y[2], 2.5);
}

TEST(Elementwise, SoftmaxLogExpConcat) {
  Tape<double> tape;
  const auto s = ag::softmax(tape.constant(Tensor<double>::vector({0, 0, 0}))).value();
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(s[i], 1.0 / 3.0, 1e-15);
  const auto l = ag::log(ag::exp(tape.constant(Tensor<double>::scalar(1.7)))).value();
  EXPECT_NEAR(l.item(), 1.7, 1e-12);
  const auto c = ag::concat(std::vector<Var<double>>{tape.constant(Tensor<double>::vector({1, 2})),
                                                     tape.constant(Tensor<double>::vector({3}))})
                     .value();
  EXPECT_EQ(c, Tensor<double>::vector({1, 2, 3}));
}

TEST(Elementwise, NonFiniteIsReported) {
  Tape<double> tape;
  EXPECT_THROW(ag::log(tape.constant(Tensor<double>::scalar(-1.0))), NumericalError);
  EXPECT_THROW(tape.constant(Tensor<double>::scalar(std::nan(""))), NumericalError);
}

TEST(Matmul, MatchesNaiveProduct) {
  Rng rng(4);
  const auto a = randn({3, 5}, rng), b = randn({5, 2}, rng);
  Tape<double> tape;
  const auto c = ag::matmul(tape.constant(a), tape.constant(b)).value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t p = 0; p < 5; ++p) s += a.at(i, p) * b.at(p, j);
      EXPECT_NEAR(c.at(i, j), s, 1e-12);
    }
  EXPECT_THROW(ag::matmul(tape.constant(a), tape.constant(a)), DimensionError);
}
