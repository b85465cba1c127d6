#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "pvae/error.hpp"
#include "pvae/tensor.hpp"
#include "test_util.hpp"

using namespace pvae;
using pvae::testing::gradient_error;
using pvae::testing::random_param;
using pvae::testing::random_tensor;
using pvae::testing::values;

namespace {

// Direct cross-correlation with stride 2 and zero padding 1.
std::vector<double> naive_conv(const Tensor& x, const Tensor& k) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = k.dim(0);
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<double> out(co * oh * ow, 0.0);
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double s = 0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t ky = 0; ky < 4; ++ky)
            for (std::size_t kx = 0; kx < 4; ++kx) {
              const long iy = static_cast<long>(2 * oy + ky) - 1, ix = static_cast<long>(2 * ox + kx) - 1;
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              s += x.at((c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) *
                   k.at(((o * ci + c) * 4 + ky) * 4 + kx);
            }
        out[(o * oh + oy) * ow + ox] = s;
      }
  return out;
}

}  // namespace

TEST(Tensor, ConstructionAndAccessors) {
  Tensor t(Shape{2, 3}, 1.5);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_FALSE(t.requires_grad());
  EXPECT_DOUBLE_EQ(t.at(4), 1.5);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(t.item(), ShapeError);
  EXPECT_DOUBLE_EQ(Tensor::scalar(3.0).item(), 3.0);
}

TEST(Tensor, ElementwiseShapeMismatchThrows) {
  Tensor a(Shape{2, 3}), b(Shape{3, 2});
  EXPECT_THROW(add(a, b), ShapeError);
  EXPECT_THROW(mul(a, b), ShapeError);
  EXPECT_THROW(matmul(a, a), ShapeError);
}

TEST(Tensor, NonFiniteResultsThrow) {
  Tensor z(Shape{1}, 0.0);
  EXPECT_THROW(log(z), NumericError);
  Tensor big(Shape{1}, 1000.0);
  EXPECT_THROW(exp(big), NumericError);
  Tensor nan(Shape{1}, std::numeric_limits<double>::quiet_NaN());
  EXPECT_THROW(add(nan, nan), NumericError);
}

TEST(Tensor, BackwardRequiresScalar) {
  std::mt19937_64 rng(1);
  Tensor p = random_param({2, 2}, rng);
  EXPECT_THROW(backward(scale(p, 2.0)), ShapeError);
}

TEST(Tensor, GradientsAccumulateUntilZeroed) {
  Tensor p = Tensor::parameter({2}, {1.0, 2.0});
  backward(sum(square(p)));
  backward(sum(square(p)));
  EXPECT_DOUBLE_EQ(p.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(p.grad()[1], 8.0);
  p.zero_grad();
  EXPECT_TRUE(p.grad().empty());
}

TEST(Tensor, SharedSubexpressionGradient) {
  // y = x * x + x, both uses of x accumulate.
  Tensor x = Tensor::parameter({1}, {3.0});
  backward(sum(x * x + x));
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Tensor, MatmulMatchesNaiveProduct) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng() % 6, k = 1 + rng() % 6, n = 1 + rng() % 6;
    Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t t = 0; t < k; ++t) s += a.at(i * k + t) * b.at(t * n + j);
        EXPECT_NEAR(c.at(i * n + j), s, 1e-12);
      }
  }
}

TEST(Tensor, Conv2dMatchesDirectConvolution) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({3, 8, 6}, rng), k = random_tensor({2, 3, 4, 4}, rng);
  Tensor y = conv2d(x, k);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 3}));
  const auto want = naive_conv(x, k);
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.at(i), want[i], 1e-12);
}

TEST(Tensor, BatchedConvMatchesPerSample) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({2, 1, 4, 4}, rng), k = random_tensor({3, 1, 4, 4}, rng);
  Tensor y = conv2d(x, k);
  ASSERT_EQ(y.shape(), (Shape{2, 3, 2, 2}));
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> xb(x.data().begin() + static_cast<long>(b * 16), x.data().begin() + static_cast<long>((b + 1) * 16));
    const auto want = naive_conv(Tensor(Shape{1, 4, 4}, xb), k);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(y.at(b * 12 + i), want[i], 1e-12);
  }
}

// Property: conv2d_transposed is the adjoint of conv2d for any shapes.
TEST(Tensor, ConvTransposedIsAdjoint) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t b = 1 + rng() % 3, ci = 1 + rng() % 3, co = 1 + rng() % 3;
    const std::size_t h = 2 * (1 + rng() % 4), w = 2 * (1 + rng() % 4);
    Tensor x = random_tensor({b, ci, h, w}, rng), k = random_tensor({co, ci, 4, 4}, rng);
    Tensor y = random_tensor({b, co, h / 2, w / 2}, rng);
    Tensor cx = conv2d(x, k), ty = conv2d_transposed(y, k);
    ASSERT_EQ(ty.shape(), x.shape());
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < cx.size(); ++i) lhs += cx.at(i) * y.at(i);
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.at(i) * ty.at(i);
    EXPECT_NEAR(lhs, rhs, 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST(Tensor, ConvRejectsOddSizes) {
  EXPECT_THROW(conv2d(Tensor(Shape{1, 5, 4}), Tensor(Shape{1, 1, 4, 4})), ShapeError);
  EXPECT_THROW(conv2d(Tensor(Shape{2, 4, 4}), Tensor(Shape{1, 1, 4, 4})), ShapeError);
}

TEST(Tensor, LstmStepMatchesHandComputation) {
  std::mt19937_64 rng(6);
  const std::size_t din = 3, hd = 2, b = 2;
  LstmParams p{random_tensor({din + hd, 4 * hd}, rng), random_tensor({4 * hd}, rng)};
  Tensor x = random_tensor({b, din}, rng);
  LstmState s{random_tensor({b, hd}, rng), random_tensor({b, hd}, rng)};
  LstmState next = lstm_step(x, s, p);
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  for (std::size_t r = 0; r < b; ++r) {
    std::vector<double> in;
    for (std::size_t i = 0; i < din; ++i) in.push_back(x.at(r * din + i));
    for (std::size_t i = 0; i < hd; ++i) in.push_back(s.h.at(r * hd + i));
    std::vector<double> z(4 * hd);
    for (std::size_t j = 0; j < 4 * hd; ++j) {
      z[j] = p.bias.at(j);
      for (std::size_t i = 0; i < din + hd; ++i) z[j] += in[i] * p.weight.at(i * 4 * hd + j);
    }
    for (std::size_t j = 0; j < hd; ++j) {
      const double ig = sig(z[j]), fg = sig(z[hd + j]), gg = std::tanh(z[2 * hd + j]), og = sig(z[3 * hd + j]);
      const double c = fg * s.c.at(r * hd + j) + ig * gg;
      EXPECT_NEAR(next.c.at(r * hd + j), c, 1e-12);
      EXPECT_NEAR(next.h.at(r * hd + j), og * std::tanh(c), 1e-12);
    }
  }
}

TEST(Tensor, LstmAcceptsVectorInput) {
  std::mt19937_64 rng(7);
  LstmParams p{random_tensor({5, 8}, rng), random_tensor({8}, rng)};
  LstmState s{Tensor(Shape{1, 2}), Tensor(Shape{1, 2})};
  LstmState a = lstm_step(random_tensor({3}, rng), s, p);
  EXPECT_EQ(a.h.shape(), (Shape{1, 2}));
}

// Property: every differentiable op matches central differences on random
// inputs of random shapes.
TEST(TensorGradients, ElementwiseAndReductions) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t r = 1 + rng() % 3, c = 1 + rng() % 4;
    Tensor a = random_param({r, c}, rng), b = random_param({r, c}, rng);
    Tensor pos = random_param({r, c}, rng, 0.5, 2.0);
    EXPECT_LT(gradient_error([&] { return sum(a * b - a + scale(b, 0.3)); }, {a, b}), 1e-6);
    EXPECT_LT(gradient_error([&] { return mean(exp(a) + tanh(b)); }, {a, b}), 1e-6);
    EXPECT_LT(gradient_error([&] { return sum(log(pos) + sigmoid(a) + softplus(b)); }, {pos, a, b}), 1e-6);
    EXPECT_LT(gradient_error([&] { return sum(square(sum_last(a * b))); }, {a, b}), 1e-6);
    EXPECT_LT(gradient_error([&] { return sum(add_scalar(square(a), 2.0)); }, {a}), 1e-6);
  }
}

TEST(TensorGradients, Relu) {
  // Values kept away from the kink.
  Tensor a = Tensor::parameter({4}, {-1.0, -0.3, 0.4, 2.0});
  EXPECT_LT(gradient_error([&] { return sum(square(relu(a))); }, {a}), 1e-6);
}

TEST(TensorGradients, Structural) {
  std::mt19937_64 rng(9);
  Tensor a = random_param({3, 2}, rng), b = random_param({3, 4}, rng), bias = random_param({4}, rng);
  Tensor r = random_param({2, 2}, rng);
  EXPECT_LT(gradient_error([&] { return sum(square(concat(a, b))); }, {a, b}), 1e-6);
  EXPECT_LT(gradient_error([&] { return sum(square(add_bias(b, bias))); }, {b, bias}), 1e-6);
  EXPECT_LT(gradient_error([&] { return sum(square(slice_last(b, 1, 3))); }, {b}), 1e-6);
  EXPECT_LT(gradient_error(
                [&] {
                  std::vector<Tensor> parts{a, r};
                  return sum(square(concat_rows(parts)));
                },
                {a, r}),
            1e-6);
  EXPECT_LT(gradient_error([&] { return sum(square(reshape(b, Shape{2, 6}))); }, {b}), 1e-6);
}

TEST(TensorGradients, MatmulAndConv) {
  std::mt19937_64 rng(10);
  Tensor a = random_param({2, 3}, rng), b = random_param({3, 2}, rng);
  EXPECT_LT(gradient_error([&] { return sum(square(matmul(a, b))); }, {a, b}), 1e-6);
  Tensor x = random_param({2, 2, 4, 4}, rng), k = random_param({3, 2, 4, 4}, rng), cb = random_param({3}, rng);
  EXPECT_LT(gradient_error([&] { return sum(square(add_channel_bias(conv2d(x, k), cb))); }, {x, k, cb}), 1e-6);
  Tensor y = random_param({2, 3, 2, 2}, rng);
  EXPECT_LT(gradient_error([&] { return sum(square(conv2d_transposed(y, k))); }, {y, k}), 1e-6);
}

TEST(TensorGradients, LstmUnrolled) {
  std::mt19937_64 rng(11);
  LstmParams p{random_param({3 + 2, 8}, rng, -0.5, 0.5), random_param({8}, rng, -0.5, 0.5)};
  Tensor x0 = random_param({2, 3}, rng), x1 = random_param({2, 3}, rng);
  auto f = [&] {
    LstmState s{Tensor(Shape{2, 2}), Tensor(Shape{2, 2})};
    s = lstm_step(x0, s, p);
    s = lstm_step(x1, s, p);
    return sum(square(s.h) + s.c);
  };
  EXPECT_LT(gradient_error(f, {p.weight, p.bias, x0, x1}), 1e-6);
}

TEST(Tensor, ForwardIsDeterministic) {
  std::mt19937_64 rng(12);
  Tensor x = random_tensor({2, 1, 8, 8}, rng), k = random_tensor({4, 1, 4, 4}, rng);
  EXPECT_EQ(values(conv2d(x, k)), values(conv2d(x, k)));
}

TEST(Tensor, InteriorGraphReleasedAfterBackward) {
  Tensor p = Tensor::parameter({2}, {1.0, 2.0});
  Tensor mid = square(p);
  Tensor loss = sum(mid);
  backward(loss);
  EXPECT_TRUE(loss.node()->inputs.empty());
  EXPECT_TRUE(mid.node()->inputs.empty());
  EXPECT_FALSE(p.grad().empty());
}

TEST(Tensor, MutableDataOnlyOnLeaves) {
  Tensor p = Tensor::parameter({2}, {1.0, 2.0});
  Tensor mid = square(p);
  EXPECT_THROW(mid.mutable_data(), ShapeError);
  EXPECT_NO_THROW(p.mutable_data());
}

TEST(Tensor, DetachCutsGraph) {
  Tensor p = Tensor::parameter({1}, {2.0});
  Tensor d = square(p).detach();
  EXPECT_FALSE(d.requires_grad());
  EXPECT_DOUBLE_EQ(d.item(), 4.0);
}
