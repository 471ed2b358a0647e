#include <gtest/gtest.h>

#include <cmath>

#include "siban/nn.hpp"

using namespace siban;

namespace {

ParamStore<double> scalar_store(double value) {
  ParamStore<double> s;
  s.add("p", Tensor<double>(Shape{1}, {value}));
  return s;
}

void set_grad(ParamStore<double>& s, double g) {
  for (auto& e : s.entries()) {
    auto& grad = e.value.mutable_grad();
    std::fill(grad.begin(), grad.end(), g);
  }
}

}  // namespace

TEST(ParamStore, NamesAreUnique) {
  ParamStore<float> s;
  s.add("a", Tensor<float>::zeros(Shape{2, 2}));
  EXPECT_THROW(s.add("a", Tensor<float>::zeros(Shape{1})), std::invalid_argument);
  EXPECT_TRUE(s.get("a").requires_grad());
  EXPECT_THROW(s.get("b"), std::out_of_range);
  EXPECT_EQ(s.entries()[0].velocity.size(), 4u);
  EXPECT_EQ(s.entries()[0].moment2.size(), 4u);
}

TEST(ConvLayer, OneByOneIdentity) {
  ParamStore<float> s;
  std::vector<float> w(9, 0.0f);
  for (int c = 0; c < 3; ++c) w[c * 3 + c] = 1.0f;
  s.add("l.weight", Tensor<float>(Shape{3, 3, 1, 1}, w));
  s.add("l.bias", Tensor<float>::zeros(Shape{3}));
  RngStream rng(1);
  auto x = rng_fill<float>(rng, Shape{1, 3, 4, 4}, StandardNormal{});
  Tape<float> tape;
  auto y = conv_layer_forward(tape, s, "l", x, 1, 0);
  EXPECT_EQ(y.data(), x.data());
}

TEST(ConvLayer, AllOnesKernelCountsNeighbours) {
  ParamStore<float> s;
  s.add("l.weight", Tensor<float>::full(Shape{1, 1, 3, 3}, 1.0f));
  s.add("l.bias", Tensor<float>::zeros(Shape{1}));
  Tape<float> tape;
  auto y = conv_layer_forward(tape, s, "l", Tensor<float>::full(Shape{1, 1, 5, 6}, 1.0f), 1, 0);
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 4}));
  for (float v : y.data()) EXPECT_EQ(v, 9.0f);
}

TEST(ConvLayer, OutputSizeFormulaAndNestedLoops) {
  RngStream rng(4);
  ParamStore<double> s;
  add_conv_params(s, "l", 2, 3, 3, rng);
  s.get("l.bias") = rng_fill<double>(rng, Shape{3}, Uniform{-1, 1});
  auto x = rng_fill<double>(rng, Shape{1, 2, 7, 5}, Uniform{-1, 1});
  Tape<double> tape;
  auto y = conv_layer_forward(tape, s, "l", x, 2, 1);
  const std::size_t Ho = (7 + 2 - 3) / 2 + 1, Wo = (5 + 2 - 3) / 2 + 1;
  ASSERT_EQ(y.shape(), (Shape{1, 3, Ho, Wo}));
  const auto& w = s.get("l.weight").data();
  const auto& b = s.get("l.bias").data();
  for (std::size_t o = 0; o < 3; ++o)
    for (std::size_t i = 0; i < Ho; ++i)
      for (std::size_t j = 0; j < Wo; ++j) {
        double acc = b[o];
        for (std::size_t c = 0; c < 2; ++c)
          for (int p = 0; p < 3; ++p)
            for (int q = 0; q < 3; ++q) {
              const int yy = static_cast<int>(2 * i) + p - 1, xx = static_cast<int>(2 * j) + q - 1;
              if (yy < 0 || xx < 0 || yy >= 7 || xx >= 5) continue;
              acc += x[(c * 7 + yy) * 5 + xx] * w[((o * 2 + c) * 3 + p) * 3 + q];
            }
        EXPECT_NEAR(y[(o * Ho + i) * Wo + j], acc, 1e-6);
      }
}

TEST(ConvLayer, ChannelMismatch) {
  RngStream rng(4);
  ParamStore<float> s;
  add_conv_params(s, "l", 2, 3, 3, rng);
  Tape<float> tape;
  EXPECT_THROW(conv_layer_forward(tape, s, "l", Tensor<float>::zeros(Shape{1, 3, 4, 4}), 1, 1), ShapeError);
}

TEST(ConvLayer, InitialisationBounds) {
  RngStream rng(9);
  ParamStore<float> s;
  add_conv_params(s, "l", 4, 8, 3, rng);
  const double b = std::sqrt(1.0 / 36.0);
  for (float v : s.get("l.weight").data()) EXPECT_LE(std::abs(v), b);
  for (float v : s.get("l.bias").data()) EXPECT_EQ(v, 0.0f);
}

TEST(Sgd, ZeroGradientNoDecayIsNoOp) {
  auto s = scalar_store(0.7);
  set_grad(s, 0.0);
  sgd_momentum_step(s, 0.1, {0.9, 0.0});
  EXPECT_EQ(s.get("p")[0], 0.7);
}

TEST(Sgd, WeightDecayOnly) {
  auto s = scalar_store(1.0);
  set_grad(s, 0.0);
  sgd_momentum_step(s, 1.0, {0.9, 5e-4});
  EXPECT_DOUBLE_EQ(s.get("p")[0], 0.9995);
}

TEST(Sgd, TwoStepMomentumUnroll) {
  const double g = 0.3, lr = 0.01;
  auto s = scalar_store(2.0);
  for (int i = 0; i < 2; ++i) {
    set_grad(s, g);
    sgd_momentum_step(s, lr, {0.9, 0.0});
  }
  EXPECT_NEAR(s.get("p")[0] - 2.0, -lr * (g + 1.9 * g), 1e-15);
}

TEST(Sgd, MissingGradientAndClearing) {
  auto s = scalar_store(1.0);
  EXPECT_THROW(sgd_momentum_step(s, 0.1), std::logic_error);
  set_grad(s, 1.0);
  sgd_momentum_step(s, 0.1);
  EXPECT_FALSE(s.get("p").has_grad());
}

TEST(Adam, ZeroGradientNoDecayIsNoOp) {
  auto s = scalar_store(-0.4);
  for (int i = 0; i < 3; ++i) {
    set_grad(s, 0.0);
    adam_step(s, 1e-2, {0.9, 0.99, 1e-8, 0.0});
  }
  EXPECT_EQ(s.get("p")[0], -0.4);
  EXPECT_EQ(s.adam_steps(), 3u);
}

TEST(Adam, FirstStepMovesBySignTimesLr) {
  for (double g : {3.5, -0.02}) {
    auto s = scalar_store(1.0);
    set_grad(s, g);
    adam_step(s, 1e-3, {0.9, 0.99, 1e-8, 0.0});
    EXPECT_NEAR(s.get("p")[0] - 1.0, -1e-3 * (g > 0 ? 1 : -1), 1e-3 * 1e-6);
  }
}

TEST(Adam, ConstantGradientClosedForm) {
  // With a constant gradient the bias-corrected moments are exactly g and g^2,
  // so every step moves by lr * g / (|g| + eps).
  const double g = 0.25, lr = 2e-3, eps = 1e-8;
  auto s = scalar_store(0.5);
  for (int i = 0; i < 3; ++i) {
    set_grad(s, g);
    adam_step(s, lr, {0.9, 0.99, eps, 0.0});
  }
  EXPECT_NEAR(s.get("p")[0], 0.5 - 3.0 * lr * g / (g + eps), 1e-7);
}

TEST(Adam, MatchesReferenceWithWeightDecay) {
  const long double b1 = 0.9L, b2 = 0.99L, eps = 1e-8L, wd = 5e-4L, lr = 1e-2L;
  long double p = 0.8L, m = 0.0L, v = 0.0L;
  auto s = scalar_store(0.8);
  const double grads[] = {0.5, -0.1, 0.3};
  for (int t = 1; t <= 3; ++t) {
    const long double g = grads[t - 1] + wd * p;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    p -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    set_grad(s, grads[t - 1]);
    adam_step(s, 1e-2, {0.9, 0.99, 1e-8, 5e-4});
  }
  EXPECT_NEAR(s.get("p")[0], static_cast<double>(p), 1e-7);
}

TEST(Optimizers, ZeroLearningRateKeepsValuesAndShapes) {
  RngStream rng(3);
  ParamStore<float> s;
  add_conv_params(s, "a", 2, 3, 3, rng);
  const auto before = s.get("a.weight").data();
  for (auto& e : s.entries()) std::fill(e.value.mutable_grad().begin(), e.value.mutable_grad().end(), 0.5f);
  sgd_momentum_step(s, 0.0);
  for (auto& e : s.entries()) std::fill(e.value.mutable_grad().begin(), e.value.mutable_grad().end(), 0.5f);
  adam_step(s, 0.0);
  EXPECT_EQ(s.get("a.weight").data(), before);
  EXPECT_EQ(s.get("a.weight").shape(), (Shape{3, 2, 3, 3}));
}

TEST(PolyLr, Endpoints) {
  LrSchedule sch{2.5e-4, 1000, 0.9};
  EXPECT_EQ(poly_lr(sch, 0), 2.5e-4);
  EXPECT_EQ(poly_lr(sch, 1000), 0.0);
  EXPECT_THROW(poly_lr(sch, 1001), std::out_of_range);
  EXPECT_THROW(poly_lr(LrSchedule{1.0, 0, 0.9}, 0), std::invalid_argument);
}

TEST(PolyLr, Midpoint) {
  // 0.5^0.9 = exp(-0.9 ln 2) = 0.535886731268146..., so the value is 1.33972e-4.
  EXPECT_NEAR(poly_lr(LrSchedule{2.5e-4, 1000, 0.9}, 500), 2.5e-4 * 0.5358867312681466, 1e-15);
}

TEST(PolyLr, NonIncreasing) {
  LrSchedule sch{1e-2, 777, 0.9};
  double prev = poly_lr(sch, 0);
  for (std::uint64_t i = 1; i <= 777; ++i) {
    const double lr = poly_lr(sch, i);
    EXPECT_LE(lr, prev);
    prev = lr;
  }
}
