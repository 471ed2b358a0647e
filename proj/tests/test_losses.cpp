#include <gtest/gtest.h>

#include <cmath>

#include "siban/losses.hpp"

using namespace siban;

namespace {

Tensor<double> t4(std::vector<double> v, std::size_t c, std::size_t h = 1, std::size_t w = 1, std::size_t b = 1) {
  return Tensor<double>(Shape{b, c, h, w}, std::move(v));
}

double value(const Tensor<double>& t) { return t.item(); }

}  // namespace

TEST(SegmentationLoss, EqualLogitsGiveLogK) {
  Tape<double> tape;
  const std::uint8_t y[] = {1};
  EXPECT_NEAR(value(segmentation_loss(tape, t4({0.3, 0.3}, 2), y)), std::log(2.0), 1e-15);
}

TEST(SegmentationLoss, Saturation) {
  Tape<double> tape;
  const std::uint8_t y[] = {0};
  EXPECT_LE(value(segmentation_loss(tape, t4({10, -10}, 2), y)), 1e-4);
}

TEST(SegmentationLoss, TwoPixelsByHand) {
  // pixel 0: logits (1, 2, 0), label 2; pixel 1: logits (0, 0, 3), label 0.
  const double lse0 = std::log(std::exp(1.0) + std::exp(2.0) + 1.0);
  const double lse1 = std::log(2.0 + std::exp(3.0));
  const double expected = 0.5 * ((lse0 - 0.0) + (lse1 - 0.0));
  Tape<double> tape;
  const std::uint8_t y[] = {2, 0};
  // layout [1,3,1,2]: channel-major
  EXPECT_NEAR(value(segmentation_loss(tape, t4({1, 0, 2, 0, 0, 3}, 3, 1, 2), y)), expected, 1e-14);
}

TEST(SegmentationLoss, IgnoredPixelsDoNotContribute) {
  Tape<double> tape;
  const std::uint8_t with_ignore[] = {0, kIgnoreLabel};
  const std::uint8_t single[] = {0};
  const double a = value(segmentation_loss(tape, t4({2, 5, -1, 7}, 2, 1, 2), with_ignore));
  const double b = value(segmentation_loss(tape, t4({2, -1}, 2), single));
  EXPECT_NEAR(a, b, 1e-15);
  const std::uint8_t all_ignored[] = {kIgnoreLabel, kIgnoreLabel};
  EXPECT_THROW(segmentation_loss(tape, t4({2, 5, -1, 7}, 2, 1, 2), all_ignored), std::invalid_argument);
  const std::uint8_t bad[] = {3};
  EXPECT_THROW(segmentation_loss(tape, t4({0, 0}, 2), bad), std::invalid_argument);
}

TEST(DiscriminatorLoss, ClosedForms) {
  Tape<double> tape;
  auto zeros = Tensor<double>::zeros(Shape{2, 1, 3, 3});
  EXPECT_NEAR(value(discriminator_loss(tape, zeros, zeros)), 2.0 * std::log(2.0), 1e-15);
  auto l3 = Tensor<double>::full(Shape{1, 1, 2, 2}, std::log(3.0));
  EXPECT_NEAR(value(discriminator_loss(tape, l3, l3)), -std::log(0.75) - std::log(0.25), 1e-14);
  EXPECT_NEAR(value(discriminator_loss(tape, l3, l3)), 1.673976, 1e-6);
  auto pos = Tensor<double>::full(Shape{1, 1, 2, 2}, 40.0);
  auto neg = Tensor<double>::full(Shape{1, 1, 2, 2}, -40.0);
  EXPECT_LE(value(discriminator_loss(tape, pos, neg)), 1e-16);
}

TEST(DiscriminatorLoss, SwappedLabelsEqualNegatedLogits) {
  RngStream rng(3);
  auto a = rng_fill<double>(rng, Shape{2, 1, 3, 3}, Uniform{-4, 4});
  auto b = rng_fill<double>(rng, Shape{2, 1, 3, 3}, Uniform{-4, 4});
  Tape<double> tape;
  // Swapping domains: b is now "source", a "target". Negating both logits
  // and keeping the order gives the same value.
  const double swapped = value(discriminator_loss(tape, b, a));
  const double negated = value(discriminator_loss(tape, scale(tape, a, -1.0), scale(tape, b, -1.0)));
  EXPECT_NEAR(swapped, negated, 1e-14);
}

TEST(GeneratorAdversarialLoss, ClosedForms) {
  Tape<double> tape;
  EXPECT_NEAR(value(generator_adversarial_loss(tape, Tensor<double>::zeros(Shape{1, 1, 2, 2}))), std::log(2.0), 1e-15);
  EXPECT_NEAR(value(generator_adversarial_loss(tape, Tensor<double>::full(Shape{1, 1, 1, 1}, -std::log(3.0)))),
              2.0 * std::log(2.0), 1e-15);
  EXPECT_LE(value(generator_adversarial_loss(tape, Tensor<double>::full(Shape{1, 1, 1, 1}, 50.0))), 1e-20);
}

TEST(GaussianKl, ClosedFormValues) {
  Tape<double> tape;
  GaussianLatent<double> lat{t4({0, 1, 0}, 3), t4({0, 0, std::log(4.0)}, 3)};
  auto kl = gaussian_kl_per_channel(tape, lat);
  EXPECT_EQ(kl[0], 0.0);
  EXPECT_EQ(kl[1], 0.5);
  EXPECT_NEAR(kl[2], 0.5 * (4.0 - std::log(4.0) - 1.0), 1e-15);
  EXPECT_NEAR(kl[2], 0.806853, 1e-6);
}

TEST(GaussianKl, NonNegativeAndZeroOnlyAtPrior) {
  RngStream rng(21);
  auto mu = rng_fill<float>(rng, Shape{1, 8, 16, 16}, Uniform{-1e-3, 1e-3});
  auto lv = rng_fill<float>(rng, Shape{1, 8, 16, 16}, Uniform{-1e-3, 1e-3});
  Tape<float> tape;
  auto kl = gaussian_kl_per_channel(tape, GaussianLatent<float>{mu, lv});
  for (std::size_t i = 0; i < kl.size(); ++i) {
    EXPECT_GE(kl[i], 0.0f);
    if (mu[i] != 0.0f || lv[i] != 0.0f) EXPECT_GT(kl[i], 0.0f);
  }
}

TEST(GaussianKl, MatchesMonteCarloEstimate) {
  // E_q[log q(z) - log p(z)] from 10^6 draws, within 3 standard errors.
  RngStream pairs(99);
  for (int trial = 0; trial < 20; ++trial) {
    const double mu = -2.0 + 4.0 * pairs.next_double();
    const double lv = -3.0 + 5.0 * pairs.next_double();
    Tape<double> tape;
    const double closed = gaussian_kl_per_channel(tape, GaussianLatent<double>{t4({mu}, 1), t4({lv}, 1)})[0];
    RngStream draws = pairs.fork(static_cast<std::uint64_t>(trial));
    auto eps = rng_fill<double>(draws, Shape{1000000}, StandardNormal{});
    const double sigma = std::exp(0.5 * lv);
    double s = 0.0, s2 = 0.0;
    for (double e : eps.data()) {
      const double z = mu + sigma * e;
      const double log_ratio = -0.5 * e * e - 0.5 * lv + 0.5 * z * z;
      s += log_ratio;
      s2 += log_ratio * log_ratio;
    }
    const double n = static_cast<double>(eps.size());
    const double mean = s / n;
    const double se = std::sqrt((s2 / n - mean * mean) / (n - 1.0));
    EXPECT_LE(std::abs(mean - closed), 3.0 * se) << "mu " << mu << " logvar " << lv;
  }
}

TEST(InformationConstraint, PlainBottleneckIsKlSumMinusCapacity) {
  Tape<double> tape;
  // Every pixel has channel sum 3.
  auto kl = Tensor<double>(Shape{2, 3, 1, 2}, {1, 2, 0.5, 1, 1.5, 0, 2, 0, 0.25, 2.5, 0.75, 0.5});
  EXPECT_NEAR(value(information_constraint_loss<double>(tape, kl, std::nullopt, 10.0)), 3.0 - 10.0, 1e-14);
}

TEST(InformationConstraint, WeightedByOneMinusSignificance) {
  Tape<double> tape;
  auto kl = t4({1.5, 0.5}, 2);
  SignificanceMap<double> v{t4({0.5, 0.0}, 2)};
  EXPECT_NEAR(value(information_constraint_loss<double>(tape, kl, v, 2.0)), -0.25, 1e-15);
  SignificanceMap<double> ones{t4({1.0, 1.0}, 2)};
  EXPECT_EQ(value(information_constraint_loss<double>(tape, kl, ones, 2.0)), 0.0);
  EXPECT_THROW(information_constraint_loss<double>(tape, kl, SignificanceMap<double>{t4({1, 1, 1}, 3)}, 2.0),
               ShapeError);
  EXPECT_THROW(information_constraint_loss<double>(tape, kl, std::nullopt, -1.0), std::invalid_argument);
}

TEST(InformationConstraint, AffineInCapacity) {
  RngStream rng(5);
  auto kl = rng_fill<double>(rng, Shape{2, 4, 3, 3}, Uniform{0, 2});
  SignificanceMap<double> v{rng_fill<double>(rng, Shape{2, 4, 3, 3}, Uniform{0.1, 0.9})};
  double weight = 0.0;
  for (double x : v.v.data()) weight += 1.0 - x;
  const double slope = -weight / 18.0 / 4.0;
  Tape<double> tape;
  const double l0 = value(information_constraint_loss<double>(tape, kl, v, 3.0));
  const double l1 = value(information_constraint_loss<double>(tape, kl, v, 5.0));
  const double l2 = value(information_constraint_loss<double>(tape, kl, v, 9.0));
  EXPECT_NEAR((l1 - l0) / 2.0, slope, 1e-12);
  EXPECT_NEAR((l2 - l1) / 4.0, slope, 1e-12);
}

TEST(InformationConstraint, NoGradientReachesTheSignificanceLayer) {
  RngStream rng(17);
  ModelConfig cfg;
  cfg.trunk = {{4, 3, 2, 1}, {6, 3, 2, 1}, {8, 3, 2, 1}};
  cfg.latent_channels = 6;
  cfg.num_classes = 3;
  auto model = make_model<double>(cfg, rng);
  for (auto& e : model.generator.entries())
    if (e.name.rfind("SA.", 0) == 0) e.value.mutable_data() = rng_fill<double>(rng, e.value.shape(), Uniform{-1, 1}).data();
  auto x = rng_fill<double>(rng, Shape{2, 3, 16, 16}, Uniform{0, 1});
  RngStream noise(3);
  Tape<double> tape;
  auto enc = encode(tape, model, Mode::kSiban, x, &noise);
  auto kl = gaussian_kl_per_channel(tape, enc.latent);
  tape.backward(information_constraint_loss(tape, kl, enc.significance, 10.0));
  bool trunk_moved = false;
  for (const auto& e : model.generator.entries()) {
    if (e.name.rfind("SA.", 0) == 0) {
      for (double g : e.value.grad()) EXPECT_EQ(g, 0.0) << e.name;
    } else if (e.name.rfind("F.", 0) == 0) {
      for (double g : e.value.grad()) trunk_moved |= g != 0.0;
    }
  }
  EXPECT_TRUE(trunk_moved);
}

TEST(OverallLoss, Combinations) {
  Tape<double> tape;
  auto s = Tensor<double>::scalar(1.0);
  EXPECT_EQ(value(overall_generator_loss<double>(tape, s, Tensor<double>::scalar(5.0), std::nullopt, std::nullopt,
                                                 0.0, 0.0, 0.0)),
            1.0);
  auto z = Tensor<double>::scalar(0.0);
  EXPECT_EQ(value(overall_generator_loss<double>(tape, z, z, z, z, 1.0, 1.0, 1.0)), 0.0);
  const double total = value(overall_generator_loss<double>(tape, s, Tensor<double>::scalar(2.0),
                                                            Tensor<double>::scalar(-0.25), Tensor<double>::scalar(0.5),
                                                            1e-3, 0.1, 0.1));
  EXPECT_NEAR(total, 1.027, 1e-15);
  EXPECT_THROW(overall_generator_loss<double>(tape, s, std::nullopt, std::nullopt, std::nullopt, 0.0, -1.0, 0.0),
               std::invalid_argument);
}

TEST(OverallLoss, LinearInMultipliers) {
  Tape<double> tape;
  auto s = Tensor<double>::scalar(0.7), a = Tensor<double>::scalar(1.3);
  auto is = Tensor<double>::scalar(-0.4), it = Tensor<double>::scalar(2.5);
  auto f = [&](double bs, double bt) { return value(overall_generator_loss<double>(tape, s, a, is, it, 0.01, bs, bt)); };
  EXPECT_NEAR((f(0.3, 0.2) - f(0.1, 0.2)) / 0.2, -0.4, 1e-12);
  EXPECT_NEAR((f(0.1, 0.6) - f(0.1, 0.2)) / 0.4, 2.5, 1e-12);
}

TEST(OverallLoss, MultipliersReceiveNoGradient) {
  Tensor<double> seg(Shape{1}, {1.0}, true), ic(Shape{1}, {2.0}, true);
  Tape<double> tape;
  tape.backward(overall_generator_loss<double>(tape, seg, std::nullopt, ic, std::nullopt, 0.0, 0.3, 0.0));
  EXPECT_EQ(seg.grad()[0], 1.0);
  EXPECT_NEAR(ic.grad()[0], 0.3, 1e-16);
}
