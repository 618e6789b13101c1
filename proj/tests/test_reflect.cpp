#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "hyperfusion/reflect.hpp"
#include "test_support.hpp"

using namespace hyperfusion;
using hftest::random_tensor;

namespace {

SepParams gray_mean(double v, double k = 1.0) { return {k, Tensor({3}, v)}; }

}  // namespace

TEST(Separate, SinglePixelUnitScale) {
  auto pair = separate(Tensor({1, 1, 3}, 0.7), gray_mean(0.5));
  for (std::size_t c = 0; c < 3; ++c) {
    EXPECT_NEAR(pair.transmitted[c], 0.2, 1e-15);
    EXPECT_NEAR(pair.reflected[c], -0.2, 1e-15);
  }
}

TEST(Separate, ScaleTwo) {
  auto pair = separate(Tensor({1, 1, 3}, 0.6), gray_mean(0.5, 2.0));
  EXPECT_NEAR(pair.transmitted[0], 0.1, 1e-15);
  EXPECT_NEAR(pair.reflected[0], -0.2, 1e-15);
}

TEST(Separate, ImageEqualToMeanGivesZeroPair) {
  std::mt19937_64 rng(1);
  Tensor img = random_tensor({4, 5, 3}, rng, 0.0, 1.0);
  auto pair = separate(img, {1.0, img.clone()});
  for (std::size_t i = 0; i < img.numel(); ++i) {
    EXPECT_EQ(pair.transmitted[i], 0.0);
    EXPECT_EQ(pair.reflected[i], 0.0);
  }
}

TEST(Separate, UnitScalePairCancelsExactly) {
  std::mt19937_64 rng(2);
  Tensor img = random_tensor({8, 8, 3}, rng, 0.0, 1.0);
  auto pair = separate(img, {1.0, random_tensor({3}, rng, 0.0, 1.0)});
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(pair.transmitted[i] + pair.reflected[i], 0.0);
}

TEST(Separate, InversionRecoversGridInput) {
  std::mt19937_64 rng(3);
  Tensor img = random_tensor({6, 7, 3}, rng, 0.0, 1.0);
  Tensor mean = random_tensor({3}, rng, 0.0, 1.0);
  for (double& v : img.values()) v = to_grid(v);
  for (double& v : mean.values()) v = to_grid(v);
  auto pair = separate(img, {1.0, mean});
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(pair.transmitted[i] + mean[i % 3], img[i]);
}

TEST(Separate, ReflectedIsScaledTransmitted) {
  std::mt19937_64 rng(4);
  Tensor img = random_tensor({5, 5, 3}, rng, 0.0, 1.0);
  for (double k : {0.5, 1.0, 3.0}) {
    auto pair = separate(img, gray_mean(0.4, k));
    for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(pair.reflected[i], -k * pair.transmitted[i]);
  }
}

TEST(Separate, FullMeanImage) {
  std::mt19937_64 rng(5);
  Tensor img = random_tensor({3, 4, 3}, rng, 0.0, 1.0);
  Tensor mean = random_tensor({3, 4, 3}, rng, 0.0, 1.0);
  auto pair = separate(img, {1.0, mean});
  for (std::size_t i = 0; i < img.numel(); ++i) EXPECT_EQ(pair.transmitted[i], img[i] - mean[i]);
}

TEST(Separate, DeterministicAndShapePreserving) {
  std::mt19937_64 rng(6);
  Tensor img = random_tensor({4, 6, 3}, rng, 0.0, 1.0);
  auto a = separate(img, gray_mean(0.3, 1.5));
  auto b = separate(img, gray_mean(0.3, 1.5));
  EXPECT_EQ(a.transmitted.dims(), img.dims());
  EXPECT_EQ(a.reflected.dims(), img.dims());
  for (std::size_t i = 0; i < img.numel(); ++i) {
    EXPECT_EQ(a.transmitted[i], b.transmitted[i]);
    EXPECT_EQ(a.reflected[i], b.reflected[i]);
  }
}

TEST(Separate, RejectsNonPositiveScale) {
  Tensor img({2, 2, 3}, 0.5);
  EXPECT_THROW(separate(img, gray_mean(0.5, 0.0)), ParameterError);
  EXPECT_THROW(separate(img, gray_mean(0.5, -1.0)), ParameterError);
}

TEST(Separate, RejectsNonFiniteInput) {
  Tensor img({2, 2, 3}, 0.5);
  img[3] = std::nan("");
  EXPECT_THROW(separate(img, gray_mean(0.5)), ParameterError);
}

TEST(Separate, RejectsIncompatibleMean) {
  EXPECT_THROW(separate(Tensor({2, 2, 3}), {1.0, Tensor({4})}), ShapeError);
  EXPECT_THROW(separate(Tensor({2, 2, 3}), {1.0, Tensor({2, 3, 3})}), ShapeError);
}

TEST(ToGrid, SnapsToQuantum) {
  EXPECT_EQ(to_grid(0.0), 0.0);
  EXPECT_EQ(to_grid(1.0), 1.0);
  const double v = to_grid(200.0 / 255.0);
  EXPECT_LE(std::abs(v - 200.0 / 255.0), kPixelQuantum / 2);
  EXPECT_EQ(std::fmod(v, kPixelQuantum), 0.0);
}

TEST(DatasetMean, UniformGray) {
  const Tensor imgs[] = {Tensor({4, 4, 3}, 0.5)};
  Tensor m = dataset_mean(imgs);
  ASSERT_EQ(m.dims(), (Shape{3}));
  for (double v : m.values()) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(DatasetMean, TwoImagesAverage) {
  const Tensor imgs[] = {Tensor({2, 2, 3}, 0.2), Tensor({2, 2, 3}, 0.6)};
  Tensor m = dataset_mean(imgs);
  for (double v : m.values()) EXPECT_NEAR(v, 0.4, 1e-15);
}

TEST(DatasetMean, MatchesDoubleLoopOracle) {
  std::mt19937_64 rng(7);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 8; ++i) imgs.push_back(random_tensor({6, 5, 3}, rng, 0.0, 1.0));
  Tensor m = dataset_mean(imgs);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& img : imgs)
      for (std::size_t y = 0; y < 6; ++y)
        for (std::size_t x = 0; x < 5; ++x, ++n) s += img[(y * 5 + x) * 3 + c];
    EXPECT_NEAR(m[c], s / static_cast<double>(n), 1e-12);
  }
}

TEST(DatasetMean, EmptyInputIsError) {
  EXPECT_THROW(dataset_mean(std::span<const Tensor>{}), InputError);
}

TEST(ToNchw, TransposesLayout) {
  std::mt19937_64 rng(8);
  const Tensor imgs[] = {random_tensor({2, 3, 3}, rng), random_tensor({2, 3, 3}, rng)};
  Tensor b = to_nchw(imgs);
  ASSERT_EQ(b.dims(), (Shape{2, 3, 2, 3}));
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 3; ++x)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(hftest::at4(b, n, c, y, x), imgs[n][(y * 3 + x) * 3 + c]);
}
