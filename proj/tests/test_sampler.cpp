#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "attrloc/sampler.hpp"

using namespace attrloc;

namespace {

Tensor64 theta_row(double sx, double sy, double tx, double ty) {
  return Tensor64({1, 4}, std::vector<double>{sx, sy, tx, ty});
}

}  // namespace

TEST(Constrain, ZeroRawGivesHalfScaleNoShift) {
  auto t = constrain_params({0.0, 0.0, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(t.sx, 0.5);
  EXPECT_DOUBLE_EQ(t.sy, 0.5);
  EXPECT_DOUBLE_EQ(t.tx, 0.0);
  EXPECT_DOUBLE_EQ(t.ty, 0.0);
}

TEST(Constrain, InitialBiasValue) {
  auto t = constrain_params({2.0, 2.0, 0.0, 0.0});
  EXPECT_NEAR(t.sx, 0.8808, 1e-4);
  EXPECT_NEAR(t.sy, 0.8808, 1e-4);
}

TEST(Constrain, TensorFormMatchesScalar) {
  Tensor64 raw({2, 4}, std::vector<double>{-3, 0.4, 2.5, -0.7, 10, -10, 0.01, 5});
  auto out = constrain_params(raw);
  for (std::size_t i = 0; i < 2; ++i) {
    auto t = constrain_params({raw[4 * i], raw[4 * i + 1], raw[4 * i + 2], raw[4 * i + 3]});
    EXPECT_DOUBLE_EQ(out[4 * i], t.sx);
    EXPECT_DOUBLE_EQ(out[4 * i + 1], t.sy);
    EXPECT_DOUBLE_EQ(out[4 * i + 2], t.tx);
    EXPECT_DOUBLE_EQ(out[4 * i + 3], t.ty);
  }
  for (double v : out.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(AffineGrid, IdentityReproducesLattice) {
  auto g = affine_grid(theta_row(1, 1, 0, 0), 3, 5);
  ASSERT_EQ(g.shape(), (Shape{1, 3, 5, 2}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      EXPECT_DOUBLE_EQ(g[(i * 5 + j) * 2], -1.0 + 2.0 * j / 4.0);
      EXPECT_DOUBLE_EQ(g[(i * 5 + j) * 2 + 1], -1.0 + 2.0 * i / 2.0);
    }
}

TEST(AffineGrid, HalfScaleShiftedRight) {
  auto g = affine_grid(theta_row(0.5, 1, 0.5, 0), 1, 2);
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 1.0);
}

TEST(AffineGrid, ClosedForm) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> s(0, 1), t(-1, 1);
  Tensor64 th({3, 4});
  for (std::size_t b = 0; b < 3; ++b) {
    th[4 * b] = s(rng);
    th[4 * b + 1] = s(rng);
    th[4 * b + 2] = t(rng);
    th[4 * b + 3] = t(rng);
  }
  auto g = affine_grid(th, 4, 3);
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        const double xt = -1 + 2.0 * j / 2, yt = -1 + 2.0 * i / 3;
        const std::size_t o = ((b * 4 + i) * 3 + j) * 2;
        EXPECT_NEAR(g[o], th[4 * b] * xt + th[4 * b + 2], 1e-15);
        EXPECT_NEAR(g[o + 1], th[4 * b + 1] * yt + th[4 * b + 3], 1e-15);
      }
}

TEST(AffineGrid, WrongThetaWidthRejected) {
  EXPECT_THROW(affine_grid(Tensor64({1, 6}), 2, 2), DimensionError);
}

TEST(GridSample, ConstantMapInsideStaysConstant) {
  Tensor64 f({1, 2, 4, 4}, 3.0);
  auto out = grid_sample(f, affine_grid(theta_row(0.6, 0.4, 0.2, -0.3), 5, 5));
  for (double v : out.data()) EXPECT_NEAR(v, 3.0, 1e-12);
}

TEST(GridSample, PixelCentersAreExact) {
  Tensor64 f({1, 1, 3, 4}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  auto out = grid_sample(f, affine_grid(theta_row(1, 1, 0, 0), 3, 4));
  for (std::size_t i = 0; i < 12; ++i) EXPECT_DOUBLE_EQ(out[i], f[i]);
}

TEST(GridSample, BilinearBetweenCenters) {
  Tensor64 f({1, 1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  Tensor64 grid({1, 1, 1, 2}, std::vector<double>{0.0, 0.0});
  EXPECT_DOUBLE_EQ(grid_sample(f, grid)[0], 1.5);
}

TEST(GridSample, OutsideNeighboursReadAsZero) {
  Tensor64 f({1, 1, 2, 2}, 1.0);
  // half a pixel beyond the right edge: half the weight falls outside
  Tensor64 grid({1, 1, 1, 2}, std::vector<double>{2.0, -1.0});
  EXPECT_DOUBLE_EQ(grid_sample(f, grid)[0], 0.5);
}

TEST(GridSample, LinearRampReproducedAtAnyPoint) {
  const std::size_t h = 5, w = 7;
  Tensor64 f({1, 1, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) f[y * w + x] = 0.3 * x - 0.7 * y + 2;
  auto out = grid_sample(f, affine_grid(theta_row(0.8, 0.9, 0.1, -0.05), 9, 13));
  auto grid = affine_grid(theta_row(0.8, 0.9, 0.1, -0.05), 9, 13);
  for (std::size_t p = 0; p < 9 * 13; ++p) {
    const double px = (grid[2 * p] + 1) * 0.5 * (w - 1), py = (grid[2 * p + 1] + 1) * 0.5 * (h - 1);
    EXPECT_NEAR(out[p], 0.3 * px - 0.7 * py + 2, 1e-5);
  }
}

TEST(GridSample, NonFiniteGridRejected) {
  Tensor64 grid({1, 1, 1, 2}, std::vector<double>{std::numeric_limits<double>::quiet_NaN(), 0.0});
  EXPECT_THROW(grid_sample(Tensor64({1, 1, 2, 2}), grid), NumericError);
}

TEST(GridSample, BatchMismatchRejected) {
  EXPECT_THROW(grid_sample(Tensor64({2, 1, 2, 2}), Tensor64({1, 2, 2, 2})), DimensionError);
}

TEST(ImageBox, FullExtentSpansOuterCellCenters) {
  auto b = feature_box_to_image_box({1, 1, 0, 0}, 8, 8, 4, 64, 32);
  EXPECT_DOUBLE_EQ(b.x0, 4.0);
  EXPECT_DOUBLE_EQ(b.x1, 28.0);
  EXPECT_DOUBLE_EQ(b.y0, 4.0);
  EXPECT_DOUBLE_EQ(b.y1, 60.0);
}

TEST(ImageBox, HalfScaleOnLargeImage) {
  auto b = feature_box_to_image_box({0.5, 0.5, 0, 0}, 8, 32, 16, 256, 128);
  EXPECT_DOUBLE_EQ(b.x0, 34.0);
  EXPECT_DOUBLE_EQ(b.x1, 94.0);
  EXPECT_DOUBLE_EQ(b.y0, 66.0);
  EXPECT_DOUBLE_EQ(b.y1, 190.0);
}

TEST(ImageBox, ClippedToImage) {
  auto b = feature_box_to_image_box({1, 1, 1, -1}, 8, 8, 4, 64, 32);
  EXPECT_DOUBLE_EQ(b.x1, 32.0);
  EXPECT_DOUBLE_EQ(b.y0, 0.0);
  EXPECT_GE(b.x0, 0.0);
  EXPECT_LE(b.y1, 64.0);
}

TEST(ImageBox, WidensWithScale) {
  double prev = -1;
  for (double s = 0.05; s <= 1.0; s += 0.05) {
    auto b = feature_box_to_image_box({s, s, 0.1, -0.2}, 16, 16, 8, 256, 128);
    EXPECT_GE(b.width(), prev);
    prev = b.width();
  }
}
