#include <doctest.h>

#include <cmath>

#include "cseg/core/errors.hpp"
#include "cseg/losses/losses.hpp"
#include "support.hpp"

using namespace cseg;

namespace {

LogitMap saturated(const LabelMap& y, bool complement = false) {
  LogitMap z(2, y.shape());
  const std::size_t n = y.shape().voxels();
  for (std::size_t p = 0; p < n; ++p) {
    const bool fg = (y.data()[p] == 1) != complement;
    z.data()[p] = fg ? -20.0f : 20.0f;
    z.data()[n + p] = fg ? 20.0f : -20.0f;
  }
  return z;
}

// Dummy model with exact equivariance: channel 0 = x, channel 1 = -x.
LogitMap dummy(const Volume3D& x) {
  LogitMap z(2, x.shape());
  const std::size_t n = x.shape().voxels();
  for (std::size_t p = 0; p < n; ++p) {
    z.data()[p] = x.data()[p];
    z.data()[n + p] = -x.data()[p];
  }
  return z;
}

double brute_ce(const LogitMap& z, const LabelMap& y) {
  const std::size_t n = y.shape().voxels();
  double acc = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const double a = z.data()[p], b = z.data()[n + p];
    const double m = std::max(a, b);
    const double lse = m + std::log(std::exp(a - m) + std::exp(b - m));
    acc += lse - (y.data()[p] == 1 ? b : a);
  }
  return acc / static_cast<double>(n);
}

}  // namespace

TEST_CASE("dice loss examples") {
  Rng rng(1);
  const Shape3 s{6, 6, 6};
  const LabelMap y = testing::random_label(rng, s);
  CHECK(dice_loss(saturated(y), y) < 1e-3);
  // Complementary prediction: no overlap and |P| + |y| covers every voxel, so only the
  // smoothing term survives.
  CHECK(dice_loss(saturated(y, true), y) == doctest::Approx(1.0 - 1.0 / (s.voxels() + 1.0)).epsilon(1e-6));

  // Uniform probabilities against half the voxels: soft Dice = 2 * 0.5 m / (0.5 + m) with m = 0.5,
  // before smoothing; on a large grid the smoothing term is negligible.
  const Shape3 big{32, 32, 32};
  LabelMap half(big);
  for (std::size_t p = 0; p < big.voxels(); p += 2) half.data()[p] = 1;
  const LogitMap uniform_logits(2, big);
  const double n = static_cast<double>(big.voxels());
  const double expected = 1.0 - (2.0 * 0.5 * (n / 2) + 1.0) / (0.5 * n + n / 2 + 1.0);
  CHECK(dice_loss(uniform_logits, half) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(dice_loss(uniform_logits, half) == doctest::Approx(0.5).epsilon(1e-4));
  CHECK_THROWS_AS(dice_loss(uniform_logits, LabelMap(s)), ArgumentError);
}

TEST_CASE("cross entropy examples") {
  Rng rng(2);
  const Shape3 s{4, 4, 4};
  const LabelMap y = testing::random_label(rng, s);
  CHECK(cross_entropy_loss(LogitMap(2, s), y) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(cross_entropy_loss(saturated(y), y) < 1e-6);
  for (int trial = 0; trial < 20; ++trial) {
    const LogitMap z = testing::random_logits(rng, s, 2, 4.0);
    CHECK(std::abs(cross_entropy_loss(z, y) - brute_ce(z, y)) < 1e-6);
  }
}

TEST_CASE("supervised loss is the sum of its parts") {
  Rng rng(3);
  const Shape3 s{4, 4, 4};
  const LabelMap y = testing::random_label(rng, s);
  const LogitMap z = testing::random_logits(rng, s);
  CHECK(supervised_loss(z, y) == dice_loss(z, y) + cross_entropy_loss(z, y));
  CHECK(supervised_loss(saturated(y), y) < 1e-3);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(4);
  const Shape3 s{4, 4, 4};
  for (int trial = 0; trial < 5; ++trial) {
    const LabelMap y = testing::random_label(rng, s);
    LogitMap z = testing::random_logits(rng, s);
    std::vector<double> g(z.size(), 0.0);
    dice_loss_grad(z, y, g);
    CHECK(testing::fd_max_relative_error(z.data(), g, [&] { return dice_loss(z, y); }) < 1e-4);
    std::fill(g.begin(), g.end(), 0.0);
    cross_entropy_loss_grad(z, y, g);
    CHECK(testing::fd_max_relative_error(z.data(), g, [&] { return cross_entropy_loss(z, y); }) < 1e-4);
    std::fill(g.begin(), g.end(), 0.0);
    supervised_loss_grad(z, y, g);
    CHECK(testing::fd_max_relative_error(z.data(), g, [&] { return supervised_loss(z, y); }) < 1e-4);

    LogitMap zb = testing::random_logits(rng, s);
    const VoxelMask m = testing::random_mask(rng, s.voxels());
    std::vector<double> ga(z.size(), 0.0), gb(z.size(), 0.0);
    l2_consistency_grad(z, zb, m, ga, gb);
    CHECK(testing::fd_max_relative_error(z.data(), ga, [&] { return l2_consistency(z, zb, m); }) < 1e-4);
    CHECK(testing::fd_max_relative_error(zb.data(), gb, [&] { return l2_consistency(z, zb, m); }) < 1e-4);
  }
}

TEST_CASE("l2 consistency examples") {
  Rng rng(5);
  const Shape3 s{4, 4, 4};
  const LogitMap a = testing::random_logits(rng, s);
  const VoxelMask full(s.voxels(), 1);
  CHECK(l2_consistency(a, a, full) == 0.0);
  LogitMap b = a;
  for (float& v : b.data()) v += 1.0f;
  CHECK(l2_consistency(a, b, full) == doctest::Approx(1.0).epsilon(1e-6));

  const LogitMap c = testing::random_logits(rng, s);
  VoxelMask halfm(s.voxels(), 0);
  for (std::size_t p = 0; p < s.voxels() / 2; ++p) halfm[p] = 1;
  double acc = 0.0;
  for (int ch = 0; ch < 2; ++ch)
    for (std::size_t p = 0; p < s.voxels() / 2; ++p) {
      const double d = static_cast<double>(a.channel(ch)[p]) - c.channel(ch)[p];
      acc += d * d;
    }
  CHECK(l2_consistency(a, c, halfm) == doctest::Approx(acc / static_cast<double>(s.voxels())).epsilon(1e-12));
  CHECK_THROWS_AS(l2_consistency(a, c, VoxelMask(s.voxels(), 0)), DegenerateInputError);
}

TEST_CASE("spatial consistency examples") {
  Rng rng(6);
  const Shape3 s{8, 8, 8};
  const Volume3D x = testing::random_volume(rng, s);
  const SegmentationFn f = dummy;
  CHECK(spatial_consistency_loss(f, f, x, PairedTransform{}) == 0.0);
  for (int trial = 0; trial < 100; ++trial) {
    PairedTransform t = sample_transform(rng, TransformDistribution{0.5, 0.5, 0.5}, s);
    t.intensity = IntensityTransform{};
    CHECK(spatial_consistency_loss(f, f, x, t) == 0.0);
  }
  PairedTransform g;
  g.intensity.gamma = 2.0;
  double expected = 0.0;
  for (float v : x.data()) {
    const double xv = v;
    const double d = xv - static_cast<double>(static_cast<float>(std::pow(xv, 2.0)));
    expected += d * d + d * d;
  }
  expected /= 2.0 * static_cast<double>(s.voxels());
  CHECK(spatial_consistency_loss(f, f, x, g) == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("temporal consistency examples") {
  Rng rng(7);
  const Shape3 s{8, 8, 8};
  const Volume3D x = testing::random_volume(rng, s);
  const Volume3D x2 = testing::random_volume(rng, s);
  const SegmentationFn f = dummy;
  const RegistrationFn zero = [](const Volume3D& a, const Volume3D&) { return DisplacementField(a.shape()); };
  CHECK(temporal_consistency_loss(f, f, zero, {"a", 0, &x}, {"a", 1, &x}) == 0.0);
  const VoxelMask full(s.voxels(), 1);
  CHECK(temporal_consistency_loss(f, f, zero, {"a", 0, &x}, {"a", 2, &x2}) == l2_consistency(dummy(x), dummy(x2), full));
  CHECK_THROWS_AS(temporal_consistency_loss(f, f, zero, {"a", 0, &x}, {"b", 1, &x2}), ArgumentError);
}

TEST_CASE("lambda schedule") {
  const double L = 1000.0;
  CHECK(lambda_schedule(0, L, 1.0) == doctest::Approx(0.006738).epsilon(1e-4));
  CHECK(lambda_schedule(0, L, 0.01) == 0.01 * std::exp(-5.0));
  CHECK(lambda_schedule(L, L, 0.01) == 0.01);
  CHECK(lambda_schedule(2 * L, L, 0.01) == 0.01);
  double prev = -1.0;
  for (int S = 0; S <= 3000; S += 7) {
    const double v = lambda_schedule(S, L, 0.5);
    CHECK(v >= prev);
    CHECK(v <= 0.5);
    prev = v;
  }
  CHECK(lambda_schedule(L - 1e-9, L, 0.5) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("combined loss composition") {
  Rng rng(8);
  const Shape3 s{4, 4, 4};
  std::vector<LogitMap> z;
  for (int k = 0; k < 10; ++k) z.push_back(testing::random_logits(rng, s));
  const LabelMap y0 = testing::random_label(rng, s), y1 = testing::random_label(rng, s);
  const VoxelMask m0 = testing::random_mask(rng, s.voxels()), m1 = testing::random_mask(rng, s.voxels());
  const VoxelMask m2 = testing::random_mask(rng, s.voxels());

  std::vector<LabeledTerm> lab{{&z[0], &y0, &z[1], &z[2], &m0}, {&z[3], &y1, nullptr, nullptr, nullptr}};
  std::vector<UnlabeledTerm> unl{{&z[4], &z[5], &m1, &z[6], &z[7], &m2}, {nullptr, nullptr, nullptr, &z[8], &z[9], &m0}};

  const LossBreakdown basic = combined_loss(lab, unl, 0.0, 0.0);
  const double sup = 0.5 * (supervised_loss(z[0], y0) + supervised_loss(z[3], y1));
  CHECK(basic.sup == doctest::Approx(sup).epsilon(1e-12));
  CHECK(basic.total == basic.sup);

  const LossBreakdown r = combined_loss(lab, unl, 0.3, 0.7);
  CHECK(r.spatial == doctest::Approx(0.5 * (l2_consistency(z[2], z[1], m0) + l2_consistency(z[5], z[4], m1))).epsilon(1e-12));
  CHECK(r.temporal == doctest::Approx(0.5 * (l2_consistency(z[6], z[7], m2) + l2_consistency(z[8], z[9], m0))).epsilon(1e-12));
  CHECK(std::abs(r.total - (r.sup + 0.3 * r.spatial + 0.7 * r.temporal)) < 1e-6);

  // Labeled-only batch with no temporal weight: Basic plus the spatial term.
  const LossBreakdown s_only = combined_loss(lab, {}, 0.3, 0.0);
  CHECK(s_only.total == doctest::Approx(sup + 0.3 * l2_consistency(z[2], z[1], m0)).epsilon(1e-12));

  CombinedGrads g;
  combined_loss(lab, unl, 0.3, 0.7, &g);
  auto total = [&] { return combined_loss(lab, unl, 0.3, 0.7).total; };
  CHECK(testing::fd_max_relative_error(z[0].data(), g.labeled[0].student, total) < 1e-4);
  CHECK(testing::fd_max_relative_error(z[1].data(), g.labeled[0].student_aug, total) < 1e-4);
  CHECK(testing::fd_max_relative_error(z[2].data(), g.labeled[0].ref_aug, total) < 1e-4);
  CHECK(testing::fd_max_relative_error(z[4].data(), g.unlabeled[0].student_aug, total) < 1e-4);
  CHECK(testing::fd_max_relative_error(z[7].data(), g.unlabeled[0].ref_warped, total) < 1e-4);
  CHECK(g.labeled[1].student_aug.empty());
}
