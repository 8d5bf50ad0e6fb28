#include <doctest.h>

#include <cmath>
#include <set>

#include "cseg/core/errors.hpp"
#include "cseg/phantom/phantom.hpp"
#include "cseg/warp/warp.hpp"
#include "support.hpp"

using namespace cseg;

namespace {

DisplacementField random_field(Rng& rng, Shape3 s, double scale) {
  DisplacementField f(s);
  for (float& v : f.data()) v = static_cast<float>(uniform(rng, -scale, scale));
  return f;
}

DisplacementField constant_field(Shape3 s, float a, float b, float c) {
  DisplacementField f(s);
  const std::size_t n = s.voxels();
  for (std::size_t p = 0; p < n; ++p) {
    f.data()[p] = a;
    f.data()[n + p] = b;
    f.data()[2 * n + p] = c;
  }
  return f;
}

}  // namespace

TEST_CASE("zero field is the identity for both interpolations") {
  Rng rng(1);
  const Shape3 s{5, 6, 7};
  const Volume3D v = testing::random_volume(rng, s);
  const DisplacementField zero(s);
  CHECK(warp(zero, v).values() == v.values());
  CHECK(warp(zero, v, Interp::nearest).values() == v.values());
  const LabelMap y = testing::random_label(rng, s);
  CHECK(warp(zero, y) == y);
}

TEST_CASE("integer field shifts the volume") {
  Rng rng(2);
  const Shape3 s{6, 5, 4};
  const Volume3D v = testing::random_volume(rng, s);
  const Volume3D out = warp(constant_field(s, 1, 0, 0), v);
  for (int i = 0; i + 1 < s.h; ++i)
    for (int j = 0; j < s.w; ++j)
      for (int k = 0; k < s.d; ++k) CHECK(out(i, j, k) == v(i + 1, j, k));
  // Clamped at the far border.
  CHECK(out(s.h - 1, 0, 0) == v(s.h - 1, 0, 0));
  const VoxelMask m = warp_valid_mask(constant_field(s, 1, 0, 0));
  CHECK(m[s.index(s.h - 1, 0, 0)] == 0);
  CHECK(m[s.index(0, 0, 0)] == 1);
}

TEST_CASE("logit warping is per-channel warping") {
  Rng rng(3);
  const Shape3 s{6, 6, 6};
  const LogitMap z = testing::random_logits(rng, s, 3);
  const DisplacementField f = random_field(rng, s, 2.0);
  const LogitMap wz = warp(f, z);
  for (int c = 0; c < 3; ++c) {
    const Volume3D ch(s, std::vector<float>(z.channel(c).begin(), z.channel(c).end()));
    const Volume3D wc = warp(f, ch);
    CHECK(std::equal(wc.data().begin(), wc.data().end(), wz.channel(c).begin()));
  }
}

TEST_CASE("nearest warp of labels only produces existing values") {
  Rng rng(4);
  const Shape3 s{6, 6, 6};
  LabelMap y(s, 4);
  for (auto& v : y.data()) v = static_cast<std::uint8_t>(uniform_index(rng, 3));  // values 0..2
  const LabelMap w = warp(random_field(rng, s, 3.0), y);
  for (auto v : w.data()) CHECK(v < 3);
}

TEST_CASE("warp adjoints") {
  Rng rng(5);
  const Shape3 s{5, 6, 4};
  for (int trial = 0; trial < 10; ++trial) {
    const DisplacementField f = random_field(rng, s, 2.5);
    const Volume3D a = testing::random_volume(rng, s, -1, 1);
    const Volume3D b = testing::random_volume(rng, s, -1, 1);
    const Volume3D wa = warp(f, a);
    std::vector<float> wtb(s.voxels(), 0.0f);
    warp_adjoint_values(f, b.data(), wtb);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t p = 0; p < s.voxels(); ++p) {
      lhs += static_cast<double>(wa.data()[p]) * b.data()[p];
      rhs += static_cast<double>(a.data()[p]) * wtb[p];
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
  }
}

TEST_CASE("warp field gradient matches finite differences") {
  Rng rng(6);
  const Shape3 s{4, 4, 4};
  const Volume3D v = testing::random_volume(rng, s);
  // Keep sample positions away from cell boundaries where trilinear warping has kinks.
  DisplacementField f(s);
  for (float& x : f.data()) x = static_cast<float>(uniform(rng, 0.2, 0.8) * (bernoulli(rng, 0.5) ? 1 : -1));
  std::vector<double> r(s.voxels());
  for (double& x : r) x = uniform(rng, -1, 1);
  auto loss = [&] {
    const Volume3D w = warp(f, v);
    double acc = 0.0;
    for (std::size_t p = 0; p < s.voxels(); ++p) acc += r[p] * w.data()[p];
    return acc;
  };
  std::vector<double> g(f.size(), 0.0);
  warp_adjoint_field(f, v.data(), r, g);
  // Trilinear warping is linear in each displacement component between cell boundaries, so a
  // large step stays exact and keeps float rounding small.
  CHECK(testing::fd_max_relative_error(f.data(), g, loss, 0.1) < 1e-3);
}

TEST_CASE("local NCC properties") {
  Rng rng(7);
  const Shape3 s{8, 8, 8};
  for (int trial = 0; trial < 5; ++trial) {
    const Volume3D a = testing::random_volume(rng, s);
    CHECK(local_ncc(a, a) >= 0.999);
    Volume3D b = a;
    for (float& x : b.data()) x = 2.0f * x + 3.0f;
    CHECK(local_ncc(a, b) == doctest::Approx(local_ncc(a, a)).epsilon(1e-5));
    const Volume3D c = testing::random_volume(rng, s);
    CHECK(std::abs(local_ncc(a, c)) < 0.3);
    CHECK(local_ncc(a, c) == doctest::Approx(local_ncc(c, a)).epsilon(1e-6));
  }
  CHECK_THROWS_AS(local_ncc(Volume3D(Shape3{4, 4, 4}), Volume3D(Shape3{4, 4, 5})), ArgumentError);
  const Volume3D flat(s, std::vector<float>(s.voxels(), 0.5f));
  CHECK(std::isfinite(local_ncc(flat, flat)));
}

TEST_CASE("local NCC gradient matches finite differences") {
  Rng rng(8);
  const Shape3 s{4, 4, 4};
  for (int trial = 0; trial < 3; ++trial) {
    Volume3D a = testing::random_volume(rng, s);
    Volume3D b = testing::random_volume(rng, s);
    std::vector<double> ga, gb;
    local_ncc_grad(a, b, &ga, &gb);
    CHECK(testing::fd_max_relative_error(a.data(), ga, [&] { return local_ncc(a, b); }) < 1e-4);
    CHECK(testing::fd_max_relative_error(b.data(), gb, [&] { return local_ncc(a, b); }) < 1e-4);
  }
}

TEST_CASE("gradient smoothness") {
  const Shape3 s{6, 6, 6};
  CHECK(grad_smoothness(constant_field(s, 1.5f, -2.0f, 0.25f)) == 0.0);
  DisplacementField ramp(s);
  for (int i = 0; i < s.h; ++i)
    for (int j = 0; j < s.w; ++j)
      for (int k = 0; k < s.d; ++k) ramp.at(0, i, j, k) = static_cast<float>(i);
  CHECK(grad_smoothness(ramp) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  Rng rng(9);
  DisplacementField f = random_field(rng, s, 1.0);
  const double base = grad_smoothness(f);
  for (float& v : f.data()) v += 0.5f;
  CHECK(grad_smoothness(f) == doctest::Approx(base).epsilon(1e-6));

  DisplacementField g4 = random_field(rng, Shape3{4, 4, 4}, 1.0);
  std::vector<double> grad(g4.size(), 0.0);
  grad_smoothness_grad(g4, grad);
  CHECK(testing::fd_max_relative_error(g4.data(), grad, [&] { return grad_smoothness(g4); }) < 1e-4);
}

TEST_CASE("registration loss examples") {
  Rng rng(10);
  const Shape3 s{8, 8, 8};
  const Volume3D a = testing::random_volume(rng, s);
  const DisplacementField zero(s);
  CHECK(registration_loss(a, a, zero, 1.0).total == doctest::Approx(-1.0).epsilon(1e-3));
  const DisplacementField f = random_field(rng, s, 1.0);
  const Volume3D b = testing::random_volume(rng, s);
  CHECK(registration_loss(a, b, f, 0.0).total == doctest::Approx(-local_ncc(a, warp(f, b))).epsilon(1e-12));

  // A moving frame that is the fixed frame shifted by two voxels along axis 1.
  PhantomConfig pc;
  pc.grid = {16, 16, 16};
  pc.num_frames = 2;
  pc.motion_amplitude = 0.0;
  const Volume3D fixed = generate_subject(pc, 0).series.frames[0];
  Volume3D moving(fixed.shape());
  for (int i = 0; i < 16; ++i)
    for (int j = 0; j < 16; ++j)
      for (int k = 0; k < 16; ++k) moving(i, j, k) = fixed(i, std::max(j - 2, 0), k);
  const DisplacementField truth = constant_field(fixed.shape(), 0, 2, 0);
  CHECK(registration_loss(fixed, moving, truth, 1.0).total < registration_loss(fixed, moving, DisplacementField(fixed.shape()), 1.0).total);
}

TEST_CASE("registration loss gradient matches finite differences") {
  Rng rng(11);
  const Shape3 s{4, 4, 4};
  const Volume3D a = testing::random_volume(rng, s);
  const Volume3D b = testing::random_volume(rng, s);
  DisplacementField f(s);
  for (float& x : f.data()) x = static_cast<float>(uniform(rng, 0.2, 0.8) * (bernoulli(rng, 0.5) ? 1 : -1));
  std::vector<double> g(f.size(), 0.0);
  registration_loss_grad(a, b, f, 0.7, g);
  CHECK(testing::fd_max_relative_error(f.data(), g, [&] { return registration_loss(a, b, f, 0.7).total; }, 1e-2) < 1e-3);
}

TEST_CASE("field file round trip") {
  Rng rng(12);
  const DisplacementField f = random_field(rng, Shape3{3, 4, 5}, 2.0);
  const auto path = std::filesystem::temp_directory_path() / "cseg_test_field.raw";
  io::save_field(path, f);
  CHECK(io::load_field(path) == f);
}
