#include "cseg/transforms/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "cseg/core/errors.hpp"

namespace cseg {

namespace {

constexpr int kPlaneAxes[3][2] = {{0, 1}, {0, 2}, {1, 2}};

// Inverse of one forward quarter turn (a, b) -> (n - 1 - b, a) on a square plane.
void undo_quarter_turn(double& a, double& b, int n) {
  const double oa = a;
  a = b;
  b = static_cast<double>(n - 1) - oa;
}

void undo_half_turn(double& a, double& b, int na, int nb) {
  a = static_cast<double>(na - 1) - a;
  b = static_cast<double>(nb - 1) - b;
}

void undo_rotation(double& a, double& b, int na, int nb, double degrees) {
  const double th = -degrees * std::numbers::pi / 180.0;
  const double ca = 0.5 * (na - 1);
  const double cb = 0.5 * (nb - 1);
  const double da = a - ca;
  const double db = b - cb;
  a = ca + std::cos(th) * da - std::sin(th) * db;
  b = cb + std::sin(th) * da + std::cos(th) * db;
}

}  // namespace

void TransformDistribution::validate() const {
  auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(p_flip) || !prob(p_rotate) || !prob(p_translate)) throw ConfigError("transform probabilities must lie in [0, 1]");
  if (max_translation < 0.0) throw ConfigError("max_translation must be >= 0");
  if (!(gamma_min > 0.0) || gamma_max < gamma_min) throw ConfigError("gamma range must satisfy 0 < min <= max");
  if (noise_sigma_max < 0.0) throw ConfigError("noise_sigma_max must be >= 0");
  if (max_angle_degrees < 0.0) throw ConfigError("max_angle_degrees must be >= 0");
}

bool GeometricTransform::is_identity() const {
  for (int a = 0; a < 3; ++a) {
    if (flip[a] || translation[a] != 0) return false;
    if (continuous ? angles_degrees[a] != 0.0 : quarter_turns[a] % 4 != 0) return false;
  }
  return true;
}

PairedTransform sample_transform(Rng& rng, const TransformDistribution& dist, const Shape3& shape) {
  PairedTransform t;
  GeometricTransform& g = t.geometric;
  for (int a = 0; a < 3; ++a) g.flip[a] = bernoulli(rng, dist.p_flip);
  t.rotation_active = bernoulli(rng, dist.p_rotate);
  if (t.rotation_active) {
    g.continuous = dist.continuous_rotation;
    for (int p = 0; p < 3; ++p) {
      if (g.continuous) {
        g.angles_degrees[p] = uniform(rng, -dist.max_angle_degrees, dist.max_angle_degrees);
      } else {
        const bool square = shape.extent(kPlaneAxes[p][0]) == shape.extent(kPlaneAxes[p][1]);
        g.quarter_turns[p] = square ? static_cast<int>(uniform_index(rng, 4)) : 2 * static_cast<int>(uniform_index(rng, 2));
      }
    }
  }
  t.translation_active = bernoulli(rng, dist.p_translate);
  if (t.translation_active) {
    for (int a = 0; a < 3; ++a) {
      const int magnitude = static_cast<int>(std::lround(uniform(rng, 0.0, dist.max_translation)));
      g.translation[a] = bernoulli(rng, 0.5) ? -magnitude : magnitude;
    }
  }
  t.intensity.gamma = uniform(rng, dist.gamma_min, dist.gamma_max);
  t.intensity.noise_sigma = uniform(rng, 0.0, dist.noise_sigma_max);
  t.intensity.noise_seed = rng();
  return t;
}

std::size_t GeometricPlan::valid_count() const {
  std::size_t n = 0;
  for (auto v : valid) n += v;
  return n;
}

GeometricPlan make_plan(const GeometricTransform& t, const Shape3& shape) {
  const int n[3] = {shape.h, shape.w, shape.d};
  if (!t.continuous) {
    for (int p = 0; p < 3; ++p) {
      if (t.quarter_turns[p] % 2 != 0 && n[kPlaneAxes[p][0]] != n[kPlaneAxes[p][1]]) {
        throw ArgumentError("odd quarter turns need a square plane, got " + shape.str());
      }
    }
  }
  GeometricPlan plan;
  plan.shape = shape;
  plan.taps = t.continuous ? 8 : 1;
  const std::size_t nv = shape.voxels();
  plan.index.assign(nv * static_cast<std::size_t>(plan.taps), 0);
  plan.weight.assign(nv * static_cast<std::size_t>(plan.taps), 0.0f);
  plan.valid.assign(nv, 0);

  for (int i = 0; i < shape.h; ++i) {
    for (int j = 0; j < shape.w; ++j) {
      for (int k = 0; k < shape.d; ++k) {
        double q[3] = {static_cast<double>(i - t.translation[0]), static_cast<double>(j - t.translation[1]),
                       static_cast<double>(k - t.translation[2])};
        for (int p = 2; p >= 0; --p) {
          const int a = kPlaneAxes[p][0];
          const int b = kPlaneAxes[p][1];
          if (t.continuous) {
            if (t.angles_degrees[p] != 0.0) undo_rotation(q[a], q[b], n[a], n[b], t.angles_degrees[p]);
          } else {
            const int turns = ((t.quarter_turns[p] % 4) + 4) % 4;
            if (turns == 2) {
              undo_half_turn(q[a], q[b], n[a], n[b]);
            } else {
              for (int r = 0; r < turns; ++r) undo_quarter_turn(q[a], q[b], n[a]);
            }
          }
        }
        for (int a = 0; a < 3; ++a) {
          if (t.flip[a]) q[a] = static_cast<double>(n[a] - 1) - q[a];
        }
        const std::size_t out = shape.index(i, j, k);
        if (!t.continuous) {
          const int si = static_cast<int>(q[0]);
          const int sj = static_cast<int>(q[1]);
          const int sk = static_cast<int>(q[2]);
          if (shape.contains(si, sj, sk)) {
            plan.valid[out] = 1;
            plan.index[out] = static_cast<std::int32_t>(shape.index(si, sj, sk));
            plan.weight[out] = 1.0f;
          }
          continue;
        }
        constexpr double tol = 1e-9;
        bool inside = true;
        int base[3];
        double frac[3];
        for (int a = 0; a < 3; ++a) {
          if (q[a] < -tol || q[a] > n[a] - 1 + tol) inside = false;
          const double c = std::clamp(q[a], 0.0, static_cast<double>(n[a] - 1));
          base[a] = std::min(static_cast<int>(std::floor(c)), std::max(n[a] - 2, 0));
          frac[a] = n[a] > 1 ? c - base[a] : 0.0;
        }
        if (!inside) continue;
        plan.valid[out] = 1;
        for (int tap = 0; tap < 8; ++tap) {
          int idx[3];
          double w = 1.0;
          for (int a = 0; a < 3; ++a) {
            const int bit = (tap >> (2 - a)) & 1;
            idx[a] = std::min(base[a] + bit, n[a] - 1);
            w *= bit ? frac[a] : 1.0 - frac[a];
          }
          plan.index[out * 8 + tap] = static_cast<std::int32_t>(shape.index(idx[0], idx[1], idx[2]));
          plan.weight[out * 8 + tap] = static_cast<float>(w);
        }
      }
    }
  }
  return plan;
}

void apply_plan(const GeometricPlan& plan, std::span<const float> in, std::span<float> out) {
  const std::size_t nv = plan.shape.voxels();
  if (in.size() != nv || out.size() != nv) throw ArgumentError("apply_plan: size mismatch");
  if (plan.taps == 1) {
    for (std::size_t p = 0; p < nv; ++p) out[p] = plan.valid[p] ? in[static_cast<std::size_t>(plan.index[p])] : 0.0f;
    return;
  }
  const auto taps = static_cast<std::size_t>(plan.taps);
  for (std::size_t p = 0; p < nv; ++p) {
    if (!plan.valid[p]) {
      out[p] = 0.0f;
      continue;
    }
    float acc = 0.0f;
    for (std::size_t t = 0; t < taps; ++t) acc += plan.weight[p * taps + t] * in[static_cast<std::size_t>(plan.index[p * taps + t])];
    out[p] = acc;
  }
}

void apply_plan_adjoint(const GeometricPlan& plan, std::span<const float> grad_out, std::span<float> grad_in) {
  const std::size_t nv = plan.shape.voxels();
  if (grad_in.size() != nv || grad_out.size() != nv) throw ArgumentError("apply_plan_adjoint: size mismatch");
  const auto taps = static_cast<std::size_t>(plan.taps);
  for (std::size_t p = 0; p < nv; ++p) {
    if (!plan.valid[p]) continue;
    for (std::size_t t = 0; t < taps; ++t) {
      grad_in[static_cast<std::size_t>(plan.index[p * taps + t])] += plan.weight[p * taps + t] * grad_out[p];
    }
  }
}

void apply_intensity(const IntensityTransform& t, std::span<float> values) {
  if (t.gamma != 1.0) {
    for (float& v : values) v = static_cast<float>(std::pow(std::max(0.0, static_cast<double>(v)), t.gamma));
  }
  if (t.noise_sigma > 0.0) {
    Rng rng(t.noise_seed);
    for (float& v : values) v = static_cast<float>(v + t.noise_sigma * standard_normal(rng));
  }
}

TransformedImage apply_to_image(const PairedTransform& t, const Volume3D& x) {
  TransformedImage r{Volume3D(x.shape(), x.spacing()), {}};
  if (t.geometric.is_identity()) {
    std::copy(x.data().begin(), x.data().end(), r.image.data().begin());
    r.valid.assign(x.shape().voxels(), 1);
  } else {
    GeometricPlan plan = make_plan(t.geometric, x.shape());
    apply_plan(plan, x.data(), r.image.data());
    r.valid = std::move(plan.valid);
  }
  apply_intensity(t.intensity, r.image.data());
  return r;
}

ChannelVolume apply_plan_channels(const GeometricPlan& plan, const ChannelVolume& z) {
  if (z.shape() != plan.shape) throw ArgumentError("apply_plan_channels: shape mismatch");
  ChannelVolume out(z.channels(), z.shape());
  for (int c = 0; c < z.channels(); ++c) apply_plan(plan, z.channel(c), out.channel(c));
  return out;
}

ChannelVolume apply_plan_channels_adjoint(const GeometricPlan& plan, const ChannelVolume& grad) {
  if (grad.shape() != plan.shape) throw ArgumentError("apply_plan_channels_adjoint: shape mismatch");
  ChannelVolume out(grad.channels(), grad.shape());
  for (int c = 0; c < grad.channels(); ++c) apply_plan_adjoint(plan, grad.channel(c), out.channel(c));
  return out;
}

TransformedLogits apply_geometric_to_logits(const PairedTransform& t, const LogitMap& z) {
  if (t.geometric.is_identity()) return {z, VoxelMask(z.shape().voxels(), 1)};
  GeometricPlan plan = make_plan(t.geometric, z.shape());
  LogitMap out(apply_plan_channels(plan, z));
  return {std::move(out), std::move(plan.valid)};
}

}  // namespace cseg
