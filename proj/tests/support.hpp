#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "cseg/core/random.hpp"
#include "cseg/core/volume.hpp"

namespace cseg::testing {

inline Volume3D random_volume(Rng& rng, Shape3 s, double lo = 0.0, double hi = 1.0) {
  Volume3D v(s);
  for (float& x : v.data()) x = static_cast<float>(uniform(rng, lo, hi));
  return v;
}

inline LogitMap random_logits(Rng& rng, Shape3 s, int channels = 2, double scale = 2.0) {
  LogitMap z(channels, s);
  for (float& x : z.data()) x = static_cast<float>(uniform(rng, -scale, scale));
  return z;
}

inline LabelMap random_label(Rng& rng, Shape3 s, double p = 0.4) {
  LabelMap y(s);
  for (auto& v : y.data()) v = bernoulli(rng, p) ? 1 : 0;
  return y;
}

inline VoxelMask random_mask(Rng& rng, std::size_t n, double p = 0.7) {
  VoxelMask m(n);
  for (auto& v : m) v = bernoulli(rng, p) ? 1 : 0;
  m[0] = 1;
  return m;
}

/// Central differences with the actually representable float step at two step sizes,
/// Richardson-combined to cancel the leading truncation term. Returns the largest
/// |analytic - numeric| / max(|analytic|, |numeric|, floor) over all coordinates, where
/// floor = 1e-3 * max |analytic| guards coordinates whose gradient is essentially zero.
inline double fd_max_relative_error(std::span<float> x, const std::vector<double>& analytic,
                                    const std::function<double()>& f, double h = 1e-2) {
  double amax = 0.0;
  for (double a : analytic) amax = std::max(amax, std::abs(a));
  const double floor = std::max(1e-3 * amax, 1e-12);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float x0 = x[i];
    auto diff = [&](double step, double& actual) {
      const float xp = static_cast<float>(x0 + step);
      const float xm = static_cast<float>(x0 - step);
      x[i] = xp;
      const double fp = f();
      x[i] = xm;
      const double fm = f();
      x[i] = x0;
      actual = 0.5 * (static_cast<double>(xp) - static_cast<double>(xm));
      return (fp - fm) / (2.0 * actual);
    };
    double s1 = 0.0, s2 = 0.0;
    const double d1 = diff(h, s1);
    const double d2 = diff(0.5 * h, s2);
    const double numeric = (s1 * s1 * d2 - s2 * s2 * d1) / (s1 * s1 - s2 * s2);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

}  // namespace cseg::testing
