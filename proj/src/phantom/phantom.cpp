#include "cseg/phantom/phantom.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "cseg/core/errors.hpp"
#include "cseg/core/random.hpp"
#include "cseg/core/series_io.hpp"

namespace cseg {

namespace {

using Vec3 = std::array<double, 3>;
using Mat3 = std::array<Vec3, 3>;

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 random_unit(Rng& rng) {
  for (;;) {
    Vec3 v{standard_normal(rng), standard_normal(rng), standard_normal(rng)};
    const double n = std::sqrt(dot(v, v));
    if (n > 1e-6) return {v[0] / n, v[1] / n, v[2] / n};
  }
}

// Rows are the ellipsoid's principal directions, from a random unit quaternion.
Mat3 random_rotation(Rng& rng) {
  double q[4];
  double n = 0.0;
  do {
    n = 0.0;
    for (double& c : q) {
      c = standard_normal(rng);
      n += c * c;
    }
  } while (n < 1e-12);
  n = std::sqrt(n);
  for (double& c : q) c /= n;
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  return Mat3{Vec3{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
              Vec3{2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
              Vec3{2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}};
}

struct Ellipsoid {
  Vec3 center{};
  Vec3 radii{};
  Mat3 axes{};

  double level(const Vec3& p) const {
    const Vec3 d{p[0] - center[0], p[1] - center[1], p[2] - center[2]};
    double s = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double u = dot(axes[static_cast<std::size_t>(a)], d) / radii[static_cast<std::size_t>(a)];
      s += u * u;
    }
    return s;
  }
};

// Sum of a few random plane waves, scaled to [-1, 1].
struct Texture {
  std::vector<Vec3> k;
  std::vector<double> phase;

  Texture(Rng& rng, int waves, double min_period, double max_period) {
    for (int w = 0; w < waves; ++w) {
      const Vec3 dir = random_unit(rng);
      const double f = kTwoPi / uniform(rng, min_period, max_period);
      k.push_back({dir[0] * f, dir[1] * f, dir[2] * f});
      phase.push_back(uniform(rng, 0.0, kTwoPi));
    }
  }

  double operator()(const Vec3& p) const {
    double s = 0.0;
    for (std::size_t w = 0; w < k.size(); ++w) s += std::sin(dot(k[w], p) + phase[w]);
    return s / static_cast<double>(k.size());
  }
};

// u(p, t) = A [0.6 sin(2 pi t / T1 + a) e1 + 0.4 sin(2 pi (n . p) / lambda + b) cos(2 pi t / T2 + c) e2],
// bounded by A everywhere.
struct Motion {
  double amplitude = 0.0;
  Vec3 e1{}, e2{}, n{};
  double t1 = 20.0, t2 = 20.0, wavelength = 48.0;
  double a = 0.0, b = 0.0, c = 0.0;

  Vec3 at(const Vec3& p, int t) const {
    const double s1 = 0.6 * std::sin(kTwoPi * t / t1 + a);
    const double s2 = 0.4 * std::sin(kTwoPi * dot(n, p) / wavelength + b) * std::cos(kTwoPi * t / t2 + c);
    return {amplitude * (s1 * e1[0] + s2 * e2[0]), amplitude * (s1 * e1[1] + s2 * e2[1]),
            amplitude * (s1 * e1[2] + s2 * e2[2])};
  }
};

}  // namespace

void PhantomConfig::validate() const {
  if (grid.h < 8 || grid.w < 8 || grid.d < 8) throw ConfigError("phantom grid dims must be >= 8, got " + grid.str());
  if (num_frames < 2) throw ConfigError("phantom num_frames must be >= 2");
  if (num_subjects < 1) throw ConfigError("phantom num_subjects must be >= 1");
  if (!(label_fraction > 0.0 && label_fraction <= 1.0)) throw ConfigError("phantom label_fraction must be in (0, 1]");
  if (motion_amplitude < 0.0) throw ConfigError("phantom motion_amplitude must be >= 0");
  if (noise_sigma < 0.0) throw ConfigError("phantom noise_sigma must be >= 0");
  for (double s : spacing) {
    if (!(s > 0.0)) throw ConfigError("phantom spacing must be positive");
  }
}

std::string phantom_subject_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom-%03d", index);
  return buf;
}

PhantomSubject generate_subject(const PhantomConfig& config, int subject_index) {
  config.validate();
  if (subject_index < 0) throw ArgumentError("generate_subject: negative subject index");
  const Shape3 g = config.grid;
  const Vec3 dims{static_cast<double>(g.h), static_cast<double>(g.w), static_cast<double>(g.d)};
  Rng rng(derive_seed(config.seed, {0x9A47, static_cast<std::uint64_t>(subject_index)}));

  Ellipsoid organ;
  for (std::size_t a = 0; a < 3; ++a) {
    organ.center[a] = dims[a] * uniform(rng, 0.42, 0.58);
    organ.radii[a] = dims[a] * uniform(rng, 0.2, 0.3);
  }
  organ.axes = random_rotation(rng);

  // Distractor sits on the opposite side of the grid center from the organ.
  Ellipsoid wall;
  const Vec3 dir = random_unit(rng);
  for (std::size_t a = 0; a < 3; ++a) {
    wall.radii[a] = dims[a] * uniform(rng, 0.08, 0.12);
    const double offset = organ.radii[a] + wall.radii[a] + 0.5;
    wall.center[a] = std::clamp(organ.center[a] + dir[a] * offset, wall.radii[a], dims[a] - 1.0 - wall.radii[a]);
  }
  wall.axes = random_rotation(rng);

  const Texture organ_tex(rng, 6, 4.0, 9.0);
  const Texture background_tex(rng, 4, 8.0, 16.0);

  Motion motion;
  motion.amplitude = config.motion_amplitude;
  motion.e1 = random_unit(rng);
  motion.e2 = random_unit(rng);
  motion.n = random_unit(rng);
  motion.t1 = uniform(rng, 15.0, 30.0);
  motion.t2 = uniform(rng, 15.0, 30.0);
  motion.wavelength = 1.5 * std::max({dims[0], dims[1], dims[2]});
  motion.a = uniform(rng, 0.0, kTwoPi);
  motion.b = uniform(rng, 0.0, kTwoPi);
  motion.c = uniform(rng, 0.0, kTwoPi);

  PhantomSubject out;
  out.series.subject_id = phantom_subject_id(subject_index);
  const int n_frames = config.num_frames;
  for (int t = 0; t < n_frames; ++t) {
    Volume3D frame(g, config.spacing);
    LabelMap truth(g, 2);
    Rng noise(derive_seed(config.seed, {0x7015E, static_cast<std::uint64_t>(subject_index), static_cast<std::uint64_t>(t)}));
    std::size_t p = 0;
    for (int i = 0; i < g.h; ++i) {
      for (int j = 0; j < g.w; ++j) {
        for (int k = 0; k < g.d; ++k, ++p) {
          const Vec3 base{static_cast<double>(i), static_cast<double>(j), static_cast<double>(k)};
          const Vec3 u = motion.at(base, t);
          out.max_displacement = std::max(out.max_displacement, std::sqrt(dot(u, u)));
          const Vec3 q{base[0] + u[0], base[1] + u[1], base[2] + u[2]};
          double v;
          if (organ.level(q) <= 1.0) {
            truth.data()[p] = 1;
            v = 0.7 + 0.2 * organ_tex(q);
          } else if (wall.level(q) <= 1.0) {
            v = 0.45 + 0.1 * organ_tex(q);
          } else {
            v = 0.15 + 0.08 * background_tex(q);
          }
          if (config.noise_sigma > 0.0) v += config.noise_sigma * standard_normal(noise);
          frame.data()[p] = static_cast<float>(v);
        }
      }
    }
    frame.normalize_min_max();
    out.series.frames.push_back(std::move(frame));
    out.truth.push_back(std::move(truth));
  }

  const int n_labeled = std::max(1, static_cast<int>(std::lround(config.label_fraction * n_frames)));
  std::vector<int> order(static_cast<std::size_t>(n_frames));
  for (int t = 0; t < n_frames; ++t) order[static_cast<std::size_t>(t)] = t;
  shuffle_range(order.begin(), order.end(), rng);
  for (int k = 0; k < std::min(n_labeled, n_frames); ++k) {
    const int t = order[static_cast<std::size_t>(k)];
    out.series.labels[t] = out.truth[static_cast<std::size_t>(t)];
  }
  out.series.validate();
  return out;
}

std::vector<PhantomSubject> generate_cohort(const PhantomConfig& config) {
  config.validate();
  std::vector<PhantomSubject> cohort;
  cohort.reserve(static_cast<std::size_t>(config.num_subjects));
  for (int s = 0; s < config.num_subjects; ++s) cohort.push_back(generate_subject(config, s));
  return cohort;
}

void write_cohort(const std::filesystem::path& out, const std::vector<PhantomSubject>& cohort) {
  for (const auto& subject : cohort) {
    io::save_series(out / "series" / subject.series.subject_id, subject.series);
    io::save_truth(out / "truth", subject.series.subject_id, subject.truth);
  }
}

}  // namespace cseg
