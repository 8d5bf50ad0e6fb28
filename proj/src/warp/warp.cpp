#include "cseg/warp/warp.hpp"

#include <algorithm>
#include <cmath>

#include "cseg/core/errors.hpp"
#include "cseg/core/series_io.hpp"

namespace cseg {

namespace {

struct AxisSample {
  int i0 = 0;
  int i1 = 0;
  double f = 0.0;
  bool inside = true;  // unclamped position within [0, n-1]
};

AxisSample axis_sample(double s, int n) {
  AxisSample a;
  a.inside = s >= 0.0 && s <= static_cast<double>(n - 1);
  const double c = std::clamp(s, 0.0, static_cast<double>(n - 1));
  if (n == 1) return a;
  a.i0 = std::min(static_cast<int>(std::floor(c)), n - 2);
  a.i1 = a.i0 + 1;
  a.f = c - a.i0;
  return a;
}

int nearest_index(double s, int n) {
  const double c = std::clamp(s, 0.0, static_cast<double>(n - 1));
  return std::min(static_cast<int>(std::floor(c + 0.5)), n - 1);
}

void check_shape(const DisplacementField& field, const Shape3& shape, const char* what) {
  if (field.channels() != 3) throw ArgumentError(std::string(what) + ": field must have 3 channels");
  if (field.shape() != shape) {
    throw ArgumentError(std::string(what) + ": field shape " + field.shape().str() + " does not match " + shape.str());
  }
}

// Visits every voxel with its three axis samples.
template <class F>
void for_each_sample(const DisplacementField& field, F&& f) {
  const Shape3 s = field.shape();
  const std::size_t nv = s.voxels();
  const float* u0 = field.channel(0).data();
  const float* u1 = field.channel(1).data();
  const float* u2 = field.channel(2).data();
  std::size_t p = 0;
  for (int i = 0; i < s.h; ++i) {
    for (int j = 0; j < s.w; ++j) {
      for (int k = 0; k < s.d; ++k, ++p) {
        const AxisSample a = axis_sample(i + static_cast<double>(u0[p]), s.h);
        const AxisSample b = axis_sample(j + static_cast<double>(u1[p]), s.w);
        const AxisSample c = axis_sample(k + static_cast<double>(u2[p]), s.d);
        f(p, a, b, c);
      }
    }
  }
  (void)nv;
}

void warp_channel(const DisplacementField& field, const float* src, float* dst, Interp interp) {
  const Shape3 s = field.shape();
  if (interp == Interp::nearest) {
    const float* u0 = field.channel(0).data();
    const float* u1 = field.channel(1).data();
    const float* u2 = field.channel(2).data();
    std::size_t p = 0;
    for (int i = 0; i < s.h; ++i) {
      for (int j = 0; j < s.w; ++j) {
        for (int k = 0; k < s.d; ++k, ++p) {
          dst[p] = src[s.index(nearest_index(i + static_cast<double>(u0[p]), s.h),
                               nearest_index(j + static_cast<double>(u1[p]), s.w),
                               nearest_index(k + static_cast<double>(u2[p]), s.d))];
        }
      }
    }
    return;
  }
  for_each_sample(field, [&](std::size_t p, const AxisSample& a, const AxisSample& b, const AxisSample& c) {
    const double v000 = src[s.index(a.i0, b.i0, c.i0)];
    const double v001 = src[s.index(a.i0, b.i0, c.i1)];
    const double v010 = src[s.index(a.i0, b.i1, c.i0)];
    const double v011 = src[s.index(a.i0, b.i1, c.i1)];
    const double v100 = src[s.index(a.i1, b.i0, c.i0)];
    const double v101 = src[s.index(a.i1, b.i0, c.i1)];
    const double v110 = src[s.index(a.i1, b.i1, c.i0)];
    const double v111 = src[s.index(a.i1, b.i1, c.i1)];
    const double x00 = (1.0 - c.f) * v000 + c.f * v001;
    const double x01 = (1.0 - c.f) * v010 + c.f * v011;
    const double x10 = (1.0 - c.f) * v100 + c.f * v101;
    const double x11 = (1.0 - c.f) * v110 + c.f * v111;
    const double y0 = (1.0 - b.f) * x00 + b.f * x01;
    const double y1 = (1.0 - b.f) * x10 + b.f * x11;
    dst[p] = static_cast<float>((1.0 - a.f) * y0 + a.f * y1);
  });
}

// Clipped centered box sum along every axis.
std::vector<double> box_sum(const std::vector<double>& in, const Shape3& s, const Window3& window) {
  std::vector<double> cur = in;
  std::vector<double> next(in.size());
  std::vector<double> prefix;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = s.extent(axis);
    const int r = window[static_cast<std::size_t>(axis)] / 2;
    const std::size_t inner = axis == 0 ? static_cast<std::size_t>(s.w) * s.d : (axis == 1 ? s.d : 1);
    const std::size_t outer = axis == 0 ? 1 : (axis == 1 ? static_cast<std::size_t>(s.h) : static_cast<std::size_t>(s.h) * s.w);
    prefix.assign(static_cast<std::size_t>(n) + 1, 0.0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t b = 0; b < inner; ++b) {
        const std::size_t base = o * static_cast<std::size_t>(n) * inner + b;
        for (int t = 0; t < n; ++t) prefix[static_cast<std::size_t>(t) + 1] = prefix[static_cast<std::size_t>(t)] + cur[base + static_cast<std::size_t>(t) * inner];
        for (int t = 0; t < n; ++t) {
          const int lo = std::max(0, t - r);
          const int hi = std::min(n - 1, t + r);
          next[base + static_cast<std::size_t>(t) * inner] = prefix[static_cast<std::size_t>(hi) + 1] - prefix[static_cast<std::size_t>(lo)];
        }
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

double window_count(const Shape3& s, const Window3& window, int i, int j, int k) {
  auto axis = [](int t, int n, int w) {
    const int r = w / 2;
    return std::min(n - 1, t + r) - std::max(0, t - r) + 1;
  };
  return static_cast<double>(axis(i, s.h, window[0])) * axis(j, s.w, window[1]) * axis(k, s.d, window[2]);
}

}  // namespace

DisplacementField::DisplacementField(ChannelVolume v) : ChannelVolume(std::move(v)) {
  if (channels_ != 3) throw ValidationError("DisplacementField: expected 3 channels, got " + std::to_string(channels_));
}

void DisplacementField::validate() const {
  if (channels_ != 3) throw ValidationError("DisplacementField: expected 3 channels");
  if (!all_finite()) throw ValidationError("DisplacementField: non-finite displacement");
}

Volume3D warp(const DisplacementField& field, const Volume3D& v, Interp interp) {
  check_shape(field, v.shape(), "warp");
  Volume3D out(v.shape(), v.spacing());
  warp_channel(field, v.data().data(), out.data().data(), interp);
  return out;
}

ChannelVolume warp_channels(const DisplacementField& field, const ChannelVolume& v, Interp interp) {
  check_shape(field, v.shape(), "warp");
  ChannelVolume out(v.channels(), v.shape());
  for (int c = 0; c < v.channels(); ++c) warp_channel(field, v.channel(c).data(), out.channel(c).data(), interp);
  return out;
}

LogitMap warp(const DisplacementField& field, const LogitMap& z, Interp interp) {
  return LogitMap(warp_channels(field, z, interp));
}

LabelMap warp(const DisplacementField& field, const LabelMap& y) {
  check_shape(field, y.shape(), "warp");
  const Shape3 s = y.shape();
  LabelMap out(s, y.num_classes());
  const float* u0 = field.channel(0).data();
  const float* u1 = field.channel(1).data();
  const float* u2 = field.channel(2).data();
  std::size_t p = 0;
  for (int i = 0; i < s.h; ++i) {
    for (int j = 0; j < s.w; ++j) {
      for (int k = 0; k < s.d; ++k, ++p) {
        out.data()[p] = y(nearest_index(i + static_cast<double>(u0[p]), s.h),
                          nearest_index(j + static_cast<double>(u1[p]), s.w),
                          nearest_index(k + static_cast<double>(u2[p]), s.d));
      }
    }
  }
  return out;
}

VoxelMask warp_valid_mask(const DisplacementField& field) {
  VoxelMask mask(field.shape().voxels(), 0);
  for_each_sample(field, [&](std::size_t p, const AxisSample& a, const AxisSample& b, const AxisSample& c) {
    mask[p] = a.inside && b.inside && c.inside ? 1 : 0;
  });
  return mask;
}

void warp_adjoint_values(const DisplacementField& field, std::span<const float> grad_out, std::span<float> grad_v) {
  const Shape3 s = field.shape();
  if (grad_out.size() != s.voxels() || grad_v.size() != s.voxels()) throw ArgumentError("warp_adjoint_values: size mismatch");
  for_each_sample(field, [&](std::size_t p, const AxisSample& a, const AxisSample& b, const AxisSample& c) {
    const double g = grad_out[p];
    if (g == 0.0) return;
    const double wa[2] = {1.0 - a.f, a.f};
    const double wb[2] = {1.0 - b.f, b.f};
    const double wc[2] = {1.0 - c.f, c.f};
    const int ia[2] = {a.i0, a.i1};
    const int ib[2] = {b.i0, b.i1};
    const int ic[2] = {c.i0, c.i1};
    for (int x = 0; x < 2; ++x) {
      for (int y = 0; y < 2; ++y) {
        for (int z = 0; z < 2; ++z) {
          grad_v[s.index(ia[x], ib[y], ic[z])] += static_cast<float>(g * wa[x] * wb[y] * wc[z]);
        }
      }
    }
  });
}

void warp_adjoint_field(const DisplacementField& field, std::span<const float> v, std::span<const double> grad_out,
                        std::span<double> grad_field) {
  const Shape3 s = field.shape();
  const std::size_t nv = s.voxels();
  if (v.size() != nv || grad_out.size() != nv || grad_field.size() != 3 * nv) {
    throw ArgumentError("warp_adjoint_field: size mismatch");
  }
  for_each_sample(field, [&](std::size_t p, const AxisSample& a, const AxisSample& b, const AxisSample& c) {
    const double g = grad_out[p];
    if (g == 0.0) return;
    double val[2][2][2];
    const int ia[2] = {a.i0, a.i1};
    const int ib[2] = {b.i0, b.i1};
    const int ic[2] = {c.i0, c.i1};
    for (int x = 0; x < 2; ++x)
      for (int y = 0; y < 2; ++y)
        for (int z = 0; z < 2; ++z) val[x][y][z] = v[s.index(ia[x], ib[y], ic[z])];
    const double wa[2] = {1.0 - a.f, a.f};
    const double wb[2] = {1.0 - b.f, b.f};
    const double wc[2] = {1.0 - c.f, c.f};
    const double da[2] = {-1.0, 1.0};
    double ga = 0.0;
    double gb = 0.0;
    double gc = 0.0;
    for (int x = 0; x < 2; ++x) {
      for (int y = 0; y < 2; ++y) {
        for (int z = 0; z < 2; ++z) {
          ga += da[x] * wb[y] * wc[z] * val[x][y][z];
          gb += wa[x] * da[y] * wc[z] * val[x][y][z];
          gc += wa[x] * wb[y] * da[z] * val[x][y][z];
        }
      }
    }
    // Clamped or single-voxel axes do not move with the field.
    if (a.inside && s.h > 1) grad_field[p] += g * ga;
    if (b.inside && s.w > 1) grad_field[nv + p] += g * gb;
    if (c.inside && s.d > 1) grad_field[2 * nv + p] += g * gc;
  });
}

double local_ncc(const Volume3D& a, const Volume3D& b, Window3 window, double eps) {
  return local_ncc_grad(a, b, nullptr, nullptr, window, eps);
}

double local_ncc_grad(const Volume3D& a, const Volume3D& b, std::vector<double>* grad_a, std::vector<double>* grad_b,
                      Window3 window, double eps) {
  const Shape3 s = a.shape();
  if (b.shape() != s) throw ArgumentError("local_ncc: shape mismatch " + s.str() + " vs " + b.shape().str());
  for (int w : window) {
    if (w < 1 || w % 2 == 0) throw ArgumentError("local_ncc: window extents must be odd and positive");
  }
  const std::size_t nv = s.voxels();
  std::vector<double> va(nv), vb(nv), aa(nv), bb(nv), ab(nv);
  for (std::size_t p = 0; p < nv; ++p) {
    va[p] = a.data()[p];
    vb[p] = b.data()[p];
    aa[p] = va[p] * va[p];
    bb[p] = vb[p] * vb[p];
    ab[p] = va[p] * vb[p];
  }
  const auto sa = box_sum(va, s, window);
  const auto sb = box_sum(vb, s, window);
  const auto saa = box_sum(aa, s, window);
  const auto sbb = box_sum(bb, s, window);
  const auto sab = box_sum(ab, s, window);

  const bool want_grad = grad_a || grad_b;
  std::vector<double> ca, cb, caa, cbb, cab;
  if (want_grad) {
    ca.resize(nv);
    cb.resize(nv);
    caa.resize(nv);
    cbb.resize(nv);
    cab.resize(nv);
  }
  double total = 0.0;
  std::size_t p = 0;
  for (int i = 0; i < s.h; ++i) {
    for (int j = 0; j < s.w; ++j) {
      for (int k = 0; k < s.d; ++k, ++p) {
        const double n = window_count(s, window, i, j, k);
        const double cross = sab[p] - sa[p] * sb[p] / n;
        const double var_a = std::max(0.0, saa[p] - sa[p] * sa[p] / n);
        const double var_b = std::max(0.0, sbb[p] - sb[p] * sb[p] / n);
        const double den = var_a * var_b + eps;
        const double inv = 1.0 / std::sqrt(den);
        const double r = cross * inv;
        total += r;
        if (want_grad) {
          cab[p] = inv;
          caa[p] = -r * var_b / (2.0 * den);
          cbb[p] = -r * var_a / (2.0 * den);
          ca[p] = -sb[p] * inv / n + r * var_b * sa[p] / (den * n);
          cb[p] = -sa[p] * inv / n + r * var_a * sb[p] / (den * n);
        }
      }
    }
  }
  const double scale = 1.0 / static_cast<double>(nv);
  if (want_grad) {
    const auto box_cab = box_sum(cab, s, window);
    if (grad_a) {
      const auto box_ca = box_sum(ca, s, window);
      const auto box_caa = box_sum(caa, s, window);
      grad_a->assign(nv, 0.0);
      for (std::size_t q = 0; q < nv; ++q) {
        (*grad_a)[q] = scale * (box_ca[q] + 2.0 * va[q] * box_caa[q] + vb[q] * box_cab[q]);
      }
    }
    if (grad_b) {
      const auto box_cb = box_sum(cb, s, window);
      const auto box_cbb = box_sum(cbb, s, window);
      grad_b->assign(nv, 0.0);
      for (std::size_t q = 0; q < nv; ++q) {
        (*grad_b)[q] = scale * (box_cb[q] + 2.0 * vb[q] * box_cbb[q] + va[q] * box_cab[q]);
      }
    }
  }
  return total * scale;
}

double grad_smoothness(const DisplacementField& field) {
  std::vector<double> unused(field.size());
  return grad_smoothness_grad(field, unused);
}

double grad_smoothness_grad(const DisplacementField& field, std::span<double> grad) {
  const Shape3 s = field.shape();
  const std::size_t nv = s.voxels();
  if (grad.size() != field.size()) throw ArgumentError("grad_smoothness: gradient size mismatch");
  const int c_count = field.channels();
  double total = 0.0;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = s.extent(axis);
    if (n < 2) continue;
    const std::size_t stride = axis == 0 ? static_cast<std::size_t>(s.w) * s.d : (axis == 1 ? s.d : 1);
    const double count = static_cast<double>(c_count) * static_cast<double>(nv / static_cast<std::size_t>(n)) * (n - 1);
    double sum = 0.0;
    for (int c = 0; c < c_count; ++c) {
      const float* u = field.channel(c).data();
      double* g = grad.data() + static_cast<std::size_t>(c) * nv;
      std::size_t p = 0;
      for (int i = 0; i < s.h; ++i) {
        for (int j = 0; j < s.w; ++j) {
          for (int k = 0; k < s.d; ++k, ++p) {
            const int t = axis == 0 ? i : (axis == 1 ? j : k);
            if (t == n - 1) continue;
            const double d = static_cast<double>(u[p + stride]) - u[p];
            sum += d * d;
            g[p + stride] += 2.0 * d / count;
            g[p] -= 2.0 * d / count;
          }
        }
      }
    }
    total += sum / count;
  }
  return total;
}

RegistrationLoss registration_loss(const Volume3D& fixed, const Volume3D& moving, const DisplacementField& field,
                                   double lambda_reg, Window3 window) {
  if (fixed.shape() != moving.shape()) throw ArgumentError("registration_loss: fixed/moving shape mismatch");
  const Volume3D warped = warp(field, moving, Interp::trilinear);
  RegistrationLoss r;
  r.ncc = local_ncc(fixed, warped, window);
  r.smoothness = grad_smoothness(field);
  r.total = -r.ncc + lambda_reg * r.smoothness;
  return r;
}

RegistrationLoss registration_loss_grad(const Volume3D& fixed, const Volume3D& moving, const DisplacementField& field,
                                        double lambda_reg, std::span<double> grad_field, Window3 window) {
  if (fixed.shape() != moving.shape()) throw ArgumentError("registration_loss: fixed/moving shape mismatch");
  if (grad_field.size() != field.size()) throw ArgumentError("registration_loss: gradient size mismatch");
  const Volume3D warped = warp(field, moving, Interp::trilinear);
  std::vector<double> g_warped;
  RegistrationLoss r;
  r.ncc = local_ncc_grad(fixed, warped, nullptr, &g_warped, window);
  for (double& g : g_warped) g = -g;
  warp_adjoint_field(field, moving.data(), g_warped, grad_field);
  std::vector<double> g_smooth(field.size(), 0.0);
  r.smoothness = grad_smoothness_grad(field, g_smooth);
  for (std::size_t k = 0; k < g_smooth.size(); ++k) grad_field[k] += lambda_reg * g_smooth[k];
  r.total = -r.ncc + lambda_reg * r.smoothness;
  return r;
}

namespace io {

void save_field(const std::filesystem::path& raw_path, const DisplacementField& field) { save_channels(raw_path, field); }

DisplacementField load_field(const std::filesystem::path& raw_path) { return DisplacementField(load_channels(raw_path)); }

}  // namespace io

}  // namespace cseg
