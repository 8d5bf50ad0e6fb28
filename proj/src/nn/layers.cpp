#include "cseg/nn/layers.hpp"

#include <algorithm>
#include <cmath>

#include "cseg/core/errors.hpp"
#include "cseg/simd/kernels.hpp"

namespace cseg::nn {

namespace {

struct AxisView {
  std::size_t outer;
  std::size_t n;
  std::size_t inner;
};

AxisView axis_view(const Shape3& s, int axis) {
  switch (axis) {
    case 0: return {1, static_cast<std::size_t>(s.h), static_cast<std::size_t>(s.w) * s.d};
    case 1: return {static_cast<std::size_t>(s.h), static_cast<std::size_t>(s.w), static_cast<std::size_t>(s.d)};
    default: return {static_cast<std::size_t>(s.h) * s.w, static_cast<std::size_t>(s.d), 1};
  }
}

Shape3 doubled(const Shape3& s, int axis) {
  Shape3 r = s;
  if (axis == 0) r.h *= 2;
  if (axis == 1) r.w *= 2;
  if (axis == 2) r.d *= 2;
  return r;
}

// Linear x2 resampling along one axis; out holds outer x 2n x inner values.
void upsample_axis(const float* in, const Shape3& s, int axis, float* out) {
  const AxisView v = axis_view(s, axis);
  const std::size_t n = v.n;
  const std::size_t m = v.inner;
  for (std::size_t a = 0; a < v.outer; ++a) {
    const float* src = in + a * n * m;
    float* dst = out + a * 2 * n * m;
    for (std::size_t k = 0; k < n; ++k) {
      const float* cur = src + k * m;
      const float* prev = src + (k == 0 ? 0 : k - 1) * m;
      const float* next = src + std::min(k + 1, n - 1) * m;
      const float cp = k == 0 ? 0.0f : 0.25f;
      const float cc = k == 0 ? 1.0f : 0.75f;
      float* even = dst + (2 * k) * m;
      float* odd = dst + (2 * k + 1) * m;
      for (std::size_t b = 0; b < m; ++b) {
        even[b] = cp * prev[b] + cc * cur[b];
        odd[b] = 0.75f * cur[b] + 0.25f * next[b];
      }
    }
  }
}

// Adjoint of upsample_axis: grad_in has outer x n x inner values (overwritten).
void upsample_axis_adjoint(const float* grad_out, const Shape3& in_shape, int axis, float* grad_in) {
  const AxisView v = axis_view(in_shape, axis);
  const std::size_t n = v.n;
  const std::size_t m = v.inner;
  for (std::size_t a = 0; a < v.outer; ++a) {
    const float* g = grad_out + a * 2 * n * m;
    float* dst = grad_in + a * n * m;
    for (std::size_t k = 0; k < n; ++k) {
      // Input k receives even_k, even_{k+1} (as its prev), odd_k and odd_{k-1} (as its next).
      const float* e0 = g + (2 * k) * m;
      const float* e1 = g + (k + 1 < n ? 2 * k + 2 : 2 * k) * m;
      const float* o0 = g + (2 * k + 1) * m;
      const float* o1 = g + (k >= 1 ? 2 * k - 1 : 2 * k + 1) * m;
      const float ce0 = k == 0 ? 1.0f : 0.75f;
      const float ce1 = k + 1 < n ? 0.25f : 0.0f;
      const float co0 = k + 1 == n ? 1.0f : 0.75f;
      const float co1 = k >= 1 ? 0.25f : 0.0f;
      float* out = dst + k * m;
      for (std::size_t b = 0; b < m; ++b) out[b] = ce0 * e0[b] + ce1 * e1[b] + co0 * o0[b] + co1 * o1[b];
    }
  }
}

}  // namespace

simd::Conv3Geometry conv3_geometry(const Shape3& inner) {
  const std::int64_t hp = inner.h + 2;
  const std::int64_t wp = inner.w + 2;
  const std::int64_t dp = inner.d + 2;
  simd::Conv3Geometry g;
  g.channel_stride = hp * wp * dp;
  g.q_begin = (wp + 1) * dp + 1;
  g.q_end = (static_cast<std::int64_t>(inner.h) * wp + inner.w) * dp + inner.d + 1;
  for (int dz = 0; dz < 3; ++dz) {
    for (int dy = 0; dy < 3; ++dy) {
      for (int dx = 0; dx < 3; ++dx) {
        g.offsets[static_cast<std::size_t>((dz * 3 + dy) * 3 + dx)] = (dz - 1) * wp * dp + (dy - 1) * dp + (dx - 1);
      }
    }
  }
  return g;
}

PaddedTensor pad(const Tensor& x) {
  const Shape3 s = x.shape();
  PaddedTensor p;
  p.channels = x.channels();
  p.inner = s;
  const std::size_t wp = static_cast<std::size_t>(s.w) + 2;
  const std::size_t dp = static_cast<std::size_t>(s.d) + 2;
  p.stride = static_cast<std::int64_t>((static_cast<std::size_t>(s.h) + 2) * wp * dp);
  p.data.assign(static_cast<std::size_t>(p.channels) * static_cast<std::size_t>(p.stride), 0.0f);
  const float* src = x.data().data();
  for (int c = 0; c < p.channels; ++c) {
    float* dst = p.data.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(p.stride);
    for (int i = 0; i < s.h; ++i) {
      for (int j = 0; j < s.w; ++j) {
        const float* row = src + (static_cast<std::size_t>(c) * s.voxels() + s.index(i, j, 0));
        std::copy(row, row + s.d, dst + ((static_cast<std::size_t>(i) + 1) * wp + j + 1) * dp + 1);
      }
    }
  }
  return p;
}

Tensor unpad(const float* padded, int channels, const Shape3& s) {
  Tensor out(channels, s);
  const std::size_t wp = static_cast<std::size_t>(s.w) + 2;
  const std::size_t dp = static_cast<std::size_t>(s.d) + 2;
  const std::size_t stride = (static_cast<std::size_t>(s.h) + 2) * wp * dp;
  float* dst = out.data().data();
  for (int c = 0; c < channels; ++c) {
    const float* src = padded + static_cast<std::size_t>(c) * stride;
    for (int i = 0; i < s.h; ++i) {
      for (int j = 0; j < s.w; ++j) {
        const float* row = src + ((static_cast<std::size_t>(i) + 1) * wp + j + 1) * dp + 1;
        std::copy(row, row + s.d, dst + static_cast<std::size_t>(c) * s.voxels() + s.index(i, j, 0));
      }
    }
  }
  return out;
}

Tensor conv3_forward(const PaddedTensor& in, std::span<const float> w, int cout) {
  if (w.size() != static_cast<std::size_t>(cout) * in.channels * 27) throw ArgumentError("conv3: weight size mismatch");
  const auto g = conv3_geometry(in.inner);
  std::vector<float> out(static_cast<std::size_t>(cout) * static_cast<std::size_t>(g.channel_stride), 0.0f);
  simd::kernels().conv3_forward(in.data.data(), in.channels, w.data(), cout, out.data(), g);
  return unpad(out.data(), cout, in.inner);
}

Tensor conv3_backward_input(const Tensor& grad_out, std::span<const float> w, int cin) {
  const int cout = grad_out.channels();
  if (w.size() != static_cast<std::size_t>(cout) * cin * 27) throw ArgumentError("conv3: weight size mismatch");
  // Adjoint = correlation with the spatially flipped, channel-transposed kernel.
  std::vector<float> wt(w.size());
  for (int o = 0; o < cout; ++o) {
    for (int i = 0; i < cin; ++i) {
      for (int t = 0; t < 27; ++t) {
        wt[(static_cast<std::size_t>(i) * cout + o) * 27 + t] = w[(static_cast<std::size_t>(o) * cin + i) * 27 + (26 - t)];
      }
    }
  }
  const PaddedTensor gp = pad(grad_out);
  const auto g = conv3_geometry(grad_out.shape());
  std::vector<float> out(static_cast<std::size_t>(cin) * static_cast<std::size_t>(g.channel_stride), 0.0f);
  simd::kernels().conv3_forward(gp.data.data(), cout, wt.data(), cin, out.data(), g);
  return unpad(out.data(), cin, grad_out.shape());
}

void conv3_backward_weight(const Tensor& grad_out, const PaddedTensor& in, std::span<float> grad_w) {
  const int cout = grad_out.channels();
  if (grad_w.size() != static_cast<std::size_t>(cout) * in.channels * 27) {
    throw ArgumentError("conv3: weight gradient size mismatch");
  }
  const PaddedTensor gp = pad(grad_out);
  simd::kernels().conv3_weight_grad(gp.data.data(), cout, in.data.data(), in.channels, grad_w.data(),
                                    conv3_geometry(in.inner));
}

Tensor instance_norm_forward(const Tensor& x, std::span<const float> gamma, std::span<const float> beta, double eps,
                             InstanceNormCache& cache) {
  const int c = x.channels();
  const std::size_t n = x.shape().voxels();
  cache.normalized = Tensor(c, x.shape());
  cache.inv_std.assign(static_cast<std::size_t>(c), 0.0);
  Tensor y(c, x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const auto xs = x.channel(ch);
    double sums[2];
    simd::kernels().sum_and_dot(xs.data(), xs.data(), n, sums);
    const double mean = sums[0] / static_cast<double>(n);
    const double var = std::max(0.0, sums[1] / static_cast<double>(n) - mean * mean);
    const double inv = 1.0 / std::sqrt(var + eps);
    cache.inv_std[static_cast<std::size_t>(ch)] = inv;
    float* xh = cache.normalized.channel(ch).data();
    float* ys = y.channel(ch).data();
    const float* xp = xs.data();
    const float scale = static_cast<float>(inv);
    const float shift = static_cast<float>(-mean * inv);
    const float g = gamma[static_cast<std::size_t>(ch)];
    const float b = beta[static_cast<std::size_t>(ch)];
    for (std::size_t v = 0; v < n; ++v) {
      xh[v] = xp[v] * scale + shift;
      ys[v] = g * xh[v] + b;
    }
  }
  return y;
}

Tensor instance_norm_backward(const Tensor& grad_y, const InstanceNormCache& cache, std::span<const float> gamma,
                              std::span<float> grad_gamma, std::span<float> grad_beta) {
  const int c = grad_y.channels();
  const std::size_t n = grad_y.shape().voxels();
  Tensor dx(c, grad_y.shape());
  for (int ch = 0; ch < c; ++ch) {
    const float* dy = grad_y.channel(ch).data();
    const float* xh = cache.normalized.channel(ch).data();
    double sums[2];
    simd::kernels().sum_and_dot(dy, xh, n, sums);
    const double sum_dy = sums[0];
    const double sum_dy_xh = sums[1];
    grad_gamma[static_cast<std::size_t>(ch)] += static_cast<float>(sum_dy_xh);
    grad_beta[static_cast<std::size_t>(ch)] += static_cast<float>(sum_dy);
    const double g = gamma[static_cast<std::size_t>(ch)];
    const double mean_d = g * sum_dy / static_cast<double>(n);
    const double mean_dx = g * sum_dy_xh / static_cast<double>(n);
    const double inv = cache.inv_std[static_cast<std::size_t>(ch)];
    float* out = dx.channel(ch).data();
    const float a = static_cast<float>(inv * g);
    const float c0 = static_cast<float>(inv * mean_d);
    const float c1 = static_cast<float>(inv * mean_dx);
    for (std::size_t v = 0; v < n; ++v) out[v] = a * dy[v] - c0 - xh[v] * c1;
  }
  return dx;
}

void leaky_relu_inplace(Tensor& x, float slope) {
  float* p = x.data().data();
  const std::size_t n = x.size();
  for (std::size_t k = 0; k < n; ++k) p[k] = std::max(p[k], 0.0f) + slope * std::min(p[k], 0.0f);
}

void leaky_relu_backward_inplace(Tensor& grad, const Tensor& pre, float slope) {
  float* g = grad.data().data();
  const float* p = pre.data().data();
  const std::size_t n = grad.size();
  for (std::size_t k = 0; k < n; ++k) g[k] *= p[k] > 0.0f ? 1.0f : slope;
}

Tensor max_pool2_forward(const Tensor& x, std::vector<std::uint32_t>& argmax) {
  const Shape3 s = x.shape();
  if (s.h % 2 || s.w % 2 || s.d % 2) throw ArgumentError("max_pool2: extents must be even, got " + s.str());
  const Shape3 o{s.h / 2, s.w / 2, s.d / 2};
  Tensor out(x.channels(), o);
  argmax.assign(out.size(), 0);
  for (int c = 0; c < x.channels(); ++c) {
    const auto src = x.channel(c);
    auto dst = out.channel(c);
    for (int i = 0; i < o.h; ++i) {
      for (int j = 0; j < o.w; ++j) {
        for (int k = 0; k < o.d; ++k) {
          std::uint32_t best = static_cast<std::uint32_t>(s.index(2 * i, 2 * j, 2 * k));
          float best_v = src[best];
          for (int a = 0; a < 2; ++a) {
            for (int b = 0; b < 2; ++b) {
              for (int e = 0; e < 2; ++e) {
                const auto idx = static_cast<std::uint32_t>(s.index(2 * i + a, 2 * j + b, 2 * k + e));
                if (src[idx] > best_v) {
                  best_v = src[idx];
                  best = idx;
                }
              }
            }
          }
          const std::size_t oi = o.index(i, j, k);
          dst[oi] = best_v;
          argmax[static_cast<std::size_t>(c) * o.voxels() + oi] = best;
        }
      }
    }
  }
  return out;
}

Tensor max_pool2_backward(const Tensor& grad_out, const std::vector<std::uint32_t>& argmax, const Shape3& in_shape) {
  Tensor dx(grad_out.channels(), in_shape);
  const std::size_t no = grad_out.shape().voxels();
  for (int c = 0; c < grad_out.channels(); ++c) {
    const auto g = grad_out.channel(c);
    auto d = dx.channel(c);
    for (std::size_t v = 0; v < no; ++v) d[argmax[static_cast<std::size_t>(c) * no + v]] += g[v];
  }
  return dx;
}

Tensor upsample2_forward(const Tensor& x) {
  Shape3 s = x.shape();
  const int c = x.channels();
  std::vector<float> cur(x.data().begin(), x.data().end());
  for (int axis = 0; axis < 3; ++axis) {
    const Shape3 next_shape = doubled(s, axis);
    std::vector<float> next(static_cast<std::size_t>(c) * next_shape.voxels());
    for (int ch = 0; ch < c; ++ch) {
      upsample_axis(cur.data() + static_cast<std::size_t>(ch) * s.voxels(), s, axis,
                    next.data() + static_cast<std::size_t>(ch) * next_shape.voxels());
    }
    cur = std::move(next);
    s = next_shape;
  }
  return Tensor(c, s, std::move(cur));
}

Tensor upsample2_backward(const Tensor& grad_out, const Shape3& in_shape) {
  const int c = grad_out.channels();
  // Shapes after each forward axis pass: in -> (2h) -> (2h,2w) -> (2h,2w,2d).
  const Shape3 s0 = in_shape;
  const Shape3 s1 = doubled(s0, 0);
  const Shape3 s2 = doubled(s1, 1);
  const Shape3 stages[3] = {s0, s1, s2};
  std::vector<float> cur(grad_out.data().begin(), grad_out.data().end());
  for (int axis = 2; axis >= 0; --axis) {
    const Shape3 in_s = stages[axis];
    const Shape3 out_s = doubled(in_s, axis);
    std::vector<float> prev(static_cast<std::size_t>(c) * in_s.voxels());
    for (int ch = 0; ch < c; ++ch) {
      upsample_axis_adjoint(cur.data() + static_cast<std::size_t>(ch) * out_s.voxels(), in_s, axis,
                            prev.data() + static_cast<std::size_t>(ch) * in_s.voxels());
    }
    cur = std::move(prev);
  }
  return Tensor(c, in_shape, std::move(cur));
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ArgumentError("concat_channels: shape mismatch");
  std::vector<float> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  return Tensor(a.channels() + b.channels(), a.shape(), std::move(data));
}

void split_channels(const Tensor& ab, int channels_a, Tensor& a, Tensor& b) {
  const std::size_t n = ab.shape().voxels();
  const auto split = ab.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(channels_a) * n);
  a = Tensor(channels_a, ab.shape(), std::vector<float>(ab.data().begin(), split));
  b = Tensor(ab.channels() - channels_a, ab.shape(), std::vector<float>(split, ab.data().end()));
}

Tensor conv1_forward(const Tensor& x, std::span<const float> w, std::span<const float> bias, int cout) {
  const int cin = x.channels();
  const std::size_t n = x.shape().voxels();
  Tensor y(cout, x.shape());
  for (int o = 0; o < cout; ++o) {
    auto dst = y.channel(o);
    std::fill(dst.begin(), dst.end(), bias[static_cast<std::size_t>(o)]);
    for (int i = 0; i < cin; ++i) {
      const float wv = w[static_cast<std::size_t>(o) * cin + i];
      const auto src = x.channel(i);
      for (std::size_t v = 0; v < n; ++v) dst[v] += wv * src[v];
    }
  }
  return y;
}

Tensor conv1_backward(const Tensor& grad_out, const Tensor& x, std::span<const float> w, std::span<float> grad_w,
                      std::span<float> grad_bias) {
  const int cin = x.channels();
  const int cout = grad_out.channels();
  const std::size_t n = x.shape().voxels();
  Tensor dx(cin, x.shape());
  for (int o = 0; o < cout; ++o) {
    const auto g = grad_out.channel(o);
    double sb = 0.0;
    for (float v : g) sb += v;
    grad_bias[static_cast<std::size_t>(o)] += static_cast<float>(sb);
    for (int i = 0; i < cin; ++i) {
      const auto src = x.channel(i);
      auto d = dx.channel(i);
      const float wv = w[static_cast<std::size_t>(o) * cin + i];
      double sw = 0.0;
      for (std::size_t v = 0; v < n; ++v) {
        sw += static_cast<double>(g[v]) * src[v];
        d[v] += wv * g[v];
      }
      grad_w[static_cast<std::size_t>(o) * cin + i] += static_cast<float>(sw);
    }
  }
  return dx;
}

Tensor resize_to(const Tensor& x, const Shape3& target) {
  const Shape3 s = x.shape();
  if (s == target) return x;
  Tensor out(x.channels(), target);
  const int h = std::min(s.h, target.h);
  const int w = std::min(s.w, target.w);
  const int d = std::min(s.d, target.d);
  for (int c = 0; c < x.channels(); ++c) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        for (int k = 0; k < d; ++k) out.at(c, i, j, k) = x.at(c, i, j, k);
      }
    }
  }
  return out;
}

}  // namespace cseg::nn
