#include <cmath>

#include "cseg/simd/kernels.hpp"

namespace cseg::simd::scalar {

namespace {

void conv3_forward(const float* in, int cin, const float* w, int cout, float* out, const Conv3Geometry& g) {
  const std::int64_t qb = g.q_begin;
  const std::int64_t qe = g.q_end;
  for (int o = 0; o < cout; ++o) {
    float* dst = out + o * g.channel_stride;
    for (std::int64_t q = qb; q < qe; ++q) dst[q] = 0.0f;
    for (int i = 0; i < cin; ++i) {
      const float* src_c = in + i * g.channel_stride;
      const float* wk = w + (static_cast<std::int64_t>(o) * cin + i) * 27;
      for (int t = 0; t < 27; ++t) {
        const float wv = wk[t];
        const float* src = src_c + g.offsets[t];
        for (std::int64_t q = qb; q < qe; ++q) dst[q] += wv * src[q];
      }
    }
  }
}

void conv3_weight_grad(const float* dout, int cout, const float* in, int cin, float* dw, const Conv3Geometry& g) {
  for (int o = 0; o < cout; ++o) {
    const float* d = dout + o * g.channel_stride;
    for (int i = 0; i < cin; ++i) {
      const float* src_c = in + i * g.channel_stride;
      float* dwk = dw + (static_cast<std::int64_t>(o) * cin + i) * 27;
      for (int t = 0; t < 27; ++t) {
        const float* src = src_c + g.offsets[t];
        double acc = 0.0;
        for (std::int64_t q = g.q_begin; q < g.q_end; ++q) acc += static_cast<double>(d[q]) * src[q];
        dwk[t] += static_cast<float>(acc);
      }
    }
  }
}

void adam_update(double* param, const double* grad, double* m, double* v, std::size_t n, const AdamParams& p) {
  const double one_minus_b1 = 1.0 - p.beta1;
  const double one_minus_b2 = 1.0 - p.beta2;
  for (std::size_t k = 0; k < n; ++k) {
    const double g = grad[k] + p.weight_decay * param[k];
    m[k] = p.beta1 * m[k] + one_minus_b1 * g;
    v[k] = p.beta2 * v[k] + one_minus_b2 * g * g;
    const double m_hat = m[k] / p.bias_correction1;
    const double v_hat = v[k] / p.bias_correction2;
    param[k] = param[k] - (p.lr * m_hat) / (std::sqrt(v_hat) + p.eps);
  }
}

void ema_blend(double* teacher, const double* student, std::size_t n, double alpha) {
  const double beta = 1.0 - alpha;
  for (std::size_t k = 0; k < n; ++k) teacher[k] = alpha * teacher[k] + beta * student[k];
}

void sum_and_dot(const float* a, const float* b, std::size_t n, double* sums) {
  double s = 0.0;
  double d = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    s += a[k];
    d += static_cast<double>(a[k]) * b[k];
  }
  sums[0] = s;
  sums[1] = d;
}

}  // namespace

const KernelTable table{conv3_forward, conv3_weight_grad, adam_update, ema_blend, sum_and_dot};

}  // namespace cseg::simd::scalar
