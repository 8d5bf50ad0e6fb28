// Compiled with -mavx2 -mfma; only reached when CPUID reports both.
#include <immintrin.h>

#include <cmath>

#include "cseg/simd/kernels.hpp"

namespace cseg::simd::avx2 {

namespace {

inline float hsum(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 0x1));
  return _mm_cvtss_f32(lo);
}

// OB output channels x 24 consecutive positions per register tile.
template <int OB>
void conv3_forward_block(const float* in, int cin, const float* w, int o0, float* out, const Conv3Geometry& g) {
  const std::int64_t qb = g.q_begin;
  const std::int64_t qe = g.q_end;
  const std::int64_t stride = g.channel_stride;
  const float* wbase[OB];
  for (int b = 0; b < OB; ++b) wbase[b] = w + static_cast<std::int64_t>(o0 + b) * cin * 27;

  std::int64_t q = qb;
  for (; q + 24 <= qe; q += 24) {
    __m256 acc[OB][3];
    for (int b = 0; b < OB; ++b) acc[b][0] = acc[b][1] = acc[b][2] = _mm256_setzero_ps();
    for (int i = 0; i < cin; ++i) {
      const float* src_c = in + i * stride + q;
      const std::int64_t wi = static_cast<std::int64_t>(i) * 27;
      for (int t = 0; t < 27; ++t) {
        const float* src = src_c + g.offsets[t];
        const __m256 x0 = _mm256_loadu_ps(src);
        const __m256 x1 = _mm256_loadu_ps(src + 8);
        const __m256 x2 = _mm256_loadu_ps(src + 16);
        for (int b = 0; b < OB; ++b) {
          const __m256 wv = _mm256_broadcast_ss(wbase[b] + wi + t);
          acc[b][0] = _mm256_fmadd_ps(wv, x0, acc[b][0]);
          acc[b][1] = _mm256_fmadd_ps(wv, x1, acc[b][1]);
          acc[b][2] = _mm256_fmadd_ps(wv, x2, acc[b][2]);
        }
      }
    }
    for (int b = 0; b < OB; ++b) {
      float* dst = out + static_cast<std::int64_t>(o0 + b) * stride + q;
      _mm256_storeu_ps(dst, acc[b][0]);
      _mm256_storeu_ps(dst + 8, acc[b][1]);
      _mm256_storeu_ps(dst + 16, acc[b][2]);
    }
  }
  for (; q < qe; ++q) {
    float acc[OB] = {};
    for (int i = 0; i < cin; ++i) {
      const float* src_c = in + i * stride + q;
      const std::int64_t wi = static_cast<std::int64_t>(i) * 27;
      for (int t = 0; t < 27; ++t) {
        const float x = src_c[g.offsets[t]];
        for (int b = 0; b < OB; ++b) acc[b] = std::fma(wbase[b][wi + t], x, acc[b]);
      }
    }
    for (int b = 0; b < OB; ++b) out[static_cast<std::int64_t>(o0 + b) * stride + q] = acc[b];
  }
}

void conv3_forward(const float* in, int cin, const float* w, int cout, float* out, const Conv3Geometry& g) {
  int o = 0;
  for (; o + 4 <= cout; o += 4) conv3_forward_block<4>(in, cin, w, o, out, g);
  switch (cout - o) {
    case 3: conv3_forward_block<3>(in, cin, w, o, out, g); break;
    case 2: conv3_forward_block<2>(in, cin, w, o, out, g); break;
    case 1: conv3_forward_block<1>(in, cin, w, o, out, g); break;
    default: break;
  }
}

// OB output channels x the three dx taps of one (dz, dy) row, 8 positions per step.
template <int OB>
void conv3_weight_grad_block(const float* dout, int o0, const float* in, int cin, float* dw, const Conv3Geometry& g) {
  const std::int64_t stride = g.channel_stride;
  const std::int64_t qb = g.q_begin;
  const std::int64_t qe = g.q_end;
  const std::int64_t n_vec = (qe - qb) / 8;
  const std::int64_t q_vec_end = qb + n_vec * 8;
  const float* d[OB];
  for (int b = 0; b < OB; ++b) d[b] = dout + static_cast<std::int64_t>(o0 + b) * stride;

  for (int i = 0; i < cin; ++i) {
    const float* src_c = in + i * stride;
    for (int row = 0; row < 9; ++row) {
      const float* s0 = src_c + g.offsets[row * 3 + 0];
      const float* s1 = src_c + g.offsets[row * 3 + 1];
      const float* s2 = src_c + g.offsets[row * 3 + 2];
      __m256 acc[OB][3];
      for (int b = 0; b < OB; ++b) acc[b][0] = acc[b][1] = acc[b][2] = _mm256_setzero_ps();
      for (std::int64_t q = qb; q < q_vec_end; q += 8) {
        const __m256 x0 = _mm256_loadu_ps(s0 + q);
        const __m256 x1 = _mm256_loadu_ps(s1 + q);
        const __m256 x2 = _mm256_loadu_ps(s2 + q);
        for (int b = 0; b < OB; ++b) {
          const __m256 dv = _mm256_loadu_ps(d[b] + q);
          acc[b][0] = _mm256_fmadd_ps(dv, x0, acc[b][0]);
          acc[b][1] = _mm256_fmadd_ps(dv, x1, acc[b][1]);
          acc[b][2] = _mm256_fmadd_ps(dv, x2, acc[b][2]);
        }
      }
      for (int b = 0; b < OB; ++b) {
        float tail[3] = {0.0f, 0.0f, 0.0f};
        for (std::int64_t q = q_vec_end; q < qe; ++q) {
          tail[0] += d[b][q] * s0[q];
          tail[1] += d[b][q] * s1[q];
          tail[2] += d[b][q] * s2[q];
        }
        float* dwk = dw + (static_cast<std::int64_t>(o0 + b) * cin + i) * 27 + row * 3;
        dwk[0] += hsum(acc[b][0]) + tail[0];
        dwk[1] += hsum(acc[b][1]) + tail[1];
        dwk[2] += hsum(acc[b][2]) + tail[2];
      }
    }
  }
}

void conv3_weight_grad(const float* dout, int cout, const float* in, int cin, float* dw, const Conv3Geometry& g) {
  int o = 0;
  for (; o + 4 <= cout; o += 4) conv3_weight_grad_block<4>(dout, o, in, cin, dw, g);
  switch (cout - o) {
    case 3: conv3_weight_grad_block<3>(dout, o, in, cin, dw, g); break;
    case 2: conv3_weight_grad_block<2>(dout, o, in, cin, dw, g); break;
    case 1: conv3_weight_grad_block<1>(dout, o, in, cin, dw, g); break;
    default: break;
  }
}

// Unfused multiply/add sequence mirrors the scalar reference so results match bit for bit.
void adam_update(double* param, const double* grad, double* m, double* v, std::size_t n, const AdamParams& p) {
  const __m256d b1 = _mm256_set1_pd(p.beta1);
  const __m256d b2 = _mm256_set1_pd(p.beta2);
  const __m256d omb1 = _mm256_set1_pd(1.0 - p.beta1);
  const __m256d omb2 = _mm256_set1_pd(1.0 - p.beta2);
  const __m256d wd = _mm256_set1_pd(p.weight_decay);
  const __m256d bc1 = _mm256_set1_pd(p.bias_correction1);
  const __m256d bc2 = _mm256_set1_pd(p.bias_correction2);
  const __m256d lr = _mm256_set1_pd(p.lr);
  const __m256d eps = _mm256_set1_pd(p.eps);
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    const __m256d th = _mm256_loadu_pd(param + k);
    const __m256d g = _mm256_add_pd(_mm256_loadu_pd(grad + k), _mm256_mul_pd(wd, th));
    const __m256d mk = _mm256_add_pd(_mm256_mul_pd(b1, _mm256_loadu_pd(m + k)), _mm256_mul_pd(omb1, g));
    const __m256d vk =
        _mm256_add_pd(_mm256_mul_pd(b2, _mm256_loadu_pd(v + k)), _mm256_mul_pd(_mm256_mul_pd(omb2, g), g));
    _mm256_storeu_pd(m + k, mk);
    _mm256_storeu_pd(v + k, vk);
    const __m256d m_hat = _mm256_div_pd(mk, bc1);
    const __m256d v_hat = _mm256_div_pd(vk, bc2);
    const __m256d denom = _mm256_add_pd(_mm256_sqrt_pd(v_hat), eps);
    _mm256_storeu_pd(param + k, _mm256_sub_pd(th, _mm256_div_pd(_mm256_mul_pd(lr, m_hat), denom)));
  }
  if (k < n) scalar::table.adam_update(param + k, grad + k, m + k, v + k, n - k, p);
}

void ema_blend(double* teacher, const double* student, std::size_t n, double alpha) {
  const __m256d a = _mm256_set1_pd(alpha);
  const __m256d b = _mm256_set1_pd(1.0 - alpha);
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    const __m256d t = _mm256_loadu_pd(teacher + k);
    const __m256d s = _mm256_loadu_pd(student + k);
    _mm256_storeu_pd(teacher + k, _mm256_add_pd(_mm256_mul_pd(a, t), _mm256_mul_pd(b, s)));
  }
  if (k < n) scalar::table.ema_blend(teacher + k, student + k, n - k, alpha);
}

void sum_and_dot(const float* a, const float* b, std::size_t n, double* sums) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  __m256d d0 = _mm256_setzero_pd();
  __m256d d1 = _mm256_setzero_pd();
  std::size_t k = 0;
  for (; k + 8 <= n; k += 8) {
    const __m256 av = _mm256_loadu_ps(a + k);
    const __m256 bv = _mm256_loadu_ps(b + k);
    const __m256d alo = _mm256_cvtps_pd(_mm256_castps256_ps128(av));
    const __m256d ahi = _mm256_cvtps_pd(_mm256_extractf128_ps(av, 1));
    const __m256d blo = _mm256_cvtps_pd(_mm256_castps256_ps128(bv));
    const __m256d bhi = _mm256_cvtps_pd(_mm256_extractf128_ps(bv, 1));
    s0 = _mm256_add_pd(s0, alo);
    s1 = _mm256_add_pd(s1, ahi);
    d0 = _mm256_fmadd_pd(alo, blo, d0);
    d1 = _mm256_fmadd_pd(ahi, bhi, d1);
  }
  alignas(32) double ls[4];
  alignas(32) double ld[4];
  _mm256_store_pd(ls, _mm256_add_pd(s0, s1));
  _mm256_store_pd(ld, _mm256_add_pd(d0, d1));
  double s = (ls[0] + ls[1]) + (ls[2] + ls[3]);
  double d = (ld[0] + ld[1]) + (ld[2] + ld[3]);
  for (; k < n; ++k) {
    s += a[k];
    d += static_cast<double>(a[k]) * b[k];
  }
  sums[0] = s;
  sums[1] = d;
}

}  // namespace

const KernelTable table{conv3_forward, conv3_weight_grad, adam_update, ema_blend, sum_and_dot};

}  // namespace cseg::simd::avx2
