// Compiled with -mavx512f -mfma; only reached when CPUID reports AVX-512F.
#include <immintrin.h>

#include <cmath>

#include "cseg/simd/kernels.hpp"

namespace cseg::simd::avx512 {

namespace {

// OB output channels x 32 consecutive positions per register tile.
template <int OB>
void conv3_forward_block(const float* in, int cin, const float* w, int o0, float* out, const Conv3Geometry& g) {
  const std::int64_t qb = g.q_begin;
  const std::int64_t qe = g.q_end;
  const std::int64_t stride = g.channel_stride;
  const float* wbase[OB];
  for (int b = 0; b < OB; ++b) wbase[b] = w + static_cast<std::int64_t>(o0 + b) * cin * 27;

  std::int64_t q = qb;
  for (; q + 32 <= qe; q += 32) {
    __m512 acc[OB][2];
    for (int b = 0; b < OB; ++b) acc[b][0] = acc[b][1] = _mm512_setzero_ps();
    for (int i = 0; i < cin; ++i) {
      const float* src_c = in + i * stride + q;
      const std::int64_t wi = static_cast<std::int64_t>(i) * 27;
      for (int t = 0; t < 27; ++t) {
        const float* src = src_c + g.offsets[t];
        const __m512 x0 = _mm512_loadu_ps(src);
        const __m512 x1 = _mm512_loadu_ps(src + 16);
        for (int b = 0; b < OB; ++b) {
          const __m512 wv = _mm512_set1_ps(wbase[b][wi + t]);
          acc[b][0] = _mm512_fmadd_ps(wv, x0, acc[b][0]);
          acc[b][1] = _mm512_fmadd_ps(wv, x1, acc[b][1]);
        }
      }
    }
    for (int b = 0; b < OB; ++b) {
      float* dst = out + static_cast<std::int64_t>(o0 + b) * stride + q;
      _mm512_storeu_ps(dst, acc[b][0]);
      _mm512_storeu_ps(dst + 16, acc[b][1]);
    }
  }
  if (q < qe) {
    // Masked tail of up to 31 positions.
    const std::int64_t rem = qe - q;
    const __mmask16 m0 = rem >= 16 ? static_cast<__mmask16>(0xFFFF) : static_cast<__mmask16>((1u << rem) - 1u);
    const __mmask16 m1 = rem > 16 ? static_cast<__mmask16>((1u << (rem - 16)) - 1u) : static_cast<__mmask16>(0);
    __m512 acc[OB][2];
    for (int b = 0; b < OB; ++b) acc[b][0] = acc[b][1] = _mm512_setzero_ps();
    for (int i = 0; i < cin; ++i) {
      const float* src_c = in + i * stride + q;
      const std::int64_t wi = static_cast<std::int64_t>(i) * 27;
      for (int t = 0; t < 27; ++t) {
        const float* src = src_c + g.offsets[t];
        const __m512 x0 = _mm512_maskz_loadu_ps(m0, src);
        const __m512 x1 = _mm512_maskz_loadu_ps(m1, src + 16);
        for (int b = 0; b < OB; ++b) {
          const __m512 wv = _mm512_set1_ps(wbase[b][wi + t]);
          acc[b][0] = _mm512_fmadd_ps(wv, x0, acc[b][0]);
          acc[b][1] = _mm512_fmadd_ps(wv, x1, acc[b][1]);
        }
      }
    }
    for (int b = 0; b < OB; ++b) {
      float* dst = out + static_cast<std::int64_t>(o0 + b) * stride + q;
      _mm512_mask_storeu_ps(dst, m0, acc[b][0]);
      _mm512_mask_storeu_ps(dst + 16, m1, acc[b][1]);
    }
  }
}

void conv3_forward(const float* in, int cin, const float* w, int cout, float* out, const Conv3Geometry& g) {
  int o = 0;
  for (; o + 8 <= cout; o += 8) conv3_forward_block<8>(in, cin, w, o, out, g);
  switch (cout - o) {
    case 7: conv3_forward_block<7>(in, cin, w, o, out, g); break;
    case 6: conv3_forward_block<6>(in, cin, w, o, out, g); break;
    case 5: conv3_forward_block<5>(in, cin, w, o, out, g); break;
    case 4: conv3_forward_block<4>(in, cin, w, o, out, g); break;
    case 3: conv3_forward_block<3>(in, cin, w, o, out, g); break;
    case 2: conv3_forward_block<2>(in, cin, w, o, out, g); break;
    case 1: conv3_forward_block<1>(in, cin, w, o, out, g); break;
    default: break;
  }
}

// OB output channels x the three dx taps of one (dz, dy) row, 16 positions per step.
template <int OB>
void conv3_weight_grad_block(const float* dout, int o0, const float* in, int cin, float* dw, const Conv3Geometry& g) {
  const std::int64_t stride = g.channel_stride;
  const std::int64_t qb = g.q_begin;
  const std::int64_t qe = g.q_end;
  const std::int64_t q_vec_end = qb + (qe - qb) / 16 * 16;
  const std::int64_t rem = qe - q_vec_end;
  const __mmask16 tail_mask = static_cast<__mmask16>((1u << rem) - 1u);
  const float* d[OB];
  for (int b = 0; b < OB; ++b) d[b] = dout + static_cast<std::int64_t>(o0 + b) * stride;

  for (int i = 0; i < cin; ++i) {
    const float* src_c = in + i * stride;
    for (int row = 0; row < 9; ++row) {
      const float* s0 = src_c + g.offsets[row * 3 + 0];
      const float* s1 = src_c + g.offsets[row * 3 + 1];
      const float* s2 = src_c + g.offsets[row * 3 + 2];
      __m512 acc[OB][3];
      for (int b = 0; b < OB; ++b) acc[b][0] = acc[b][1] = acc[b][2] = _mm512_setzero_ps();
      for (std::int64_t q = qb; q < q_vec_end; q += 16) {
        const __m512 x0 = _mm512_loadu_ps(s0 + q);
        const __m512 x1 = _mm512_loadu_ps(s1 + q);
        const __m512 x2 = _mm512_loadu_ps(s2 + q);
        for (int b = 0; b < OB; ++b) {
          const __m512 dv = _mm512_loadu_ps(d[b] + q);
          acc[b][0] = _mm512_fmadd_ps(dv, x0, acc[b][0]);
          acc[b][1] = _mm512_fmadd_ps(dv, x1, acc[b][1]);
          acc[b][2] = _mm512_fmadd_ps(dv, x2, acc[b][2]);
        }
      }
      if (rem > 0) {
        const __m512 x0 = _mm512_maskz_loadu_ps(tail_mask, s0 + q_vec_end);
        const __m512 x1 = _mm512_maskz_loadu_ps(tail_mask, s1 + q_vec_end);
        const __m512 x2 = _mm512_maskz_loadu_ps(tail_mask, s2 + q_vec_end);
        for (int b = 0; b < OB; ++b) {
          const __m512 dv = _mm512_maskz_loadu_ps(tail_mask, d[b] + q_vec_end);
          acc[b][0] = _mm512_fmadd_ps(dv, x0, acc[b][0]);
          acc[b][1] = _mm512_fmadd_ps(dv, x1, acc[b][1]);
          acc[b][2] = _mm512_fmadd_ps(dv, x2, acc[b][2]);
        }
      }
      for (int b = 0; b < OB; ++b) {
        float* dwk = dw + (static_cast<std::int64_t>(o0 + b) * cin + i) * 27 + row * 3;
        dwk[0] += _mm512_reduce_add_ps(acc[b][0]);
        dwk[1] += _mm512_reduce_add_ps(acc[b][1]);
        dwk[2] += _mm512_reduce_add_ps(acc[b][2]);
      }
    }
  }
}

void conv3_weight_grad(const float* dout, int cout, const float* in, int cin, float* dw, const Conv3Geometry& g) {
  int o = 0;
  for (; o + 8 <= cout; o += 8) conv3_weight_grad_block<8>(dout, o, in, cin, dw, g);
  for (; o + 4 <= cout; o += 4) conv3_weight_grad_block<4>(dout, o, in, cin, dw, g);
  switch (cout - o) {
    case 3: conv3_weight_grad_block<3>(dout, o, in, cin, dw, g); break;
    case 2: conv3_weight_grad_block<2>(dout, o, in, cin, dw, g); break;
    case 1: conv3_weight_grad_block<1>(dout, o, in, cin, dw, g); break;
    default: break;
  }
}

void sum_and_dot(const float* a, const float* b, std::size_t n, double* sums) {
  __m512d s0 = _mm512_setzero_pd();
  __m512d s1 = _mm512_setzero_pd();
  __m512d d0 = _mm512_setzero_pd();
  __m512d d1 = _mm512_setzero_pd();
  std::size_t k = 0;
  for (; k + 16 <= n; k += 16) {
    const __m512 av = _mm512_loadu_ps(a + k);
    const __m512 bv = _mm512_loadu_ps(b + k);
    const __m512d alo = _mm512_cvtps_pd(_mm512_castps512_ps256(av));
    const __m512d ahi = _mm512_cvtps_pd(_mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(av), 1)));
    const __m512d blo = _mm512_cvtps_pd(_mm512_castps512_ps256(bv));
    const __m512d bhi = _mm512_cvtps_pd(_mm256_castpd_ps(_mm512_extractf64x4_pd(_mm512_castps_pd(bv), 1)));
    s0 = _mm512_add_pd(s0, alo);
    s1 = _mm512_add_pd(s1, ahi);
    d0 = _mm512_fmadd_pd(alo, blo, d0);
    d1 = _mm512_fmadd_pd(ahi, bhi, d1);
  }
  double s = _mm512_reduce_add_pd(_mm512_add_pd(s0, s1));
  double d = _mm512_reduce_add_pd(_mm512_add_pd(d0, d1));
  for (; k < n; ++k) {
    s += a[k];
    d += static_cast<double>(a[k]) * b[k];
  }
  sums[0] = s;
  sums[1] = d;
}

}  // namespace

// Optimizer kernels are bandwidth-bound on small parameter vectors; reuse the AVX2 versions.
const KernelTable table{conv3_forward, conv3_weight_grad, avx2::table.adam_update, avx2::table.ema_blend,
                        sum_and_dot};

}  // namespace cseg::simd::avx512
