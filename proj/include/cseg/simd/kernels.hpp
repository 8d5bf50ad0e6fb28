#pragma once

// Data-parallel inner loops. Every kernel has a portable scalar reference and, on x86-64,
// AVX2+FMA and AVX-512F variants picked at runtime from CPUID. Variants agree with the
// reference to rounding (exactly for the double-precision optimizer kernels, which avoid
// fused multiply-adds).

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

namespace cseg::simd {

enum class Isa { scalar, avx2, avx512 };

std::string_view isa_name(Isa isa);

/// Best ISA supported by this CPU and build.
Isa detected_isa();
bool isa_supported(Isa isa);

/// ISA used by kernels(); defaults to detected_isa(), overridable by CSEG_ISA=scalar|avx2|avx512.
Isa active_isa();
void set_active_isa(Isa isa);

/// Sets flush-to-zero and denormals-are-zero for the calling thread. Deep activations
/// otherwise drift into the subnormal range and slow the conv kernels by an order of magnitude.
void enable_flush_to_zero();

/// Addressing for a 3x3x3 "same" convolution on zero-padded channels. Every channel is
/// stored as (H+2)x(W+2)x(D+2); outputs are computed over the flat index range
/// [q_begin, q_end) of the padded grid, which covers every interior voxel (plus border
/// positions that callers discard). Tap t = (dz*3 + dy)*3 + dx reads index q + offsets[t].
struct Conv3Geometry {
  std::int64_t q_begin = 0;
  std::int64_t q_end = 0;
  std::int64_t channel_stride = 0;
  std::array<std::int64_t, 27> offsets{};
};

struct AdamParams {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double weight_decay;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

struct KernelTable {
  /// out[o][q] = sum_i sum_t w[(o*cin + i)*27 + t] * in[i][q + offsets[t]], q in range.
  void (*conv3_forward)(const float* in, int cin, const float* w, int cout, float* out, const Conv3Geometry& g);

  /// dw[(o*cin + i)*27 + t] += sum_q dout[o][q] * in[i][q + offsets[t]], q in range.
  void (*conv3_weight_grad)(const float* dout, int cout, const float* in, int cin, float* dw,
                            const Conv3Geometry& g);

  /// Adam with L2 weight decay folded into the gradient.
  void (*adam_update)(double* param, const double* grad, double* m, double* v, std::size_t n, const AdamParams& p);

  /// teacher = alpha * teacher + (1 - alpha) * student.
  void (*ema_blend)(double* teacher, const double* student, std::size_t n, double alpha);

  /// sums[0] = sum a, sums[1] = sum a*b, accumulated in double.
  void (*sum_and_dot)(const float* a, const float* b, std::size_t n, double* sums);
};

const KernelTable& kernels();
const KernelTable& kernels(Isa isa);

namespace scalar {
extern const KernelTable table;
}
#if defined(__x86_64__) || defined(_M_X64)
namespace avx2 {
extern const KernelTable table;
}
namespace avx512 {
extern const KernelTable table;
}
#endif

}  // namespace cseg::simd
