#include <cstdlib>
#include <cstring>
#include <string>

#include "cseg/core/errors.hpp"
#include "cseg/simd/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <xmmintrin.h>
#endif

namespace cseg::simd {

namespace {

Isa initial_isa() {
  if (const char* env = std::getenv("CSEG_ISA")) {
    if (std::strcmp(env, "scalar") == 0) return Isa::scalar;
    if (std::strcmp(env, "avx2") == 0 && detected_isa() != Isa::scalar) return Isa::avx2;
    if (std::strcmp(env, "avx512") == 0 && detected_isa() == Isa::avx512) return Isa::avx512;
  }
  return detected_isa();
}

Isa& active_slot() {
  static Isa isa = initial_isa();
  return isa;
}

}  // namespace

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::avx2: return "avx2";
    case Isa::avx512: return "avx512";
    default: return "scalar";
  }
}

Isa detected_isa() {
#if defined(__x86_64__) || defined(_M_X64)
  static const bool has_avx2 = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
  static const bool has_avx512 = has_avx2 && __builtin_cpu_supports("avx512f");
  return has_avx512 ? Isa::avx512 : (has_avx2 ? Isa::avx2 : Isa::scalar);
#else
  return Isa::scalar;
#endif
}

Isa active_isa() { return active_slot(); }

bool isa_supported(Isa isa) { return static_cast<int>(isa) <= static_cast<int>(detected_isa()); }

void set_active_isa(Isa isa) {
  if (!isa_supported(isa)) throw ArgumentError(std::string(isa_name(isa)) + " kernels unavailable on this CPU");
  active_slot() = isa;
}

const KernelTable& kernels(Isa isa) {
#if defined(__x86_64__) || defined(_M_X64)
  if (isa == Isa::avx2) return avx2::table;
  if (isa == Isa::avx512) return avx512::table;
#endif
  (void)isa;
  return scalar::table;
}

const KernelTable& kernels() { return kernels(active_isa()); }

void enable_flush_to_zero() {
#if defined(__x86_64__) || defined(_M_X64)
  _mm_setcsr(_mm_getcsr() | 0x8040);
#endif
}

}  // namespace cseg::simd
