// U-Net forward/backward timings per available ISA.
#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "cseg/core/random.hpp"
#include "cseg/nn/unet.hpp"
#include "cseg/simd/kernels.hpp"

int main(int argc, char** argv) {
  using namespace cseg;
  using Clock = std::chrono::steady_clock;
  simd::enable_flush_to_zero();
  const int n = argc > 1 ? std::atoi(argv[1]) : 32;
  const int width = argc > 2 ? std::atoi(argv[2]) : 8;
  const int reps = 5;
  nn::UNet net(nn::UNetConfig{1, 2, 4, width}, 1);
  nn::Tensor x(1, Shape3{n, n, n});
  Rng rng(3);
  for (float& v : x.data()) v = static_cast<float>(uniform01(rng));
  for (auto isa : {simd::Isa::scalar, simd::Isa::avx2, simd::Isa::avx512}) {
    if (!simd::isa_supported(isa)) continue;
    simd::set_active_isa(isa);
    const auto t0 = Clock::now();
    for (int r = 0; r < reps; ++r) net.forward(x);
    const auto t1 = Clock::now();
    std::vector<double> grad(net.parameters().size());
    for (int r = 0; r < reps; ++r) {
      nn::UNetTape tape;
      const auto y = net.forward(x, &tape);
      net.backward(tape, y, grad);
    }
    const auto t2 = Clock::now();
    std::printf("%-7s forward %7.1f ms  forward+backward %7.1f ms  (%zu params)\n", simd::isa_name(isa).data(),
                std::chrono::duration<double, std::milli>(t1 - t0).count() / reps,
                std::chrono::duration<double, std::milli>(t2 - t1).count() / reps, net.parameters().size());
  }
}
