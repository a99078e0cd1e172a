#include "dilseg/tensor.hpp"

#include <cstdlib>

#if defined(__x86_64__)
#include <cpuid.h>
#include <unistd.h>
#endif

namespace dilseg {

namespace {

// Best OpenBLAS core for the ISA the CPU actually reports, or null when the
// default detection can be trusted.
const char* desired_coretype() {
#if defined(__x86_64__)
  unsigned eax, ebx, ecx, edx;
  bool osxsave = false;
  if (__get_cpuid(1, &eax, &ebx, &ecx, &edx)) {
    osxsave = (ecx & (1u << 27)) != 0;  // XGETBV available to user code
  }
  if (!osxsave) return nullptr;
  bool avx2 = false, avx512f = false;
  if (__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) {
    avx2 = (ebx & (1u << 5)) != 0;
    avx512f = (ebx & (1u << 16)) != 0;
  }
  unsigned lo, hi;
  __asm__("xgetbv" : "=a"(lo), "=d"(hi) : "c"(0));
  const bool ymm = (lo & 0x6) == 0x6;           // SSE+AVX state enabled
  const bool zmm = ymm && (lo & 0xe0) == 0xe0;  // opmask+ZMM state enabled
  if (avx512f && zmm) return "SKYLAKEX";
  if (avx2 && ymm) return "HASWELL";
#endif
  return nullptr;
}

}  // namespace

void ensure_fast_blas(char** argv) {
#if defined(__x86_64__)
  if (getenv("OPENBLAS_CORETYPE") != nullptr) return;
  const char* core = desired_coretype();
  if (core == nullptr) return;
  setenv("OPENBLAS_CORETYPE", core, 1);
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  if (argv != nullptr && argv[0] != nullptr) {
    execv("/proc/self/exe", argv);  // re-read env before OpenBLAS loads
    // exec failed: continue with whatever kernel OpenBLAS picked.
  }
#else
  (void)argv;
#endif
}

extern "C" void openblas_set_num_threads(int);

void configure_blas() {
  // Single-threaded BLAS: fixed summation order, bit-reproducible results.
  static const bool once = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)once;
}

}  // namespace dilseg
