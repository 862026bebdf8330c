#include <atomic>
#include <cstdlib>
#include <string>

#include "dupl/error.hpp"
#include "dupl/kernels/kernels.hpp"

namespace dupl::kernels {
namespace {

Isa initial_isa() {
  if (const char* env = std::getenv("DUPL_ISA")) {
    if (std::string(env) == "scalar") return Isa::kScalar;
  }
  return cpu_has_avx2() ? Isa::kAvx2 : Isa::kScalar;
}

std::atomic<Isa>& isa_slot() {
  static std::atomic<Isa> slot{initial_isa()};
  return slot;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  static const bool has = __builtin_cpu_supports("avx2") &&
                          __builtin_cpu_supports("fma");
  return has;
#else
  return false;
#endif
}

Isa active_isa() { return isa_slot().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (isa == Isa::kAvx2 && !cpu_has_avx2()) {
    throw ConfigError("AVX2/FMA kernels requested but not supported by CPU");
  }
  isa_slot().store(isa, std::memory_order_relaxed);
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::kAvx2 ? "avx2" : "scalar";
}

template <typename T>
void gemm(int m, int n, int k, MatrixView<T> a, MatrixView<T> b, T* c,
          std::ptrdiff_t ldc, bool accumulate) {
  if (active_isa() == Isa::kAvx2) {
    avx2::gemm<T>(m, n, k, a, b, c, ldc, accumulate);
  } else {
    scalar::gemm<T>(m, n, k, a, b, c, ldc, accumulate);
  }
}

template <typename T>
double dot(std::span<const T> x, std::span<const T> y) {
  return active_isa() == Isa::kAvx2 ? avx2::dot<T>(x, y)
                                    : scalar::dot<T>(x, y);
}

template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y) {
  if (active_isa() == Isa::kAvx2) {
    avx2::axpy<T>(alpha, x, y);
  } else {
    scalar::axpy<T>(alpha, x, y);
  }
}

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad,
                  std::span<T> exp_avg, std::span<T> exp_avg_sq,
                  const AdamWCoeffs& coeffs) {
  if (active_isa() == Isa::kAvx2) {
    avx2::adamw_update<T>(param, grad, exp_avg, exp_avg_sq, coeffs);
  } else {
    scalar::adamw_update<T>(param, grad, exp_avg, exp_avg_sq, coeffs);
  }
}

#define DUPL_INSTANTIATE(T)                                                   \
  template void gemm<T>(int, int, int, MatrixView<T>, MatrixView<T>, T*,      \
                        std::ptrdiff_t, bool);                                \
  template double dot<T>(std::span<const T>, std::span<const T>);             \
  template void axpy<T>(T, std::span<const T>, std::span<T>);                 \
  template void adamw_update<T>(std::span<T>, std::span<const T>,             \
                                std::span<T>, std::span<T>,                   \
                                const AdamWCoeffs&);
DUPL_INSTANTIATE(float)
DUPL_INSTANTIATE(double)
#undef DUPL_INSTANTIATE

}  // namespace dupl::kernels
