#pragma once

// Dense inner-loop kernels with a scalar reference and an AVX2/FMA variant.
// The public entry points dispatch on the ISA selected at runtime; the
// per-ISA namespaces are exposed so tests can compare them directly.

#include <cstddef>
#include <span>
#include <string_view>

namespace dupl::kernels {

enum class Isa { kScalar, kAvx2 };

bool cpu_has_avx2();

// Defaults to the best ISA the CPU supports. DUPL_ISA=scalar forces the
// reference path.
Isa active_isa();
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

// Strided read-only matrix view: element (r, c) lives at
// data[r * row_stride + c * col_stride]. Transposes are expressed by
// swapping the strides.
template <typename T>
struct MatrixView {
  const T* data;
  std::ptrdiff_t row_stride;
  std::ptrdiff_t col_stride;
};

template <typename T>
MatrixView<T> row_major(const T* data, std::ptrdiff_t cols) {
  return {data, cols, 1};
}
template <typename T>
MatrixView<T> transposed(const T* data, std::ptrdiff_t cols) {
  return {data, 1, cols};
}

struct AdamWCoeffs {
  double lr;
  double beta1;
  double beta2;
  double eps;
  double weight_decay;
  double bias_correction1;  // 1 - beta1^t
  double bias_correction2;  // 1 - beta2^t
};

// C[m x n] (+)= A[m x k] * B[k x n]; C is row-major with leading dim ldc.
template <typename T>
void gemm(int m, int n, int k, MatrixView<T> a, MatrixView<T> b, T* c,
          std::ptrdiff_t ldc, bool accumulate);

// Accumulates in double regardless of T.
template <typename T>
double dot(std::span<const T> x, std::span<const T> y);

template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y);

template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad,
                  std::span<T> exp_avg, std::span<T> exp_avg_sq,
                  const AdamWCoeffs& coeffs);

namespace scalar {
template <typename T>
void gemm(int m, int n, int k, MatrixView<T> a, MatrixView<T> b, T* c,
          std::ptrdiff_t ldc, bool accumulate);
template <typename T>
double dot(std::span<const T> x, std::span<const T> y);
template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y);
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad,
                  std::span<T> exp_avg, std::span<T> exp_avg_sq,
                  const AdamWCoeffs& coeffs);
}  // namespace scalar

// Only callable when cpu_has_avx2() is true.
namespace avx2 {
template <typename T>
void gemm(int m, int n, int k, MatrixView<T> a, MatrixView<T> b, T* c,
          std::ptrdiff_t ldc, bool accumulate);
template <typename T>
double dot(std::span<const T> x, std::span<const T> y);
template <typename T>
void axpy(T alpha, std::span<const T> x, std::span<T> y);
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad,
                  std::span<T> exp_avg, std::span<T> exp_avg_sq,
                  const AdamWCoeffs& coeffs);
}  // namespace avx2

}  // namespace dupl::kernels
